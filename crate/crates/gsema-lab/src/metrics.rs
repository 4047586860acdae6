//! Overlap metrics over binary voxel masks: Dice, sensitivity, Jaccard and
//! volume similarity, plus per-case/mean reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
}

/// Voxelwise confusion counts of a predicted mask against ground truth.
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let mut c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if p > 1 || g > 1 {
            return Err(Error::config("masks must be binary"));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

/// One case's metric values, all in [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub dsc: f64,
    pub sen: f64,
    pub jac: f64,
    pub vs: f64,
}

/// 0/0 convention: a ratio with zero denominator is 1 when both masks are
/// empty (nothing to get wrong) and 0 otherwise.
fn ratio(num: f64, den: f64, both_empty: bool) -> f64 {
    if den > 0.0 {
        num / den
    } else if both_empty {
        1.0
    } else {
        0.0
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricsEntry {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let both_empty = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    MetricsEntry {
        dsc: ratio(2.0 * tp, 2.0 * tp + fp + fn_, both_empty),
        sen: ratio(tp, tp + fn_, both_empty),
        jac: ratio(tp, tp + fp + fn_, both_empty),
        vs: ratio(
            2.0 * tp + fp + fn_ - (fp - fn_).abs(),
            2.0 * tp + fp + fn_,
            both_empty,
        ),
    }
}

/// Volume similarity in its size form, 1 - ||P|-|G|| / (|P|+|G|). For binary
/// masks this coincides with the confusion form used by `compute_metrics`
/// (|P|-|G| = FP-FN and |P|+|G| = 2TP+FP+FN).
pub fn volume_similarity_from_sizes(pred_voxels: u64, gt_voxels: u64) -> f64 {
    let (p, g) = (pred_voxels as f64, gt_voxels as f64);
    if p + g == 0.0 {
        return 1.0;
    }
    1.0 - (p - g).abs() / (p + g)
}

/// Binarize a probability map. Strictly-greater comparison, so an exactly
/// uninformative 0.5 map comes out all-background.
pub fn binarize(pred: &Prediction, threshold: f64) -> LabelMask {
    LabelMask {
        data: pred.probs.mapv(|p| (p > threshold) as u8),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<MetricsEntry>,
    pub mean: MetricsEntry,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<MetricsEntry>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::config("metrics report needs at least one case"));
        }
        let n = cases.len() as f64;
        let mean = MetricsEntry {
            dsc: cases.iter().map(|c| c.dsc).sum::<f64>() / n,
            sen: cases.iter().map(|c| c.sen).sum::<f64>() / n,
            jac: cases.iter().map(|c| c.jac).sum::<f64>() / n,
            vs: cases.iter().map(|c| c.vs).sum::<f64>() / n,
        };
        Ok(MetricsReport { cases, mean })
    }

    /// Aligned text table, percentages with two decimals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
            "case", "DSC (%)", "Sen (%)", "Jac (%)", "VS (%)"
        ));
        let row = |label: &str, e: &MetricsEntry| {
            format!(
                "{:<8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                label,
                e.dsc * 100.0,
                e.sen * 100.0,
                e.jac * 100.0,
                e.vs * 100.0
            )
        };
        for (i, e) in self.cases.iter().enumerate() {
            out.push_str(&row(&i.to_string(), e));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }
}
