//! Teacher-student training loop: dual forward passes, the weighted total
//! objective, per-domain gradient extraction, the gated EMA teacher update,
//! and a plain SGD student step with a staircase learning-rate schedule.

mod objective;
mod run;

pub use objective::{objective, StepComputation};
pub use run::{evaluate_params, TrainOutcome, Trainer};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::TransformRanges;
use crate::error::{Error, Result};
use crate::gsema::{EMAConfig, GateDecision};
use crate::losses::{LossWeights, MaskSpec};
use crate::model::BackboneConfig;

/// Teacher-update ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaArm {
    /// Teacher frozen at its initialization; evaluation falls back to the
    /// student.
    #[serde(rename = "NO_EMA")]
    NoEma,
    /// Unconditional EMA every step.
    #[serde(rename = "EMA")]
    Ema,
    /// EMA gated on gradient agreement.
    #[serde(rename = "GS_EMA")]
    GsEma,
}

/// Contrastive-loss ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaclArm {
    #[serde(rename = "NONE")]
    None,
    /// Volume-latent contrast only.
    #[serde(rename = "BACL_V")]
    BaclV,
    /// Boundary contrast only.
    #[serde(rename = "BACL_B")]
    BaclB,
    /// Both terms.
    #[serde(rename = "BACL")]
    Bacl,
}

impl BaclArm {
    pub fn uses_volume(&self) -> bool {
        matches!(self, BaclArm::BaclV | BaclArm::Bacl)
    }

    pub fn uses_boundary(&self) -> bool {
        matches!(self, BaclArm::BaclB | BaclArm::Bacl)
    }
}

impl FromStr for EmaArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NO_EMA" => Ok(EmaArm::NoEma),
            "EMA" => Ok(EmaArm::Ema),
            "GS_EMA" => Ok(EmaArm::GsEma),
            other => Err(Error::config(format!(
                "unknown EMA arm {other:?}, expected NO_EMA | EMA | GS_EMA"
            ))),
        }
    }
}

impl fmt::Display for EmaArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmaArm::NoEma => "NO_EMA",
            EmaArm::Ema => "EMA",
            EmaArm::GsEma => "GS_EMA",
        })
    }
}

impl FromStr for BaclArm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NONE" => Ok(BaclArm::None),
            "BACL_V" => Ok(BaclArm::BaclV),
            "BACL_B" => Ok(BaclArm::BaclB),
            "BACL" => Ok(BaclArm::Bacl),
            other => Err(Error::config(format!(
                "unknown BACL arm {other:?}, expected NONE | BACL_V | BACL_B | BACL"
            ))),
        }
    }
}

impl fmt::Display for BaclArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaclArm::None => "NONE",
            BaclArm::BaclV => "BACL_V",
            BaclArm::BaclB => "BACL_B",
            BaclArm::Bacl => "BACL",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ema: EMAConfig,
    pub weights: LossWeights,
    pub ema_arm: EmaArm,
    pub bacl_arm: BaclArm,
    pub backbone: BackboneConfig,
    pub mask: MaskSpec,
    /// Ranges for the per-step synthetic target shifts.
    pub target_ranges: TransformRanges,
    /// false (default): each batch comes from a single source domain.
    pub mix_domains: bool,
    /// Informational at this scale: the loop is single-threaded, so runs
    /// are reproducible either way. Recorded in manifests.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 0.001,
            batch_size: 2,
            seed: 0,
            ema: EMAConfig::default(),
            weights: LossWeights::default(),
            ema_arm: EmaArm::GsEma,
            bacl_arm: BaclArm::Bacl,
            backbone: BackboneConfig::default(),
            mask: MaskSpec::default(),
            target_ranges: TransformRanges::default(),
            mix_domains: false,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        self.ema.validate()?;
        self.weights.validate()?;
        self.backbone.validate()?;
        self.mask.validate()?;
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Staircase schedule: base_lr scaled by 0.1 every ten epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * 0.1f64.powi((epoch / 10) as i32)
    }
}

/// One line of the JSONL run log. Contrastive terms and the gate record are
/// omitted on arms that do not produce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_stu_src")]
    pub l_stu_src: f64,
    #[serde(rename = "L_stu_trg")]
    pub l_stu_trg: f64,
    #[serde(rename = "L_tea_src")]
    pub l_tea_src: f64,
    #[serde(rename = "L_tea_trg")]
    pub l_tea_trg: f64,
    #[serde(rename = "L_c_z", skip_serializing_if = "Option::is_none", default)]
    pub l_c_z: Option<f64>,
    #[serde(rename = "L_c_b", skip_serializing_if = "Option::is_none", default)]
    pub l_c_b: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate: Option<GateDecision>,
    pub lr: f64,
}

impl RunRecord {
    /// The weighted total recomputed from the logged parts.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * (self.l_stu_src + self.l_stu_trg + self.l_tea_src + self.l_tea_trg)
            + w.lambda2 * (self.l_c_z.unwrap_or(0.0) + self.l_c_b.unwrap_or(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_is_a_staircase() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(9) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(10) - 0.0001).abs() < 1e-18);
        assert!((cfg.lr_at(25) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at(99) - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn arms_parse_and_print() {
        for s in ["NO_EMA", "EMA", "GS_EMA"] {
            assert_eq!(EmaArm::from_str(s).unwrap().to_string(), s);
        }
        for s in ["NONE", "BACL_V", "BACL_B", "BACL"] {
            assert_eq!(BaclArm::from_str(s).unwrap().to_string(), s);
        }
        assert!(EmaArm::from_str("no_ema").is_err());
        assert!(BaclArm::from_str("").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig { epochs: 4, seed: 9, ..Default::default() };
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.epochs, 4);
        assert_eq!(back.seed, 9);
        assert_eq!(back.ema_arm, EmaArm::GsEma);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: TrainConfig = toml::from_str("epochs = 3\nbase_lr = 0.01").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!((cfg.base_lr - 0.01).abs() < 1e-18);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn record_total_recomputes() {
        let r = RunRecord {
            step: 1,
            epoch: 0,
            l_stu_src: 0.5,
            l_stu_trg: 0.7,
            l_tea_src: 0.4,
            l_tea_trg: 0.6,
            l_c_z: Some(1.0),
            l_c_b: None,
            total: 0.25 * 2.2 + 0.5,
            gate: None,
            lr: 0.001,
        };
        let w = LossWeights::default();
        assert!((r.recompute_total(&w) - r.total).abs() < 1e-12);
    }
}
