//! Ablation grid driver: train one run per (EMA arm, BACL arm, seed,
//! held-out domain) cell, evaluate each on its held-out domain, and reduce
//! the persisted per-run artifacts into a tab-separated summary table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::DatasetHandle;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{load_checkpoint, NetworkKind};
use crate::trainer::{evaluate_params, BaclArm, EmaArm, TrainConfig, Trainer};

use super::{write_manifest, Manifest};

/// The experiment grid. The default crosses the three teacher-update arms
/// with the three contrastive arms.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub ema_arms: Vec<EmaArm>,
    pub bacl_arms: Vec<BaclArm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            ema_arms: vec![EmaArm::NoEma, EmaArm::Ema, EmaArm::GsEma],
            bacl_arms: vec![BaclArm::BaclV, BaclArm::BaclB, BaclArm::Bacl],
            seeds: vec![0],
        }
    }
}

impl AblationGrid {
    pub fn pairs(&self) -> Vec<(EmaArm, BaclArm)> {
        let mut out = Vec::new();
        for &e in &self.ema_arms {
            for &b in &self.bacl_arms {
                out.push((e, b));
            }
        }
        out
    }
}

/// One completed grid cell.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub ema: EmaArm,
    pub bacl: BaclArm,
    pub seed: u64,
    pub held_out: usize,
    pub run_dir: PathBuf,
    pub metrics: MetricsReport,
}

/// The parameter set an arm is judged by: the teacher wherever it is
/// actually maintained, the student when the teacher is frozen at init.
pub fn eval_network(ema: EmaArm) -> NetworkKind {
    match ema {
        EmaArm::NoEma => NetworkKind::Student,
        EmaArm::Ema | EmaArm::GsEma => NetworkKind::Teacher,
    }
}

pub fn run_dir_name(ema: EmaArm, bacl: BaclArm, seed: u64, held_out: usize) -> String {
    format!("{ema}_{bacl}_s{seed}_h{held_out}")
}

/// Train and evaluate a single cell, leaving a manifest, the run log,
/// checkpoints, and metrics.json in `run_dir`.
pub fn run_arm(
    base: &TrainConfig,
    ema: EmaArm,
    bacl: BaclArm,
    seed: u64,
    dataset: &DatasetHandle,
    dataset_path: &Path,
    held_out: usize,
    run_dir: &Path,
) -> Result<ArmOutcome> {
    let mut cfg = base.clone();
    cfg.ema_arm = ema;
    cfg.bacl_arm = bacl;
    cfg.seed = seed;

    fs::create_dir_all(run_dir)?;
    write_manifest(
        run_dir,
        &Manifest {
            command: "ablate".into(),
            config: Some(cfg.clone()),
            dataset_path: Some(dataset_path.display().to_string()),
            dataset_digest: Some(dataset.digest()?),
            held_out: Some(held_out),
            seed: Some(seed),
            ema_arm: Some(ema.to_string()),
            bacl_arm: Some(bacl.to_string()),
            ..Manifest::default()
        },
    )?;

    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.train(dataset, Some(held_out), run_dir)?;
    let prefix = match eval_network(ema) {
        NetworkKind::Student => &outcome.student_prefix,
        NetworkKind::Teacher => &outcome.teacher_prefix,
    };
    let (params, _) = load_checkpoint(prefix)?;
    let metrics = evaluate_params(
        trainer.network(),
        &params,
        dataset,
        held_out,
        eval_network(ema),
    )?;
    fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_vec_pretty(&metrics)?,
    )?;
    Ok(ArmOutcome {
        ema,
        bacl,
        seed,
        held_out,
        run_dir: run_dir.to_path_buf(),
        metrics,
    })
}

/// Rebuild outcomes from completed run directories (manifest + metrics),
/// independent of the process that produced them.
pub fn collect_outcomes(out_dir: &Path) -> Result<Vec<ArmOutcome>> {
    let mut outcomes = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for dir in entries {
        let manifest_path = dir.join("manifest.json");
        let metrics_path = dir.join("metrics.json");
        if !manifest_path.is_file() || !metrics_path.is_file() {
            continue;
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let metrics: MetricsReport = serde_json::from_slice(&fs::read(&metrics_path)?)?;
        let (Some(ema), Some(bacl)) = (manifest.ema_arm, manifest.bacl_arm) else {
            continue;
        };
        outcomes.push(ArmOutcome {
            ema: ema.parse()?,
            bacl: bacl.parse()?,
            seed: manifest.seed.unwrap_or(0),
            held_out: manifest
                .held_out
                .ok_or_else(|| Error::config("run manifest lacks held_out"))?,
            run_dir: dir,
            metrics,
        });
    }
    if outcomes.is_empty() {
        return Err(Error::config(format!(
            "no completed runs under {}",
            out_dir.display()
        )));
    }
    Ok(outcomes)
}

/// One row per arm, metrics averaged over seeds and held-out domains,
/// reported as percentages with two decimals.
pub fn summary_tsv(outcomes: &[ArmOutcome]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<&ArmOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((o.ema.to_string(), o.bacl.to_string()))
            .or_default()
            .push(o);
    }
    let mut out = String::from("ema_arm\tbacl_arm\truns\tDSC\tSen\tJac\tVS\n");
    for ((ema, bacl), cell) in groups {
        let n = cell.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| cell.iter().map(|o| f(&o.metrics)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{ema}\t{bacl}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            cell.len(),
            100.0 * mean(|m| m.mean.dsc),
            100.0 * mean(|m| m.mean.sen),
            100.0 * mean(|m| m.mean.jac),
            100.0 * mean(|m| m.mean.vs),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsEntry;

    fn outcome(ema: EmaArm, bacl: BaclArm, seed: u64, dsc: f64) -> ArmOutcome {
        let e = MetricsEntry { dsc, sen: dsc, jac: dsc, vs: dsc };
        ArmOutcome {
            ema,
            bacl,
            seed,
            held_out: 0,
            run_dir: PathBuf::from("x"),
            metrics: MetricsReport { cases: vec![e], mean: e },
        }
    }

    #[test]
    fn default_grid_is_three_by_three() {
        let grid = AblationGrid::default();
        assert_eq!(grid.pairs().len(), 9);
    }

    #[test]
    fn summary_averages_within_arms() {
        let rows = vec![
            outcome(EmaArm::GsEma, BaclArm::Bacl, 0, 0.6),
            outcome(EmaArm::GsEma, BaclArm::Bacl, 1, 0.8),
            outcome(EmaArm::NoEma, BaclArm::Bacl, 0, 0.5),
        ];
        let tsv = summary_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "ema_arm\tbacl_arm\truns\tDSC\tSen\tJac\tVS");
        assert!(lines.iter().any(|l| l.starts_with("GS_EMA\tBACL\t2\t70.00")));
        assert!(lines.iter().any(|l| l.starts_with("NO_EMA\tBACL\t1\t50.00")));
    }

    #[test]
    fn eval_network_follows_the_arm() {
        assert_eq!(eval_network(EmaArm::NoEma), NetworkKind::Student);
        assert_eq!(eval_network(EmaArm::Ema), NetworkKind::Teacher);
        assert_eq!(eval_network(EmaArm::GsEma), NetworkKind::Teacher);
    }
}
