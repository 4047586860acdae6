//! Command-line experiment surface: dataset generation, training,
//! leave-one-domain-out evaluation, the ablation grid, feature export, and
//! post-hoc plots.

mod ablate;
mod features;
mod plot;

pub use ablate::{
    collect_outcomes, eval_network, run_arm, run_dir_name, summary_tsv, AblationGrid, ArmOutcome,
};
pub use features::{domain_overlap_score, export_features, pca2, FeatureDump, RowLabel};
pub use plot::{curves_svg, embedding_svg, read_run_log};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{build_dataset, DatasetHandle, TransformRanges};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Network, NetworkKind, ParamVector};
use crate::trainer::{evaluate_params, BaclArm, EmaArm, TrainConfig, Trainer};

/// Everything needed to reproduce a CLI run, written into every output
/// directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub held_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ema_arm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bacl_arm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub networks: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inputs: Option<Vec<String>>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

fn parse_arm(s: &str) -> Result<(EmaArm, BaclArm)> {
    let (e, b) = s.split_once(',').ok_or_else(|| {
        Error::config(format!(
            "arm {s:?} must be EMA_ARM,BACL_ARM (e.g. GS_EMA,BACL)"
        ))
    })?;
    Ok((e.trim().parse()?, b.trim().parse()?))
}

fn parse_network(s: &str) -> Result<NetworkKind> {
    match s.trim() {
        "STUDENT" => Ok(NetworkKind::Student),
        "TEACHER" => Ok(NetworkKind::Teacher),
        other => Err(Error::config(format!(
            "unknown network {other:?}, expected STUDENT | TEACHER"
        ))),
    }
}

#[derive(Parser)]
#[command(
    name = "gsema-lab",
    version,
    about = "Desk-scale lab for gradient-surgery-gated mean-teacher training \
             with boundary-aware contrastive regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the multi-domain vessel-phantom dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of styled domains.
        #[arg(long, default_value_t = 4)]
        domains: usize,
        /// Samples per domain.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Cubic grid edge length in voxels.
        #[arg(long, default_value_t = 32)]
        shape: usize,
    },
    /// Train one run and write its log and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domain excluded from training.
        #[arg(long)]
        held_out: Option<usize>,
        /// Override the configured arms, as EMA_ARM,BACL_ARM.
        #[arg(long, value_parser = parse_arm)]
        arm: Option<(EmaArm, BaclArm)>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Segment a held-out domain with a checkpoint and report overlap metrics.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        held_out: usize,
        /// Checkpoint prefix (without .params.f32 / .json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_network, default_value = "TEACHER")]
        network: NetworkKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid and reduce it to a summary table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid cells as EMA_ARM,BACL_ARM; repeat for several. Defaults to
        /// the full 3x3 grid.
        #[arg(long, value_parser = parse_arm)]
        arm: Vec<(EmaArm, BaclArm)>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Single held-out domain; omitted = each domain held out in turn.
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Dump flattened bottleneck latents for dataset samples.
    ExportFeatures {
        /// A train/ablate run directory holding student_final/teacher_final.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one domain; omitted = all domains.
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long, value_parser = parse_network, value_delimiter = ',', default_value = "TEACHER")]
        networks: Vec<NetworkKind>,
    },
    /// Render the embedding scatter and loss/gate-rate curves from persisted
    /// artifacts.
    Plot {
        /// Feature dump as LABEL=PREFIX (label shows in the legend); repeatable.
        #[arg(long)]
        dump: Vec<String>,
        /// Run log as LABEL=PATH; repeatable.
        #[arg(long)]
        log: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> Result<()> {
    execute(Cli::parse())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { out, seed, domains, samples, shape } => {
            generate_data(&out, seed, domains, samples, shape)
        }
        Command::Train { config, dataset, out, held_out, arm, seed, deterministic } => {
            train(config.as_deref(), &dataset, &out, held_out, arm, seed, deterministic)
        }
        Command::Evaluate { dataset, held_out, checkpoint, network, out } => {
            evaluate(&dataset, held_out, &checkpoint, network, &out)
        }
        Command::Ablate { config, dataset, out, arm, seeds, held_out, deterministic } => {
            run_ablation(config.as_deref(), &dataset, &out, &arm, &seeds, held_out, deterministic)
        }
        Command::ExportFeatures { run, dataset, out, held_out, networks } => {
            export(&run, &dataset, &out, held_out, &networks)
        }
        Command::Plot { dump, log, out } => plot_cmd(&dump, &log, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn generate_data(out: &Path, seed: u64, domains: usize, samples: usize, shape: usize) -> Result<()> {
    let ranges = TransformRanges::default();
    let handle = build_dataset(out, domains, samples, seed, [shape; 3], (1.2, 2.2), &ranges)?;
    write_manifest(
        out,
        &Manifest {
            command: "generate-data".into(),
            seed: Some(seed),
            dataset_path: Some(out.display().to_string()),
            dataset_digest: Some(handle.digest()?),
            ..Manifest::default()
        },
    )?;
    println!(
        "wrote {domains} domains x {samples} samples at {shape}^3 to {}",
        out.display()
    );
    Ok(())
}

fn train(
    config: Option<&Path>,
    dataset: &Path,
    out: &Path,
    held_out: Option<usize>,
    arm: Option<(EmaArm, BaclArm)>,
    seed: Option<u64>,
    deterministic: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some((e, b)) = arm {
        cfg.ema_arm = e;
        cfg.bacl_arm = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    let ds = DatasetHandle::open(dataset)?;
    write_manifest(
        out,
        &Manifest {
            command: "train".into(),
            config: Some(cfg.clone()),
            dataset_path: Some(dataset.display().to_string()),
            dataset_digest: Some(ds.digest()?),
            held_out,
            seed: Some(cfg.seed),
            ema_arm: Some(cfg.ema_arm.to_string()),
            bacl_arm: Some(cfg.bacl_arm.to_string()),
            ..Manifest::default()
        },
    )?;
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.train(&ds, held_out, out)?;
    let last = outcome.records.last().expect("training ran at least one step");
    println!(
        "finished {} steps, final total loss {:.6}; log at {}",
        outcome.records.len(),
        last.total,
        outcome.log_path.display()
    );
    Ok(())
}

fn evaluate(
    dataset: &Path,
    held_out: usize,
    checkpoint: &Path,
    network: NetworkKind,
    out: &Path,
) -> Result<()> {
    let ds = DatasetHandle::open(dataset)?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    let net = Network::new(meta.config)?;
    let report = evaluate_params(&net, &params, &ds, held_out, network)?;
    write_manifest(
        out,
        &Manifest {
            command: "evaluate".into(),
            dataset_path: Some(dataset.display().to_string()),
            dataset_digest: Some(ds.digest()?),
            held_out: Some(held_out),
            checkpoint: Some(checkpoint.display().to_string()),
            networks: Some(vec![format!("{network:?}")]),
            ..Manifest::default()
        },
    )?;
    fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

fn run_ablation(
    config: Option<&Path>,
    dataset: &Path,
    out: &Path,
    arms: &[(EmaArm, BaclArm)],
    seeds: &[u64],
    held_out: Option<usize>,
    deterministic: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if deterministic {
        cfg.deterministic = true;
    }
    let ds = DatasetHandle::open(dataset)?;
    let pairs = if arms.is_empty() {
        AblationGrid { seeds: seeds.to_vec(), ..AblationGrid::default() }.pairs()
    } else {
        arms.to_vec()
    };
    let holds: Vec<usize> = match held_out {
        Some(h) => vec![h],
        None => (0..ds.num_domains()).collect(),
    };

    fs::create_dir_all(out)?;
    write_manifest(
        out,
        &Manifest {
            command: "ablate".into(),
            config: Some(cfg.clone()),
            dataset_path: Some(dataset.display().to_string()),
            dataset_digest: Some(ds.digest()?),
            held_out,
            ..Manifest::default()
        },
    )?;

    for &(ema, bacl) in &pairs {
        for &seed in seeds {
            for &h in &holds {
                let dir = out.join(run_dir_name(ema, bacl, seed, h));
                let cell = run_arm(&cfg, ema, bacl, seed, &ds, dataset, h, &dir)?;
                println!(
                    "{} done: held-out DSC {:.4}",
                    run_dir_name(ema, bacl, seed, h),
                    cell.metrics.mean.dsc
                );
            }
        }
    }

    // The summary is a pure reduce over what the runs persisted.
    let outcomes = collect_outcomes(out)?;
    let tsv = summary_tsv(&outcomes);
    fs::write(out.join("summary.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn export(
    run: &Path,
    dataset: &Path,
    out: &Path,
    held_out: Option<usize>,
    networks: &[NetworkKind],
) -> Result<()> {
    let ds = DatasetHandle::open(dataset)?;
    let mut loaded: Vec<(NetworkKind, ParamVector)> = Vec::new();
    let mut net: Option<Network> = None;
    for &kind in networks {
        let prefix = run.join(match kind {
            NetworkKind::Student => "student_final",
            NetworkKind::Teacher => "teacher_final",
        });
        let (params, meta) = load_checkpoint(&prefix)?;
        match &net {
            None => net = Some(Network::new(meta.config)?),
            Some(n) => {
                if *n.config() != meta.config {
                    return Err(Error::config(
                        "student and teacher checkpoints disagree on the backbone",
                    ));
                }
            }
        }
        loaded.push((kind, params));
    }
    let net = net.ok_or_else(|| Error::config("export needs at least one network"))?;
    let domains: Vec<usize> = match held_out {
        Some(h) if h < ds.num_domains() => vec![h],
        Some(h) => {
            return Err(Error::config(format!(
                "held-out domain {h} out of range, dataset has {}",
                ds.num_domains()
            )))
        }
        None => (0..ds.num_domains()).collect(),
    };
    let branches: Vec<(NetworkKind, &ParamVector)> =
        loaded.iter().map(|(k, p)| (*k, p)).collect();
    let dump = export_features(&net, &branches, &ds, &domains)?;
    fs::create_dir_all(out)?;
    dump.write(&out.join("features"))?;
    write_manifest(
        out,
        &Manifest {
            command: "export-features".into(),
            dataset_path: Some(dataset.display().to_string()),
            dataset_digest: Some(ds.digest()?),
            held_out,
            checkpoint: Some(run.display().to_string()),
            networks: Some(networks.iter().map(|k| format!("{k:?}")).collect()),
            ..Manifest::default()
        },
    )?;
    println!(
        "wrote {} feature rows of dim {} to {}",
        dump.matrix.nrows(),
        dump.matrix.ncols(),
        out.display()
    );
    Ok(())
}

fn split_labeled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let p = PathBuf::from(spec);
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (label, p)
        }
    }
}

fn plot_cmd(dumps: &[String], logs: &[String], out: &Path) -> Result<()> {
    if dumps.is_empty() && logs.is_empty() {
        return Err(Error::config("plot needs at least one --dump or --log"));
    }
    fs::create_dir_all(out)?;
    let mut inputs = Vec::new();
    let mut written = Vec::new();

    if !dumps.is_empty() {
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        let mut series_of_row = Vec::new();
        let mut names = Vec::new();
        let mut dim = None;
        for spec in dumps {
            let (label, prefix) = split_labeled(spec);
            let dump = FeatureDump::read(&prefix)?;
            match dim {
                None => dim = Some(dump.matrix.ncols()),
                Some(d) if d != dump.matrix.ncols() => {
                    return Err(Error::shape(format!(
                        "dump {label} has feature dim {}, expected {d}",
                        dump.matrix.ncols()
                    )))
                }
                _ => {}
            }
            let series = names.len();
            names.push(label);
            inputs.push(prefix.display().to_string());
            for r in 0..dump.matrix.nrows() {
                rows.extend(dump.matrix.row(r).iter().copied());
                labels.push(dump.labels[r]);
                series_of_row.push(series);
            }
        }
        let dim = dim.expect("at least one dump");
        let matrix = Array2::from_shape_vec((labels.len(), dim), rows)
            .map_err(|e| Error::Internal(e.to_string()))?;
        let coords = pca2(&matrix.view());
        let svg = embedding_svg(&coords.view(), &labels, &series_of_row, &names)?;
        let path = out.join("embedding.svg");
        fs::write(&path, svg)?;
        written.push(path);
    }

    if !logs.is_empty() {
        let mut runs = Vec::new();
        for spec in logs {
            let (label, path) = split_labeled(spec);
            runs.push((label, read_run_log(&path)?));
            inputs.push(path.display().to_string());
        }
        let svg = curves_svg(&runs)?;
        let path = out.join("curves.svg");
        fs::write(&path, svg)?;
        written.push(path);
    }

    write_manifest(
        out,
        &Manifest {
            command: "plot".into(),
            inputs: Some(inputs),
            ..Manifest::default()
        },
    )?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_parser_accepts_the_documented_format() {
        let (e, b) = parse_arm("GS_EMA,BACL").unwrap();
        assert_eq!(e, EmaArm::GsEma);
        assert_eq!(b, BaclArm::Bacl);
        let (e, b) = parse_arm("NO_EMA, NONE").unwrap();
        assert_eq!(e, EmaArm::NoEma);
        assert_eq!(b, BaclArm::None);
        assert!(parse_arm("GS_EMA").is_err());
        assert!(parse_arm("GS_EMA,BOGUS").is_err());
    }

    #[test]
    fn network_parser_covers_both_branches() {
        assert_eq!(parse_network("STUDENT").unwrap(), NetworkKind::Student);
        assert_eq!(parse_network("TEACHER").unwrap(), NetworkKind::Teacher);
        assert!(parse_network("teacher").is_err());
    }

    #[test]
    fn labeled_specs_split_on_first_equals() {
        let (label, path) = split_labeled("GS_EMA=/tmp/run/features");
        assert_eq!(label, "GS_EMA");
        assert_eq!(path, PathBuf::from("/tmp/run/features"));
        let (label, path) = split_labeled("/tmp/run/features");
        assert_eq!(label, "features");
        assert_eq!(path, PathBuf::from("/tmp/run/features"));
    }

    #[test]
    fn cli_definition_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn manifest_omits_absent_fields() {
        let m = Manifest { command: "plot".into(), ..Manifest::default() };
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(text, r#"{"command":"plot"}"#);
    }
}
