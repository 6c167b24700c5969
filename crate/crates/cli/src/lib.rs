//! Command-line front end: dataset generation, labeled-fraction sweeps,
//! ablations, checkpoint evaluation and gradient audits.

pub mod config;
pub mod sweep;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use meanteach::metrics::{evaluate, InstanceSet, MetricReport};
use meanteach::segmenter::Segmenter;
use meanteach::synth::build_dataset;
use meanteach::trainer::{evaluate_params, gradient_audit, load_checkpoint, Ablation, AuditConfig, AuditReport, Mode};
use meanteach::{DatasetManifest, ErrorKind};

use config::{parse_ablation, parse_mode, ExperimentConfig};
use sweep::{Cell, SweepData, SweepReport};

/// A failure with the exit code class it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.kind)
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<meanteach::Error> for CliError {
    fn from(e: meanteach::Error) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meanteach", version, about = "Semi-supervised cell segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write its manifest.
    Generate(GenerateArgs),
    /// Train both methods for every labeled fraction and replicate seed.
    Sweep(SweepArgs),
    /// Train the full model and its two ablations under identical seeds.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root to create.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `dataset.root_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; defaults to `experiment.data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Run a single replicate with this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated labeled fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `mmt_psm` or `supervised_only`; both when absent.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated subset of `full,no_mgd,no_psm`.
    #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
    pub ablation: Option<Vec<Ablation>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score the ground truth against itself instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Also write `eval.json` and `eval.csv` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates probed per loss.
    #[arg(long, default_value_t = 24)]
    pub coordinates: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Largest relative gradient error `audit` accepts.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn data_root(flag: Option<&PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    flag.cloned()
        .or_else(|| cfg.experiment.data_dir.clone())
        .ok_or_else(|| CliError::config("no dataset given: pass --data or set experiment.data_dir"))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<DatasetManifest, CliError> {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let mut spec = cfg.dataset.spec();
    if let Some(seed) = args.seed {
        spec.root_seed = seed;
    }
    Ok(build_dataset(&args.out_dir, &spec)?)
}

fn load_experiment(run: &RunArgs) -> Result<(ExperimentConfig, PathBuf, DatasetManifest), CliError> {
    let mut cfg = ExperimentConfig::load(run.config.as_deref())?;
    if let Some(seed) = run.seed {
        cfg.experiment.replicate_seeds = vec![seed];
    }
    if let Some(f) = &run.fractions {
        cfg.experiment.labeled_fractions = f.clone();
    }
    cfg.validate()?;
    let root = data_root(run.data.as_ref(), &cfg)?;
    let manifest = DatasetManifest::load(&root)?;
    Ok((cfg, root, manifest))
}

fn finish(
    report: SweepReport,
    failure: Option<ErrorKind>,
    out_dir: &Path,
    stem: &str,
) -> Result<SweepReport, CliError> {
    write(&out_dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write(&out_dir.join(format!("{stem}.json")), &report.to_json())?;
    match failure {
        Some(kind) => Err(CliError {
            kind,
            message: format!(
                "some {stem} runs failed; see {}",
                out_dir.join(format!("{stem}.json")).display()
            ),
        }),
        None => Ok(report),
    }
}

/// Every (fraction, seed) pair trained with supervised-only and full mmt_psm
/// (or just `--mode`). Writes `sweep.csv`, `sweep.json` and per-run outputs.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport, CliError> {
    let (mut cfg, root, manifest) = load_experiment(&args.run)?;
    if let Some(m) = args.mode {
        cfg.experiment.mode = Some(m);
    }
    let modes = match cfg.experiment.mode {
        Some(m) => vec![m],
        None => vec![Mode::SupervisedOnly, Mode::MmtPsm],
    };
    let mut cells = Vec::new();
    for &fraction in &cfg.experiment.labeled_fractions {
        for &seed in &cfg.experiment.replicate_seeds {
            for &mode in &modes {
                cells.push(Cell {
                    fraction,
                    mode,
                    ablation: Ablation::Full,
                    seed,
                });
            }
        }
    }
    let data = SweepData::load(&root, &manifest, modes.contains(&Mode::MmtPsm))?;
    create_dir(&args.run.out_dir)?;
    let (report, failure) = sweep::run_cells(&cfg.train, &data, &cells, Some(&args.run.out_dir));
    finish(report, failure, &args.run.out_dir, "sweep")
}

/// The full model and its ablations, every (fraction, seed) pair. Writes
/// `ablate.csv`, `ablate.json` and per-run outputs.
pub fn cmd_ablate(args: &AblateArgs) -> Result<SweepReport, CliError> {
    let (mut cfg, root, manifest) = load_experiment(&args.run)?;
    if let Some(a) = &args.ablation {
        cfg.experiment.ablations = a.clone();
    }
    cfg.validate()?;
    let mut cells = Vec::new();
    for &fraction in &cfg.experiment.labeled_fractions {
        for &seed in &cfg.experiment.replicate_seeds {
            for &ablation in &cfg.experiment.ablations {
                cells.push(Cell {
                    fraction,
                    mode: Mode::MmtPsm,
                    ablation,
                    seed,
                });
            }
        }
    }
    let data = SweepData::load(&root, &manifest, true)?;
    create_dir(&args.run.out_dir)?;
    let (report, failure) = sweep::run_cells(&cfg.train, &data, &cells, Some(&args.run.out_dir));
    finish(report, failure, &args.run.out_dir, "ablate")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport, CliError> {
    let cfg = ExperimentConfig::load(args.config.as_deref())?;
    let root = data_root(args.data.as_ref(), &cfg)?;
    let manifest = DatasetManifest::load(&root)?;
    let scenes = manifest
        .validation_ids
        .iter()
        .map(|id| manifest.load_scene(&root, id))
        .collect::<meanteach::Result<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(CliError::config("the dataset has no validation scenes"));
    }
    let report = if args.oracle {
        let gts: Vec<InstanceSet> = scenes
            .iter()
            .map(|s| InstanceSet::from_ground_truth(s.instances()))
            .collect();
        evaluate(&gts, &gts)?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap requires a checkpoint without --oracle");
        let ckpt = load_checkpoint(path)?;
        let model = Segmenter::new(ckpt.header.config.model.clone())?;
        evaluate_params(&model, &ckpt.state.student, &scenes)?
    };
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write(&dir.join("eval.json"), &report.to_json())?;
        write(
            &dir.join("eval.csv"),
            &format!("{}\n{}\n", MetricReport::CSV_HEADER, report.to_csv_row()),
        )?;
    }
    Ok(report)
}

/// Runs the audit and writes `audit.json` when asked.
pub fn cmd_audit(args: &AuditArgs) -> Result<AuditReport, CliError> {
    let report = gradient_audit(&AuditConfig {
        seed: args.seed,
        coordinates: args.coordinates,
        ..AuditConfig::default()
    })?;
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write(
            &dir.join("audit.json"),
            &serde_json::to_string_pretty(&report).expect("audit serializes"),
        )?;
    }
    Ok(report)
}

/// Numerical failure when any loss exceeds [`AUDIT_TOLERANCE`].
pub fn audit_verdict(report: &AuditReport) -> Result<(), CliError> {
    if report.max_rel_error() <= AUDIT_TOLERANCE {
        return Ok(());
    }
    Err(CliError {
        kind: ErrorKind::Numerical,
        message: format!(
            "gradient audit failed: max relative error {:.3e} exceeds {AUDIT_TOLERANCE:e}",
            report.max_rel_error()
        ),
    })
}

/// Dispatches a parsed command line and prints its primary output.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => {
            let m = cmd_generate(a)?;
            println!("{}", a.out_dir.join(meanteach::synth::MANIFEST_FILE).display());
            eprintln!(
                "{} labeled, {} unlabeled, {} validation scenes",
                m.labeled_ids.len(),
                m.unlabeled_ids.len(),
                m.validation_ids.len()
            );
        }
        Command::Sweep(a) => {
            let r = cmd_sweep(a)?;
            print!("{}", r.summary_table());
        }
        Command::Ablate(a) => {
            let r = cmd_ablate(a)?;
            print!("{}", r.summary_table());
        }
        Command::Eval(a) => println!("{}", cmd_eval(a)?.to_json()),
        Command::Audit(a) => {
            let r = cmd_audit(a)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("audit serializes"));
            audit_verdict(&r)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_line_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from([
            "meanteach",
            "ablate",
            "--out-dir",
            "o",
            "--fractions",
            "0.1,0.5",
            "--ablation",
            "full,no_psm",
        ])
        .unwrap();
        let Command::Ablate(a) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(a.run.fractions, Some(vec![0.1, 0.5]));
        assert_eq!(a.ablation, Some(vec![Ablation::Full, Ablation::NoPsm]));

        let cli = Cli::try_parse_from(["meanteach", "sweep", "--out-dir", "o", "--mode", "supervised_only"]).unwrap();
        let Command::Sweep(s) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(s.mode, Some(Mode::SupervisedOnly));
        assert!(Cli::try_parse_from(["meanteach", "sweep", "--out-dir", "o", "--mode", "both"]).is_err());
        assert!(Cli::try_parse_from(["meanteach", "eval"]).is_err());
        assert!(Cli::try_parse_from(["meanteach", "eval", "--oracle"]).is_ok());
    }
}
