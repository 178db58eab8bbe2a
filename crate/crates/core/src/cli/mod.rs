//! Command-line driver. Each subcommand works inside a run directory:
//!
//! ```text
//! <run_dir>/
//!   config.resolved       resolved configuration (TOML)
//!   manifest.json         converted records
//!   conversion.json       per-file conversion failures and warnings
//!   converted/            224×224 RGB PNG files
//!   outliers/             scores.csv, kept_manifest.json
//!   fold<i>/              per-fold results, one file per backbone and phase
//!   report.json, report.csv, report_folds.csv
//!   plot.csv, plot.svg
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 finished with some records or report cells failed.

mod config;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

pub use config::{write_resolved, RunConfig, SourceConfig, Stage, TrainSection};
pub use rundir::RunDir;

use crate::error::{Error, Result};
use crate::evaluation::{emit_plot_data, run_experiment, CellStatus, ComparisonReport};
use crate::ingest::{convert_all, scan_source, Axis, Manifest, SliceMode};
use crate::isoforest::{detect_outliers, save_report, OutlierReport};
use crate::model::{BackboneName, WeightsSource};
use crate::preprocess::{assemble_dataset, Dataset};
use crate::{seed, synth};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "brainage", version, about = "Brain-age regression from structural MRI")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a source tree, join labels and convert every image to 224×224 RGB PNG.
    Convert(StageArgs),
    /// Score converted images with an isolation forest and write the kept manifest.
    Outliers(StageArgs),
    /// Full pipeline: convert, outliers, cross-validation, report and plot.
    /// Resumes an existing run directory whose config matches.
    Run(StageArgs),
    /// Re-render tables and plot from an existing report.json.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write a synthetic brightness-to-age source tree for trying the pipeline.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 95)]
        structured: usize,
        #[arg(long, default_value_t = 5)]
        noise: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn serde_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn backbone_value(s: &str) -> std::result::Result<BackboneName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Settings shared by the stage subcommands. Flags override the config file.
#[derive(Debug, Default, Args)]
pub struct StageArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Source directory of MINC, DICOM or PNG images.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Label table (`source_path,subject_id,age_years,sex`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Existing manifest instead of --source/--labels.
    #[arg(long, conflicts_with_all = ["source", "labels"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated backbone names.
    #[arg(long, value_delimiter = ',', value_parser = backbone_value)]
    pub backbones: Option<Vec<BackboneName>>,
    /// `imagenet` or `random`.
    #[arg(long, value_parser = serde_value::<WeightsSource>)]
    pub weights: Option<WeightsSource>,
    #[arg(long)]
    pub trainable_tail_layers: Option<usize>,
    #[arg(long)]
    pub canonical_preprocessing: Option<bool>,
    #[arg(long)]
    pub k_folds: Option<usize>,
    #[arg(long)]
    pub group_by_subject: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub contamination: Option<f64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub subsample_size: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// `middle`, `every_k` or `all`.
    #[arg(long, value_parser = serde_value::<SliceMode>)]
    pub slice_mode: Option<SliceMode>,
    #[arg(long)]
    pub slice_k: Option<usize>,
    /// `axial`, `coronal` or `sagittal`.
    #[arg(long, value_parser = serde_value::<Axis>)]
    pub slice_axis: Option<Axis>,
}

impl StageArgs {
    /// Config file (or the run directory's stored config, or defaults) with
    /// flags applied on top, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let stored = self.run_dir.as_ref().map(|d| cwd.join(d).join(rundir::CONFIG_FILE));
                match stored.filter(|p| p.exists()) {
                    Some(p) => RunConfig::load(&p)?,
                    None => RunConfig::default(),
                }
            }
        };
        let abs = |p: &PathBuf| config::absolute(&cwd, p);
        if let Some(d) = &self.run_dir {
            cfg.run_dir = Some(abs(d));
        }
        if self.source.is_some() || self.labels.is_some() {
            cfg.source.manifest = None;
        }
        if let Some(p) = &self.source {
            cfg.source.root = Some(abs(p));
        }
        if let Some(p) = &self.labels {
            cfg.source.labels = Some(abs(p));
        }
        if let Some(p) = &self.manifest {
            cfg.source = SourceConfig {
                manifest: Some(abs(p)),
                ..SourceConfig::default()
            };
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            seed => cfg.seed,
            backbones => cfg.backbones,
            weights => cfg.weights,
            trainable_tail_layers => cfg.trainable_tail_layers,
            canonical_preprocessing => cfg.canonical_preprocessing,
            k_folds => cfg.k_folds,
            group_by_subject => cfg.group_by_subject,
            epochs => cfg.train.epochs,
            batch_size => cfg.train.batch_size,
            learning_rate => cfg.train.learning_rate,
            contamination => cfg.isoforest.contamination,
            n_trees => cfg.isoforest.n_trees,
            subsample_size => cfg.isoforest.subsample_size,
            feature_dim => cfg.isoforest.feature_dim,
            slice_mode => cfg.slice.mode,
            slice_k => cfg.slice.k,
            slice_axis => cfg.slice.axis,
        );
        cfg.validate()?;
        if cfg.run_dir.is_none() {
            return Err(Error::Config("no run directory: pass --run-dir or set run_dir".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Finished, but some records or cells failed.
    Partial,
}

impl Outcome {
    fn and(self, other: Outcome) -> Outcome {
        if self == Outcome::Partial || other == Outcome::Partial {
            Outcome::Partial
        } else {
            Outcome::Success
        }
    }
}

/// Parses arguments, runs the command and maps the result to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

pub fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Convert(args) => {
            let cfg = args.resolve()?;
            let rd = open(&cfg, Stage::Convert, false)?;
            convert(&cfg, &rd)
        }
        Command::Outliers(args) => {
            let cfg = args.resolve()?;
            let rd = open(&cfg, Stage::Outliers, false)?;
            let manifest = load_manifest(&rd)?;
            let dataset = assemble_dataset(&manifest)?;
            outliers(&cfg, &rd, &manifest, &dataset)?;
            Ok(Outcome::Success)
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let rd = open(&cfg, Stage::Evaluate, true)?;
            run(&cfg, &rd)
        }
        Command::Report { run_dir } => {
            let rd = RunDir::open(&run_dir)?;
            let path = rd.report_path();
            if !path.exists() {
                return Err(Error::invalid(format!("{} not found; run `brainage run` first", path.display())));
            }
            let report = ComparisonReport::load_json(&path)?;
            render(&report, &rd)?;
            Ok(outcome_of(&report))
        }
        Command::Synth {
            out,
            structured,
            noise,
            seed,
        } => {
            let labels = synth::write_source_tree(
                &out,
                &synth::SynthConfig {
                    structured,
                    noise,
                    seed,
                },
            )?;
            println!("wrote {} images and {}", structured + noise, labels.display());
            println!("planted noise images listed in {}", out.join("planted_noise.txt").display());
            Ok(Outcome::Success)
        }
    }
}

/// Locks the run directory and reconciles the stored config with `cfg`.
///
/// `run` (strict) refuses when outputs from differently configured stages
/// exist. The stage commands redo their stage, so they discard that stage's
/// outputs and everything downstream of it.
fn open(cfg: &RunConfig, stage: Stage, strict: bool) -> Result<RunDir> {
    let rd = RunDir::open(cfg.run_dir.as_deref().expect("validated"))?;
    let stored = rd.stored_config()?;
    let diff = stored.as_ref().and_then(|old| cfg.first_difference(old));
    if strict {
        if let Some(d) = diff {
            if rd.has_outputs_from(d)? {
                return Err(Error::Config(format!(
                    "{} holds results of a run whose {} settings differ (config hash {} here, {} stored); \
                     use a fresh run directory or delete the stale outputs",
                    rd.path().display(),
                    d.as_str(),
                    cfg.hash(),
                    stored.as_ref().map(RunConfig::hash).unwrap_or_default()
                )));
            }
        }
    } else {
        let from = diff.map_or(stage, |d| d.min(stage));
        if rd.has_outputs_from(from)? {
            log::info!("discarding existing {} outputs and later", from.as_str());
        }
        rd.invalidate_from(from)?;
    }
    write_resolved(cfg, &rd.config_path())?;
    Ok(rd)
}

fn load_manifest(rd: &RunDir) -> Result<Manifest> {
    let path = rd.manifest_path();
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no manifest at {}; run `brainage convert` first",
            path.display()
        )));
    }
    Manifest::load(&path)
}

fn convert(cfg: &RunConfig, rd: &RunDir) -> Result<Outcome> {
    let src = &cfg.source;
    let source_manifest = match (&src.root, &src.labels, &src.manifest) {
        (Some(root), Some(labels), None) => scan_source(root, labels)?,
        (None, None, Some(m)) => {
            let m = Manifest::load(m)?;
            if m.records.iter().all(|r| r.converted_path.as_ref().is_some_and(|p| p.exists())) {
                m.save(&rd.manifest_path())?;
                println!("using {} already converted records", m.len());
                return Ok(Outcome::Success);
            }
            m
        }
        _ => {
            return Err(Error::Config(
                "no source configured: set source.root and source.labels (or --source/--labels)".into(),
            ))
        }
    };
    let report = convert_all(&source_manifest, &cfg.slice, &rd.converted_dir())?;
    report.save(&rd.conversion_path())?;
    for f in &report.failures {
        eprintln!("failed: {}: {}", f.source_path.display(), f.error);
    }
    let Some(manifest) = &report.manifest else {
        return Err(Error::Dataset(format!(
            "none of {} source files converted; see {}",
            source_manifest.len(),
            rd.conversion_path().display()
        )));
    };
    manifest.save(&rd.manifest_path())?;
    println!(
        "converted {} of {} source files into {} records ({} failed)",
        source_manifest.len() - report.failures.len(),
        source_manifest.len(),
        manifest.len(),
        report.failures.len()
    );
    Ok(if report.failures.is_empty() {
        Outcome::Success
    } else {
        Outcome::Partial
    })
}

fn outliers(cfg: &RunConfig, rd: &RunDir, manifest: &Manifest, dataset: &Dataset) -> Result<OutlierReport> {
    let report = detect_outliers(manifest, dataset, &cfg.isoforest, seed::derive(cfg.seed, "isoforest", 0))?;
    save_report(&report, &rd.scores_path(), &rd.kept_manifest_path())?;
    println!(
        "flagged {} of {} records; {} kept",
        report.flagged.len(),
        manifest.len(),
        report.kept_manifest.len()
    );
    Ok(report)
}

/// Kept indices from a stored outlier table, checked against `manifest`.
fn stored_kept(rd: &RunDir, manifest: &Manifest) -> Result<Option<Vec<usize>>> {
    let path = rd.scores_path();
    if !path.exists() || !rd.kept_manifest_path().exists() {
        return Ok(None);
    }
    let (ids, _, flagged) = OutlierReport::read_csv(&path)?;
    let expected: Vec<String> = manifest.records.iter().map(|r| r.record_id()).collect();
    if ids != expected {
        log::warn!("{} does not match the manifest; rescoring", path.display());
        return Ok(None);
    }
    Ok(Some((0..ids.len()).filter(|i| flagged.binary_search(i).is_err()).collect()))
}

fn run(cfg: &RunConfig, rd: &RunDir) -> Result<Outcome> {
    let mut outcome = Outcome::Success;
    if !rd.manifest_path().exists() {
        outcome = outcome.and(convert(cfg, rd)?);
    }
    let manifest = load_manifest(rd)?;
    let dataset = assemble_dataset(&manifest)?;
    let kept = match stored_kept(rd, &manifest)? {
        Some(k) => k,
        None => outliers(cfg, rd, &manifest, &dataset)?.kept_indices(),
    };
    let report = run_experiment(&cfg.experiment(), &dataset, Some(&kept), cfg.snapshot(), Some(rd.path()))?;
    render(&report, rd)?;
    println!("report hash {}", report.determinism_hash()?);
    Ok(outcome.and(outcome_of(&report)))
}

fn outcome_of(report: &ComparisonReport) -> Outcome {
    if report.cells.iter().any(|c| c.status == CellStatus::Failed) {
        Outcome::Partial
    } else {
        Outcome::Success
    }
}

fn render(report: &ComparisonReport, rd: &RunDir) -> Result<()> {
    report.save(rd.path())?;
    if report.cells.iter().any(|c| c.status == CellStatus::Complete) {
        emit_plot_data(report, rd.path())?;
    } else {
        log::warn!("no complete cells; plot not written");
    }
    print_summary(report, rd.path());
    Ok(())
}

fn print_summary(report: &ComparisonReport, dir: &Path) {
    println!(
        "{:<12} {:<17} {:<9} {:>10} {:>9} {:>9} {:>8} {:>10}",
        "backbone", "phase", "status", "MSE", "RMSE", "MAE", "MAPE", "time (s)"
    );
    for c in &report.cells {
        match &c.mean {
            Some(m) => println!(
                "{:<12} {:<17} {:<9} {:>10.4} {:>9.4} {:>9.4} {:>8.4} {:>10.1}",
                c.backbone,
                c.phase.as_str(),
                c.status.to_string(),
                m.mse,
                m.rmse,
                m.mae,
                m.mape,
                m.training_time_seconds
            ),
            None => println!(
                "{:<12} {:<17} {:<9} {}",
                c.backbone,
                c.phase.as_str(),
                c.status.to_string(),
                c.diagnostic.as_deref().unwrap_or("")
            ),
        }
    }
    println!("results in {}", dir.display());
}
