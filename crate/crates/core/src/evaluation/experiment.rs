use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::folds::{make_folds, make_grouped_folds, FoldSplit};
use super::metrics::{aggregate_folds, compute_metrics};
use super::report::{CellStatus, ComparisonReport, FoldRow, Phase, ReportCell};
use crate::error::{Error, IoContext, Result};
use crate::model::{build_model, train_subset, BackboneSpec, HeadConfig, TrainConfig};
use crate::preprocess::Dataset;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub backbones: Vec<BackboneSpec>,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub k_folds: usize,
    pub seed: u64,
    pub group_by_subject: bool,
}

impl ExperimentConfig {
    pub fn new(backbones: Vec<BackboneSpec>, seed: u64) -> Self {
        ExperimentConfig {
            backbones,
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            k_folds: 5,
            seed,
            group_by_subject: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbones.is_empty() {
            return Err(Error::invalid("no backbones configured"));
        }
        if self.k_folds < 2 {
            return Err(Error::invalid(format!("k_folds = {}: need at least 2", self.k_folds)));
        }
        self.head.validate()?;
        self.train.validate()
    }

    /// Model-initialisation and mini-batch seeds of fold `i`; shared by every
    /// backbone and phase.
    pub fn fold_seeds(&self, fold: usize) -> (u64, u64) {
        (
            seed::derive(self.seed, "fold_model", fold as u64),
            seed::derive(self.seed, "fold_train", fold as u64),
        )
    }
}

/// Everything needed to resume or audit one fold of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub backbone: String,
    pub phase: Phase,
    pub row: FoldRow,
    pub test_ids: Vec<String>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub history: Vec<f64>,
}

/// `<dir>/fold<i>/<backbone>_<phase>.json`
pub fn fold_path(dir: &Path, fold: usize, backbone: &str, phase: Phase) -> PathBuf {
    dir.join(format!("fold{fold}")).join(format!("{backbone}_{phase}.json"))
}

fn load_cached(path: &Path, expected_ids: &[String]) -> Option<FoldResult> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str::<FoldResult>(&text) {
        Ok(r) if r.test_ids == expected_ids => Some(r),
        Ok(_) => {
            log::warn!("{}: test set differs from the current split; recomputing", path.display());
            None
        }
        Err(e) => {
            log::warn!("{}: unreadable ({e}); recomputing", path.display());
            None
        }
    }
}

fn store(path: &Path, result: &FoldResult) -> Result<()> {
    let dir = path.parent().expect("fold file has a parent");
    fs::create_dir_all(dir).at(dir)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(result)?).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn run_fold(
    config: &ExperimentConfig,
    spec: &BackboneSpec,
    phase: Phase,
    dataset: &Dataset,
    rows: &[usize],
    split: &FoldSplit,
) -> Result<FoldResult> {
    let train_idx: Vec<usize> = split.train_indices.iter().map(|&i| rows[i]).collect();
    let test_idx: Vec<usize> = split.test_indices.iter().map(|&i| rows[i]).collect();
    let (model_seed, train_seed) = config.fold_seeds(split.fold_index);
    let model = build_model(spec, &config.head, model_seed)?;
    let train_cfg = TrainConfig {
        seed: train_seed,
        ..config.train
    };
    let trained = train_subset(model, dataset, &train_idx, &train_cfg)?;
    let inputs: Vec<_> = test_idx.iter().map(|&i| dataset.inputs[i].clone()).collect();
    let y_pred = trained.predict(&inputs)?;
    let y_true: Vec<f64> = test_idx.iter().map(|&i| dataset.targets[i]).collect();
    let metrics = compute_metrics(&y_true, &y_pred, trained.training_time_seconds)?;
    Ok(FoldResult {
        backbone: spec.name.to_string(),
        phase,
        row: FoldRow {
            fold: split.fold_index,
            n_train: train_idx.len(),
            n_test: test_idx.len(),
            metrics,
        },
        test_ids: test_idx.iter().map(|&i| dataset.ids[i].clone()).collect(),
        y_true,
        y_pred,
        history: trained.history,
    })
}

fn run_cell(
    config: &ExperimentConfig,
    spec: &BackboneSpec,
    phase: Phase,
    dataset: &Dataset,
    rows: &[usize],
    cache_dir: Option<&Path>,
) -> ReportCell {
    let backbone = spec.name.to_string();
    let mut cell = ReportCell {
        backbone: backbone.clone(),
        phase,
        status: CellStatus::Complete,
        n_records: rows.len(),
        folds: Vec::new(),
        mean: None,
        diagnostic: None,
    };
    let fail = |mut cell: ReportCell, msg: String| {
        log::error!("{backbone} {phase}: {msg}");
        cell.status = CellStatus::Failed;
        cell.diagnostic = Some(msg);
        cell
    };
    let splits = if config.group_by_subject {
        let groups: Vec<String> = rows.iter().map(|&i| dataset.subjects[i].clone()).collect();
        make_grouped_folds(&groups, config.k_folds, config.seed)
    } else {
        make_folds(rows.len(), config.k_folds, config.seed)
    };
    let splits = match splits {
        Ok(s) => s,
        Err(e) => return fail(cell, e.to_string()),
    };
    for split in &splits {
        let ids: Vec<String> = split.test_indices.iter().map(|&i| dataset.ids[rows[i]].clone()).collect();
        let path = cache_dir.map(|d| fold_path(d, split.fold_index, &backbone, phase));
        let cached = path.as_deref().and_then(|p| load_cached(p, &ids));
        let result = match cached {
            Some(r) => {
                log::info!("{backbone} {phase} fold {}: reusing stored result", split.fold_index);
                r
            }
            None => {
                log::info!(
                    "{backbone} {phase} fold {}: training on {} records",
                    split.fold_index,
                    split.train_indices.len()
                );
                match run_fold(config, spec, phase, dataset, rows, split) {
                    Ok(r) => {
                        if let Some(p) = &path {
                            if let Err(e) = store(p, &r) {
                                return fail(cell, format!("fold {}: {e}", split.fold_index));
                            }
                        }
                        r
                    }
                    Err(e) => return fail(cell, format!("fold {}: {e}", split.fold_index)),
                }
            }
        };
        log::info!(
            "{backbone} {phase} fold {}: MAE {:.4}",
            split.fold_index,
            result.row.metrics.mae
        );
        cell.folds.push(result.row);
    }
    let rows: Vec<_> = cell.folds.iter().map(|f| f.metrics).collect();
    match aggregate_folds(&rows) {
        Ok(m) => cell.mean = Some(m),
        Err(e) => return fail(cell, e.to_string()),
    }
    cell
}

/// Cross-validates every backbone on the full dataset and, when `kept` is
/// given, on the filtered subset. A cell whose training fails is reported as
/// failed and the remaining cells still run. With `cache_dir`, finished
/// folds are stored there and reused on the next call.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    kept: Option<&[usize]>,
    snapshot: serde_json::Value,
    cache_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if let Some(k) = kept {
        if let Some(&i) = k.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::invalid(format!("kept index {i} out of range")));
        }
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut report = ComparisonReport::new(config.seed, config.k_folds, snapshot);
    for spec in &config.backbones {
        for phase in Phase::ALL {
            let rows = match phase {
                Phase::BeforeFiltering => Some(&all[..]),
                Phase::AfterFiltering => kept,
            };
            let cell = match rows {
                Some(rows) => run_cell(config, spec, phase, dataset, rows, cache_dir),
                None => ReportCell::skipped(spec.name.to_string(), phase, "outlier filtering was not run"),
            };
            report.cells.push(cell);
        }
    }
    Ok(report)
}
