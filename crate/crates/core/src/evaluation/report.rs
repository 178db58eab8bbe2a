use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::FoldMetrics;
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Every record of the manifest.
    BeforeFiltering,
    /// Records kept by the isolation forest.
    AfterFiltering,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::BeforeFiltering, Phase::AfterFiltering];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BeforeFiltering => "before_filtering",
            Phase::AfterFiltering => "after_filtering",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Failed,
    Skipped,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Complete => "complete",
            CellStatus::Failed => "failed",
            CellStatus::Skipped => "skipped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: FoldMetrics,
}

/// Outcome for one (backbone, phase) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub backbone: String,
    pub phase: Phase,
    pub status: CellStatus,
    /// Records the folds were drawn from.
    pub n_records: usize,
    pub folds: Vec<FoldRow>,
    /// Fold average; present iff `status` is complete.
    pub mean: Option<FoldMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl ReportCell {
    pub fn skipped(backbone: impl Into<String>, phase: Phase, reason: impl Into<String>) -> Self {
        ReportCell {
            backbone: backbone.into(),
            phase,
            status: CellStatus::Skipped,
            n_records: 0,
            folds: Vec::new(),
            mean: None,
            diagnostic: Some(reason.into()),
        }
    }
}

pub const PHASE_NOTE: &str = "before_filtering rows are trained and tested on the full dataset; \
after_filtering rows on the records kept by the isolation forest. Fold partitions differ between \
the two phases because the record counts differ.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub k_folds: usize,
    /// Resolved configuration the report was produced from.
    pub config: serde_json::Value,
    pub cells: Vec<ReportCell>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ComparisonReport {
    pub fn new(seed: u64, k_folds: usize, config: serde_json::Value) -> Self {
        ComparisonReport {
            seed,
            k_folds,
            config,
            cells: Vec::new(),
            notes: vec![PHASE_NOTE.to_string()],
        }
    }

    pub fn cell(&self, backbone: &str, phase: Phase) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.backbone == backbone && c.phase == phase)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).at(path)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).at(path)?)
    }

    /// One row per cell with the fold-averaged metrics; empty metric fields
    /// for cells that did not complete.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "backbone",
            "phase",
            "status",
            "n_records",
            "mse",
            "rmse",
            "mae",
            "mape",
            "training_time_seconds",
        ])?;
        for c in &self.cells {
            let mut rec = vec![
                c.backbone.clone(),
                c.phase.to_string(),
                c.status.to_string(),
                c.n_records.to_string(),
            ];
            match &c.mean {
                Some(m) => rec.extend(
                    [m.mse, m.rmse, m.mae, m.mape, m.training_time_seconds].map(|v| v.to_string()),
                ),
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// Per-fold rows of every cell.
    pub fn folds_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "backbone",
            "phase",
            "fold",
            "n_train",
            "n_test",
            "mse",
            "rmse",
            "mae",
            "mape",
            "training_time_seconds",
        ])?;
        for c in &self.cells {
            for f in &c.folds {
                let m = &f.metrics;
                let mut rec = vec![
                    c.backbone.clone(),
                    c.phase.to_string(),
                    f.fold.to_string(),
                    f.n_train.to_string(),
                    f.n_test.to_string(),
                ];
                rec.extend([m.mse, m.rmse, m.mae, m.mape, m.training_time_seconds].map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// SHA-256 of the JSON form with every training time zeroed, so two runs
    /// of the same configuration hash equal.
    pub fn determinism_hash(&self) -> Result<String> {
        let mut r = self.clone();
        for c in &mut r.cells {
            for f in &mut c.folds {
                f.metrics.training_time_seconds = 0.0;
            }
            if let Some(m) = &mut c.mean {
                m.training_time_seconds = 0.0;
            }
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&r)?)))
    }

    /// Writes `report.json`, `report.csv` and `report_folds.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.save_json(&dir.join("report.json"))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()?).at(&csv)?;
        let folds = dir.join("report_folds.csv");
        fs::write(&folds, self.folds_csv()?).at(&folds)
    }
}
