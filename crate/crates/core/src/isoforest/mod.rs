//! Isolation-forest outlier removal.
//!
//! Images are reduced to small grayscale feature vectors
//! ([`extract_features`]), an isolation forest is fitted on them ([`fit`]),
//! and the `⌊contamination·N⌋` highest-scoring records are dropped
//! ([`flag_outliers`]).

mod features;
mod forest;
mod tree;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::Manifest;
use crate::preprocess::Dataset;

pub use features::{extract_features, extract_features_with, grid_side, FeatureVector, DEFAULT_GRID};
pub use forest::{anomaly_score, fit, ForestParams, IsolationForestModel};
pub use tree::{avg_path_c, height_limit, IsolationTree, Node};

/// Removal fraction matching 114 of 2102 images.
pub const DEFAULT_CONTAMINATION: f64 = 114.0 / 2102.0;

/// `⌊contamination × n⌋`, robust to the product landing a hair below an integer.
pub fn flag_count(contamination: f64, n: usize) -> usize {
    let x = contamination * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Indices (ascending) of the `⌊contamination·N⌋` highest scores; ties go to
/// the lower index.
pub fn flag_outliers(scores: &[f64], contamination: f64) -> Result<Vec<usize>> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(Error::invalid(format!("contamination {contamination} must lie in (0, 1)")));
    }
    let m = flag_count(contamination, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flagged: Vec<usize> = order.into_iter().take(m).collect();
    flagged.sort_unstable();
    Ok(flagged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub record_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Ascending record indices.
    pub flagged: Vec<usize>,
    pub contamination: f64,
    pub kept_manifest: Manifest,
}

impl OutlierReport {
    pub fn new(manifest: &Manifest, scores: Vec<f64>, contamination: f64) -> Result<Self> {
        if scores.len() != manifest.len() {
            return Err(Error::Shape {
                expected: format!("{} scores", manifest.len()),
                actual: format!("{}", scores.len()),
            });
        }
        let flagged = flag_outliers(&scores, contamination)?;
        let kept: Vec<usize> = (0..manifest.len()).filter(|i| flagged.binary_search(i).is_err()).collect();
        Ok(OutlierReport {
            record_ids: manifest.records.iter().map(|r| r.record_id()).collect(),
            scores,
            flagged,
            contamination,
            kept_manifest: manifest.subset(&kept),
        })
    }

    /// Indices of the records that survive filtering.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.scores.len())
            .filter(|i| self.flagged.binary_search(i).is_err())
            .collect()
    }

    /// Writes `record_id,score,flagged` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["record_id", "score", "flagged"])?;
        for (i, (id, s)) in self.record_ids.iter().zip(&self.scores).enumerate() {
            let flagged = self.flagged.binary_search(&i).is_ok();
            w.write_record([id.as_str(), &format!("{s:.17}"), if flagged { "true" } else { "false" }])?;
        }
        w.flush().at(path)
    }

    /// Reads scores and flags back from [`write_csv`](Self::write_csv) output.
    pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<usize>)> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut ids, mut scores, mut flagged) = (Vec::new(), Vec::new(), Vec::new());
        for (i, row) in r.records().enumerate() {
            let row = row?;
            ids.push(row[0].to_string());
            scores.push(row[1].parse().map_err(|_| Error::invalid(format!("bad score on row {i}")))?);
            if &row[2] == "true" {
                flagged.push(i);
            }
        }
        Ok((ids, scores, flagged))
    }
}

/// Isolation-forest settings used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutlierConfig {
    pub n_trees: usize,
    pub subsample_size: usize,
    pub contamination: f64,
    pub feature_dim: usize,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            n_trees: 100,
            subsample_size: 256,
            contamination: DEFAULT_CONTAMINATION,
            feature_dim: DEFAULT_GRID * DEFAULT_GRID,
        }
    }
}

impl OutlierConfig {
    pub fn validate(&self) -> Result<()> {
        grid_side(self.feature_dim)?;
        if self.n_trees == 0 {
            return Err(Error::invalid("isoforest n_trees must be >= 1"));
        }
        if self.subsample_size < 2 {
            return Err(Error::invalid("isoforest subsample_size must be >= 2"));
        }
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return Err(Error::invalid(format!(
                "contamination {} must lie in (0, 1)",
                self.contamination
            )));
        }
        Ok(())
    }
}

/// Feature extraction, fit and scoring over a whole dataset.
pub fn score_dataset(dataset: &Dataset, config: &OutlierConfig, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let grid = grid_side(config.feature_dim)?;
    let features = dataset
        .inputs
        .par_iter()
        .zip(dataset.ids.par_iter())
        .map(|(img, id)| extract_features_with(img, grid, id.clone()))
        .collect::<Result<Vec<_>>>()?;
    let model = fit(
        &features,
        &ForestParams {
            n_trees: config.n_trees,
            subsample_size: config.subsample_size,
            seed,
        },
    )?;
    model.score_all(&features)
}

/// Scores `dataset` (which must mirror `manifest`) and builds the report.
pub fn detect_outliers(manifest: &Manifest, dataset: &Dataset, config: &OutlierConfig, seed: u64) -> Result<OutlierReport> {
    let scores = score_dataset(dataset, config, seed)?;
    OutlierReport::new(manifest, scores, config.contamination)
}

/// Writes the outlier table and kept manifest side by side.
pub fn save_report(report: &OutlierReport, csv_path: &Path, kept_manifest_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    report.write_csv(csv_path)?;
    report.kept_manifest.save(kept_manifest_path)
}
