//! Source discovery, label joining and conversion to uniform RGB rasters.
//!
//! A [`Manifest`] is the catalogue every later stage works from. It is built
//! by [`scan_source`] from a directory of MINC / DICOM / PNG files plus a label
//! table, and rewritten by [`convert_all`] once each source has been turned
//! into one or more 224×224 8-bit RGB PNG files.

mod convert;
mod formats;
mod labels;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub use convert::{convert_all, convert_image, ConversionFailure, ConversionReport, OUTPUT_SIDE};
pub use formats::{read_volume, Volume};
pub use labels::{read_label_table, LabelRow, LabelTable};

/// Ages outside this band are accepted but logged.
pub const EXPECTED_AGE_RANGE: (f64, f64) = (18.0, 80.0);
/// Hard validity bounds for `age_years`.
pub const VALID_AGE_RANGE: (f64, f64) = (0.0, 130.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SourceFormat {
    Minc,
    Dicom,
    Png,
}

impl SourceFormat {
    /// Identifies a file by magic bytes, falling back to the extension for
    /// files too short to carry a signature.
    pub fn detect(path: &Path) -> Result<Option<SourceFormat>> {
        let head = read_head(path, 132)?;
        let by_magic = sniff(&head);
        let by_ext = Self::from_extension(path);
        match (by_magic, by_ext) {
            (Some(m), _) => Ok(Some(m)),
            (None, Some(e)) => Ok(Some(e)),
            (None, None) => Ok(None),
        }
    }

    pub fn from_extension(path: &Path) -> Option<SourceFormat> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(SourceFormat::Png),
            "dcm" | "dicom" => Some(SourceFormat::Dicom),
            "mnc" => Some(SourceFormat::Minc),
            _ => None,
        }
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceFormat::Minc => "MINC",
            SourceFormat::Dicom => "DICOM",
            SourceFormat::Png => "PNG",
        })
    }
}

fn read_head(path: &Path, n: usize) -> Result<Vec<u8>> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(n);
    fs::File::open(path)
        .and_then(|f| f.take(n as u64).read_to_end(&mut buf))
        .at(path)?;
    Ok(buf)
}

fn sniff(head: &[u8]) -> Option<SourceFormat> {
    if head.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(SourceFormat::Png)
    } else if head.len() >= 132 && &head[128..132] == b"DICM" {
        Some(SourceFormat::Dicom)
    } else if head.starts_with(b"CDF\x01") || head.starts_with(b"CDF\x02") || head.starts_with(b"\x89HDF\r\n\x1a\n") {
        Some(SourceFormat::Minc)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl Sex {
    pub fn parse(raw: &str) -> Option<Sex> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Sex::M),
            "f" | "female" => Some(Sex::F),
            "" | "u" | "unknown" | "na" | "n/a" => Some(Sex::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    Middle,
    EveryK,
    All,
}

/// How a 3D volume is cut into 2D images. Single-plane sources always yield
/// exactly one image regardless of policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePolicy {
    pub mode: SliceMode,
    #[serde(default = "one")]
    pub k: usize,
    pub axis: Axis,
}

fn one() -> usize {
    1
}

impl Default for SlicePolicy {
    fn default() -> Self {
        SlicePolicy {
            mode: SliceMode::Middle,
            k: 1,
            axis: Axis::Axial,
        }
    }
}

impl SlicePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("slice policy k must be >= 1"));
        }
        Ok(())
    }

    /// Plane indices selected along an axis of length `n`.
    pub fn select(&self, n: usize) -> Vec<usize> {
        if n == 0 {
            return Vec::new();
        }
        match self.mode {
            SliceMode::Middle => vec![n / 2],
            SliceMode::EveryK => (0..n).step_by(self.k.max(1)).collect(),
            SliceMode::All => (0..n).collect(),
        }
    }
}

/// Identifies which plane of a volume a converted record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRef {
    pub axis: Axis,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub source_path: PathBuf,
    pub source_format: SourceFormat,
    #[serde(default)]
    pub converted_path: Option<PathBuf>,
    /// Set on records produced from one plane of a volume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<SliceRef>,
    pub subject_id: String,
    pub age_years: f64,
    #[serde(default)]
    pub sex: Sex,
}

impl ImageRecord {
    /// Stable identifier: the source path, suffixed with the plane for
    /// volume slices (`scan.mnc#axial:30`).
    pub fn record_id(&self) -> String {
        match self.slice {
            Some(s) => format!("{}#{}:{}", self.source_path.display(), s.axis, s.index),
            None => self.source_path.display().to_string(),
        }
    }

    fn sort_key(&self) -> (&Path, Option<SliceRef>) {
        (&self.source_path, self.slice)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = VALID_AGE_RANGE;
        if !self.age_years.is_finite() || self.age_years < lo || self.age_years > hi {
            return Err(Error::invalid(format!(
                "{}: age {} outside [{lo}, {hi}]",
                self.record_id(),
                self.age_years
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub created_at: DateTime<Utc>,
    pub source_root: PathBuf,
}

impl Manifest {
    /// Sorts and validates `records`.
    pub fn new(source_root: impl Into<PathBuf>, mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let manifest = Manifest {
            records,
            created_at: Utc::now(),
            source_root: source_root.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Dataset("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            r.validate()?;
            if !seen.insert(r.record_id()) {
                return Err(Error::invalid(format!("duplicate record {}", r.record_id())));
            }
            if i > 0 && self.records[i - 1].sort_key() > r.sort_key() {
                return Err(Error::invalid("manifest records are not sorted by source_path"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy keeping only the records at `keep` (ascending indices), timestamp preserved.
    pub fn subset(&self, keep: &[usize]) -> Manifest {
        Manifest {
            records: keep.iter().map(|&i| self.records[i].clone()).collect(),
            created_at: self.created_at,
            source_root: self.source_root.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").at(path)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).at(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Walks `root` for images and joins each one to its row in `labels`.
///
/// Label rows are matched by `source_path` (relative to `root`) when that
/// column is filled in; otherwise by `subject_id`, which must equal either
/// the first directory component under `root` or the file stem.
pub fn scan_source(root: &Path, labels: &Path) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::invalid(format!("source root {} is not a directory", root.display())));
    }
    let table = read_label_table(labels)?;
    let files = discover(root)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no MINC, DICOM or PNG images under {}", root.display())));
    }

    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(files.len());
    let mut used_rows = HashSet::new();
    for (rel, format) in files {
        match table.lookup(&rel) {
            Some((row_idx, row)) => {
                used_rows.insert(row_idx);
                records.push(ImageRecord {
                    source_path: rel,
                    source_format: format,
                    converted_path: None,
                    slice: None,
                    subject_id: row.subject_id.clone(),
                    age_years: row.age_years,
                    sex: row.sex,
                });
            }
            None => missing.push(rel.display().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingLabels(missing));
    }
    let unused = table.rows.len() - used_rows.len();
    if unused > 0 {
        log::warn!("{unused} label row(s) matched no discovered image");
    }
    let (lo, hi) = EXPECTED_AGE_RANGE;
    for r in &records {
        if r.age_years < lo || r.age_years > hi {
            log::warn!("{}: age {} outside the expected {lo}-{hi} band", r.record_id(), r.age_years);
        }
    }
    Manifest::new(root, records)
}

/// Relative paths of every recognised image under `root`, sorted.
fn discover(root: &Path) -> Result<Vec<(PathBuf, SourceFormat)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::invalid(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() || entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let path = entry.path();
        let format = match SourceFormat::detect(path)? {
            Some(f) => f,
            None => continue,
        };
        if let Some(ext_format) = SourceFormat::from_extension(path) {
            if ext_format != format {
                return Err(Error::image(
                    path,
                    format!("extension says {ext_format} but contents look like {format}"),
                ));
            }
        }
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        out.push((rel, format));
    }
    out.sort();
    Ok(out)
}
