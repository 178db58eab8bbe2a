//! Converted rasters → normalised tensors and age targets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Manifest;

pub const SIDE: usize = 224;
pub const CHANNELS: usize = 3;
pub const TENSOR_LEN: usize = SIDE * SIDE * CHANNELS;

/// A 224×224×3 image with values in `[0,1]`, stored row-major with
/// interleaved channels (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    pub source: PathBuf,
}

impl ImageTensor {
    pub fn new(data: Vec<f32>, source: impl Into<PathBuf>) -> Result<Self> {
        if data.len() != TENSOR_LEN {
            return Err(Error::Shape {
                expected: format!("{SIDE}x{SIDE}x{CHANNELS}"),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("tensor value {v} outside [0,1]")));
        }
        Ok(ImageTensor {
            data,
            source: source.into(),
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * SIDE + col) * CHANNELS + channel]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / TENSOR_LEN as f64
    }
}

/// Divides 8-bit values by 255.
pub fn normalize(raw: &[u8]) -> Result<ImageTensor> {
    normalize_from(raw, PathBuf::new())
}

fn normalize_from(raw: &[u8], source: PathBuf) -> Result<ImageTensor> {
    if raw.len() != TENSOR_LEN {
        return Err(Error::Shape {
            expected: format!("{SIDE}x{SIDE}x{CHANNELS} bytes"),
            actual: format!("{} bytes", raw.len()),
        });
    }
    Ok(ImageTensor {
        data: raw.iter().map(|&b| b as f32 / 255.0).collect(),
        source,
    })
}

/// Inverse of [`normalize`] for values on the `k/255` grid.
pub fn denormalize(t: &ImageTensor) -> Vec<u8> {
    t.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
}

/// Loads a converted file, requiring exactly 224×224 8-bit RGB.
pub fn load_converted(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if img.width() as usize != SIDE || img.height() as usize != SIDE {
        return Err(Error::Shape {
            expected: format!("{SIDE}x{SIDE} image at {}", path.display()),
            actual: format!("{}x{}", img.width(), img.height()),
        });
    }
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::image(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    normalize_from(rgb.as_raw(), path.to_path_buf())
}

/// Inputs, age targets and identifiers in manifest order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub inputs: Vec<ImageTensor>,
    pub targets: Vec<f64>,
    pub ids: Vec<String>,
    /// Subject of each record; used for grouped fold assignment.
    pub subjects: Vec<String>,
}

impl Dataset {
    pub fn new(inputs: Vec<ImageTensor>, targets: Vec<f64>, ids: Vec<String>, subjects: Vec<String>) -> Result<Self> {
        let n = inputs.len();
        if targets.len() != n || ids.len() != n || subjects.len() != n {
            return Err(Error::Dataset(format!(
                "length mismatch: {n} inputs, {} targets, {} ids, {} subjects",
                targets.len(),
                ids.len(),
                subjects.len()
            )));
        }
        Ok(Dataset {
            inputs,
            targets,
            ids,
            subjects,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Copy of the rows at `indices`, in the order given.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

/// Loads every converted file of `manifest` (in parallel, order preserved).
pub fn assemble_dataset(manifest: &Manifest) -> Result<Dataset> {
    if manifest.is_empty() {
        return Err(Error::Dataset("empty manifest".into()));
    }
    let inputs = manifest
        .records
        .par_iter()
        .map(|r| {
            let path = r
                .converted_path
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("{} has not been converted", r.record_id())))?;
            if !path.exists() {
                return Err(Error::Dataset(format!(
                    "converted file for {} missing: {}",
                    r.record_id(),
                    path.display()
                )));
            }
            load_converted(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        inputs,
        manifest.records.iter().map(|r| r.age_years).collect(),
        manifest.records.iter().map(|r| r.record_id()).collect(),
        manifest.records.iter().map(|r| r.subject_id.clone()).collect(),
    )
}
