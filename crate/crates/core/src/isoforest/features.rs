use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{ImageTensor, CHANNELS, SIDE};

/// Default feature grid side; `DEFAULT_GRID²` = 1024 features.
pub const DEFAULT_GRID: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub record_id: String,
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Side of the square grid for a feature dimension, if it is a perfect square
/// no larger than the image.
pub fn grid_side(feature_dim: usize) -> Result<usize> {
    let side = (feature_dim as f64).sqrt().round() as usize;
    if side == 0 || side * side != feature_dim || side > SIDE {
        return Err(Error::invalid(format!(
            "feature_dim {feature_dim} must be a perfect square between 1 and {}",
            SIDE * SIDE
        )));
    }
    Ok(side)
}

/// Area-averaging weights mapping `n_in` source cells onto `n_out` target
/// cells: `(first_source_index, weights)` per target cell, weights summing to 1.
fn area_weights(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let w = (first..last)
                .map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    overlap / scale
                })
                .collect();
            (first, w)
        })
        .collect()
}

/// Channel-mean grayscale, area-averaged down to `grid`×`grid`, flattened
/// row-major.
pub fn extract_features_with(image: &ImageTensor, grid: usize, record_id: impl Into<String>) -> Result<FeatureVector> {
    if grid == 0 || grid > SIDE {
        return Err(Error::invalid(format!("feature grid {grid} must be in 1..={SIDE}")));
    }
    let data = image.data();
    let gray: Vec<f64> = data
        .chunks_exact(CHANNELS)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / CHANNELS as f64)
        .collect();
    let weights = area_weights(SIDE, grid);

    // columns first, then rows
    let mut cols_done = vec![0.0; SIDE * grid];
    for r in 0..SIDE {
        let row = &gray[r * SIDE..(r + 1) * SIDE];
        for (j, (first, w)) in weights.iter().enumerate() {
            cols_done[r * grid + j] = w.iter().enumerate().map(|(k, wk)| wk * row[first + k]).sum();
        }
    }
    let mut values = vec![0.0; grid * grid];
    for (i, (first, w)) in weights.iter().enumerate() {
        for j in 0..grid {
            values[i * grid + j] = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * cols_done[(first + k) * grid + j])
                .sum();
        }
    }
    Ok(FeatureVector {
        values,
        record_id: record_id.into(),
    })
}

/// [`extract_features_with`] at the default 32×32 grid (d = 1024).
pub fn extract_features(image: &ImageTensor) -> FeatureVector {
    let id = image.source.display().to_string();
    extract_features_with(image, DEFAULT_GRID, id).expect("default grid is valid")
}
