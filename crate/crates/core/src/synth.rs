//! Synthetic brightness-to-age data for demos and tests.
//!
//! Structured images are a shaded grayscale disc on a near-black background,
//! loosely resembling an axial brain slice; their label is
//! `20 + 50·(mean brightness)`. Corrupted images are per-channel uniform
//! noise with an unrelated random age.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::preprocess::{normalize, Dataset, CHANNELS, SIDE, TENSOR_LEN};
use crate::seed;

pub const AGE_INTERCEPT: f64 = 20.0;
pub const AGE_SLOPE: f64 = 50.0;

/// `20 + 50·b` for mean brightness `b ∈ [0,1]`.
pub fn brightness_age(mean_brightness: f64) -> f64 {
    AGE_INTERCEPT + AGE_SLOPE * mean_brightness
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub structured: usize,
    pub noise: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            structured: 95,
            noise: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    /// 224×224×3 RGB bytes.
    pub pixels: Vec<u8>,
    pub age_years: f64,
    pub is_noise: bool,
}

/// Shaded disc whose level is drawn so mean brightness spans roughly 0.05–0.75.
pub fn structured_image(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let level: f32 = rng.random_range(0.08..1.0);
    let cx = SIDE as f32 / 2.0 + rng.random_range(-8.0..8.0);
    let cy = SIDE as f32 / 2.0 + rng.random_range(-8.0..8.0);
    let radius: f32 = rng.random_range(96.0..110.0);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let background: f32 = rng.random_range(0.0..0.04);
    let mut px = vec![0u8; TENSOR_LEN];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = (x as f32 - cx) / radius;
            let dy = (y as f32 - cy) / radius;
            let r = (dx * dx + dy * dy).sqrt();
            let v = if r < 1.0 {
                // brighter rim-to-centre falloff plus a gentle linear tilt
                let shade = 1.0 - 0.35 * r * r + 0.12 * (dx * gx + dy * gy);
                level * shade
            } else {
                background
            };
            let v = (v + rng.random_range(-0.015..0.015)).clamp(0.0, 1.0);
            let b = (v * 255.0).round() as u8;
            px[(y * SIDE + x) * CHANNELS..][..CHANNELS].fill(b);
        }
    }
    px
}

pub fn noise_image(rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..TENSOR_LEN).map(|_| rng.random()).collect()
}

fn mean_brightness(px: &[u8]) -> f64 {
    px.iter().map(|&b| b as f64).sum::<f64>() / (255.0 * px.len() as f64)
}

/// Generates `structured + noise` images. Image `i` uses its own random
/// stream; noise images are spread evenly through the sequence.
pub fn generate(config: &SynthConfig) -> Vec<SynthImage> {
    let n = config.structured + config.noise;
    let noise_at: Vec<bool> = (0..n)
        .map(|i| config.noise > 0 && (i * config.noise) / n != ((i + 1) * config.noise) / n)
        .collect();
    noise_at
        .into_par_iter()
        .enumerate()
        .map(|(i, is_noise)| {
            let mut rng = seed::rng(seed::derive(config.seed, "synth", i as u64));
            if is_noise {
                let pixels = noise_image(&mut rng);
                let age_years = rng.random_range(AGE_INTERCEPT..AGE_INTERCEPT + AGE_SLOPE);
                SynthImage {
                    pixels,
                    age_years,
                    is_noise,
                }
            } else {
                let pixels = structured_image(&mut rng);
                let age_years = brightness_age(mean_brightness(&pixels));
                SynthImage {
                    pixels,
                    age_years,
                    is_noise,
                }
            }
        })
        .collect()
}

/// In-memory dataset plus the planted-noise mask.
pub fn dataset(config: &SynthConfig) -> Result<(Dataset, Vec<bool>)> {
    let images = generate(config);
    let mut inputs = Vec::with_capacity(images.len());
    let mut targets = Vec::with_capacity(images.len());
    let mut noise = Vec::with_capacity(images.len());
    for img in images {
        inputs.push(normalize(&img.pixels)?);
        targets.push(img.age_years);
        noise.push(img.is_noise);
    }
    let ids: Vec<String> = (0..inputs.len()).map(|i| format!("synth_{i:05}")).collect();
    Ok((Dataset::new(inputs, targets, ids.clone(), ids)?, noise))
}

/// Writes `images/synth_XXXXX.png` plus `labels.csv` and `planted_noise.txt`
/// under `dir`, ready for the convert stage. Returns the label file path.
pub fn write_source_tree(dir: &Path, config: &SynthConfig) -> Result<PathBuf> {
    let images = generate(config);
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).at(&img_dir)?;
    images.par_iter().enumerate().try_for_each(|(i, img)| {
        let path = img_dir.join(format!("synth_{i:05}.png"));
        image::save_buffer(&path, &img.pixels, SIDE as u32, SIDE as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::image(&path, e))
    })?;
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    w.write_record(["source_path", "subject_id", "age_years", "sex"])?;
    for (i, img) in images.iter().enumerate() {
        w.write_record([
            format!("images/synth_{i:05}.png"),
            format!("synth_{i:05}"),
            format!("{:.6}", img.age_years),
            "U".to_string(),
        ])?;
    }
    w.flush().at(&labels)?;
    let noise_path = dir.join("planted_noise.txt");
    let mut f = fs::File::create(&noise_path).at(&noise_path)?;
    for (i, img) in images.iter().enumerate() {
        if img.is_noise {
            writeln!(f, "images/synth_{i:05}.png").at(&noise_path)?;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_brightness() {
        let cfg = SynthConfig {
            structured: 6,
            noise: 2,
            seed: 1,
        };
        let imgs = generate(&cfg);
        assert_eq!(imgs.len(), 8);
        assert_eq!(imgs.iter().filter(|i| i.is_noise).count(), 2);
        for img in imgs.iter().filter(|i| !i.is_noise) {
            let expected = 20.0 + 50.0 * mean_brightness(&img.pixels);
            assert!((img.age_years - expected).abs() < 1e-12);
            assert!((20.0..=70.0).contains(&img.age_years));
        }
        assert_eq!(imgs, generate(&cfg));
    }

    #[test]
    fn noise_spread_evenly() {
        let cfg = SynthConfig {
            structured: 95,
            noise: 5,
            seed: 0,
        };
        let idx: Vec<usize> = generate(&cfg)
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_noise)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(idx, vec![19, 39, 59, 79, 99]);
    }

    #[test]
    fn dataset_targets_match_tensor_means() {
        let (ds, noise) = dataset(&SynthConfig {
            structured: 3,
            noise: 0,
            seed: 2,
        })
        .unwrap();
        assert_eq!(noise, vec![false; 3]);
        for (x, t) in ds.inputs.iter().zip(&ds.targets) {
            assert!((brightness_age(x.mean()) - t).abs() < 1e-5);
        }
    }
}
