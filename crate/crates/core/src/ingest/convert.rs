use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::formats::{read_volume, Volume};
use super::{Axis, ImageRecord, Manifest, SlicePolicy, SliceRef};
use crate::error::{Error, IoContext, Result};

/// Side length of every converted image.
pub const OUTPUT_SIDE: u32 = 224;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionFailure {
    pub source_path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversionReport {
    /// Manifest of converted records; `None` when nothing converted.
    pub manifest: Option<Manifest>,
    pub failures: Vec<ConversionFailure>,
    pub warnings: Vec<String>,
}

impl ConversionReport {
    pub fn converted(&self) -> usize {
        self.manifest.as_ref().map_or(0, Manifest::len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let summary = serde_json::json!({
            "converted": self.converted(),
            "failures": self.failures,
            "warnings": self.warnings,
        });
        fs::write(path, serde_json::to_string_pretty(&summary)? + "\n").at(path)
    }
}

/// A 2D plane cut from a volume, still in source units.
struct Plane {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

fn extract_plane(vol: &Volume, axis: Axis, index: usize) -> Plane {
    let c = vol.channels;
    let (rows, cols) = match axis {
        Axis::Axial => (vol.rows, vol.cols),
        Axis::Coronal => (vol.depth, vol.cols),
        Axis::Sagittal => (vol.depth, vol.rows),
    };
    let mut data = Vec::with_capacity(rows * cols * c);
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                // superior at the top for the two vertical cuts
                let v = match axis {
                    Axis::Axial => vol.at(index, r, q, ch),
                    Axis::Coronal => vol.at(vol.depth - 1 - r, index, q, ch),
                    Axis::Sagittal => vol.at(vol.depth - 1 - r, q, index, ch),
                };
                data.push(v);
            }
        }
    }
    Plane {
        rows,
        cols,
        channels: c,
        data,
    }
}

fn axis_len(vol: &Volume, axis: Axis) -> usize {
    match axis {
        Axis::Axial => vol.depth,
        Axis::Coronal => vol.rows,
        Axis::Sagittal => vol.cols,
    }
}

/// Min–max rescale to [0,1], bilinear resize and 8-bit quantisation.
/// Returns the image and whether the plane was constant.
fn plane_to_rgb(plane: &Plane) -> (RgbImage, bool) {
    let (lo, hi) = plane
        .data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    let scaled: Vec<f32> = plane
        .data
        .iter()
        .map(|&v| {
            if degenerate || !v.is_finite() {
                0.0
            } else {
                ((v - lo) / (hi - lo)) as f32
            }
        })
        .collect();

    let (w, h) = (plane.cols as u32, plane.rows as u32);
    let needs_resize = (w, h) != (OUTPUT_SIDE, OUTPUT_SIDE);
    let rgb: Vec<f32> = if plane.channels == 1 {
        let img: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, scaled).expect("plane size");
        let img = if needs_resize {
            imageops::resize(&img, OUTPUT_SIDE, OUTPUT_SIDE, FilterType::Triangle)
        } else {
            img
        };
        img.into_raw().into_iter().flat_map(|v| [v, v, v]).collect()
    } else {
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w, h, scaled).expect("plane size");
        let img = if needs_resize {
            imageops::resize(&img, OUTPUT_SIDE, OUTPUT_SIDE, FilterType::Triangle)
        } else {
            img
        };
        img.into_raw()
    };
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (
        RgbImage::from_raw(OUTPUT_SIDE, OUTPUT_SIDE, bytes).expect("output size"),
        degenerate,
    )
}

fn output_name(record: &ImageRecord, slice: Option<SliceRef>) -> String {
    let mut name: String = record
        .source_path
        .to_string_lossy()
        .chars()
        .map(|c| match c {
            '/' | '\\' => '_',
            '.' => '_',
            c if c.is_alphanumeric() || c == '-' || c == '_' => c,
            _ => '-',
        })
        .collect();
    if let Some(s) = slice {
        name.push_str(&format!("_{}{:04}", s.axis, s.index));
    }
    name.push_str(".png");
    name
}

/// Converts one source record to one or more 224×224 RGB PNG files in
/// `out_dir`. Volumes yield one record per plane selected by `policy`;
/// single-plane sources yield exactly one record.
///
/// Returns the converted records and any warnings (constant planes).
pub fn convert_image(
    record: &ImageRecord,
    policy: &SlicePolicy,
    source_root: &Path,
    out_dir: &Path,
) -> Result<(Vec<ImageRecord>, Vec<String>)> {
    policy.validate()?;
    let src = source_root.join(&record.source_path);
    let vol = read_volume(&src, record.source_format)?;
    let planes: Vec<(Option<SliceRef>, Plane)> = if vol.is_planar() {
        vec![(None, extract_plane(&vol, Axis::Axial, 0))]
    } else {
        policy
            .select(axis_len(&vol, policy.axis))
            .into_iter()
            .map(|i| {
                let slice = SliceRef {
                    axis: policy.axis,
                    index: i,
                };
                (Some(slice), extract_plane(&vol, policy.axis, i))
            })
            .collect()
    };

    let mut out = Vec::with_capacity(planes.len());
    let mut warnings = Vec::new();
    for (slice, plane) in planes {
        let (img, degenerate) = plane_to_rgb(&plane);
        let path = out_dir.join(output_name(record, slice));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::image(&path, e))?;
        let mut converted = record.clone();
        converted.slice = slice;
        converted.converted_path = Some(path);
        if degenerate {
            warnings.push(format!("{}: constant intensity, written as all zeros", converted.record_id()));
        }
        out.push(converted);
    }
    Ok((out, warnings))
}

/// Converts every record of `manifest` in parallel. Per-record failures are
/// collected rather than aborting the run; output is identical to a serial
/// conversion.
pub fn convert_all(manifest: &Manifest, policy: &SlicePolicy, out_dir: &Path) -> Result<ConversionReport> {
    policy.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let results: Vec<_> = manifest
        .records
        .par_iter()
        .map(|r| (r, convert_image(r, policy, &manifest.source_root, out_dir)))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (r, res) in results {
        match res {
            Ok((recs, warns)) => {
                records.extend(recs);
                warnings.extend(warns);
            }
            Err(e) => {
                log::warn!("conversion failed for {}: {e}", r.source_path.display());
                failures.push(ConversionFailure {
                    source_path: r.source_path.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let manifest = if records.is_empty() {
        None
    } else {
        let mut m = Manifest::new(manifest.source_root.clone(), records)?;
        m.created_at = manifest.created_at;
        Some(m)
    };
    Ok(ConversionReport {
        manifest,
        failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Plane {
        let mut data = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Plane {
            rows,
            cols,
            channels: 1,
            data,
        }
    }

    #[test]
    fn native_size_grayscale_is_replicated_exactly() {
        let p = plane(224, 224, |r, c| ((r + c) % 256) as f64);
        let (img, degenerate) = plane_to_rgb(&p);
        assert!(!degenerate);
        for (i, px) in img.pixels().enumerate() {
            let (r, c) = (i / 224, i % 224);
            let expect = ((r + c) % 256) as u8;
            assert_eq!(px.0, [expect; 3]);
        }
    }

    #[test]
    fn constant_plane_goes_to_zero() {
        let (img, degenerate) = plane_to_rgb(&plane(10, 10, |_, _| 7.0));
        assert!(degenerate);
        assert!(img.as_raw().iter().all(|&v| v == 0));
        assert_eq!(img.dimensions(), (224, 224));
    }

    #[test]
    fn minmax_spans_full_range() {
        let (img, _) = plane_to_rgb(&plane(50, 60, |r, _| 1000.0 + r as f64));
        let raw = img.as_raw();
        assert_eq!(*raw.iter().min().unwrap(), 0);
        assert_eq!(*raw.iter().max().unwrap(), 255);
    }

    #[test]
    fn plane_orientation() {
        // depth 2, rows 3, cols 4, value = 100z + 10y + x
        let mut data = Vec::new();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    data.push((100 * z + 10 * y + x) as f64);
                }
            }
        }
        let vol = Volume::new(2, 3, 4, 1, data).unwrap();
        let ax = extract_plane(&vol, Axis::Axial, 1);
        assert_eq!((ax.rows, ax.cols), (3, 4));
        assert_eq!(ax.data[0], 100.0);
        let cor = extract_plane(&vol, Axis::Coronal, 2);
        assert_eq!((cor.rows, cor.cols), (2, 4));
        assert_eq!(cor.data[0], 120.0);
        let sag = extract_plane(&vol, Axis::Sagittal, 3);
        assert_eq!((sag.rows, sag.cols), (2, 3));
        assert_eq!(sag.data[1], 113.0);
    }
}
