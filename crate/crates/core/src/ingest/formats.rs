//! Readers that load every supported source into a [`Volume`] of real
//! intensities laid out `[z][y][x][channel]`.

use std::path::Path;

use super::SourceFormat;
use crate::error::{Error, Result};

/// Real-valued intensities, `depth` planes of `rows`×`cols` with `channels`
/// samples each. A single 2D image has `depth == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(depth: usize, rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if depth * rows * cols * channels != data.len() || depth * rows * cols == 0 {
            return Err(Error::Shape {
                expected: format!("{depth}x{rows}x{cols}x{channels} (non-empty)"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Volume {
            depth,
            rows,
            cols,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((z * self.rows + y) * self.cols + x) * self.channels + c]
    }

    pub fn is_planar(&self) -> bool {
        self.depth == 1
    }
}

pub fn read_volume(path: &Path, format: SourceFormat) -> Result<Volume> {
    match format {
        SourceFormat::Png => read_png(path),
        SourceFormat::Dicom => read_dicom(path),
        SourceFormat::Minc => read_minc(path),
    }
}

fn read_png(path: &Path) -> Result<Volume> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb32f();
        Volume::new(1, h, w, 3, rgb.into_raw().into_iter().map(f64::from).collect())
    } else {
        let l = img.to_luma32f();
        Volume::new(1, h, w, 1, l.into_raw().into_iter().map(f64::from).collect())
    }
}

fn read_dicom(path: &Path) -> Result<Volume> {
    use dicom_pixeldata::{PhotometricInterpretation, PixelDecoder};

    let obj = dicom_object::open_file(path).map_err(|e| Error::image(path, e))?;
    let pixels = obj.decode_pixel_data().map_err(|e| Error::image(path, e))?;
    let rows = pixels.rows() as usize;
    let cols = pixels.columns() as usize;
    let frames = pixels.number_of_frames() as usize;
    let spp = pixels.samples_per_pixel() as usize;
    // modality LUT (rescale slope/intercept) applied, sample-major layout
    let mut data: Vec<f64> = pixels.to_vec().map_err(|e| Error::image(path, e))?;
    if matches!(pixels.photometric_interpretation(), PhotometricInterpretation::Monochrome1) {
        data.iter_mut().for_each(|v| *v = -*v);
    }
    let channels = match spp {
        1 => 1,
        3 => 3,
        n => return Err(Error::image(path, format!("unsupported samples per pixel: {n}"))),
    };
    Volume::new(frames.max(1), rows, cols, channels, data).map_err(|e| Error::image(path, e))
}

fn read_minc(path: &Path) -> Result<Volume> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        std::fs::File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .map_err(|e| Error::image(path, e))?;
    }
    if &magic[..3] == b"CDF" {
        read_minc1(path)
    } else {
        read_minc2(path)
    }
}

/// Voxel data in file order plus the metadata needed to map it to real values.
struct RawMinc {
    dim_names: Vec<String>,
    dim_sizes: Vec<usize>,
    voxels: Vec<f64>,
    is_float: bool,
    valid_range: Option<(f64, f64)>,
    /// Per-slice real range; `slice_dims` leading image dims index it.
    image_min: Option<Vec<f64>>,
    image_max: Option<Vec<f64>>,
    slice_dims: usize,
}

fn read_minc1(path: &Path) -> Result<Volume> {
    use netcdf3::{DataType, DataVector, FileReader};

    let bad = |e: String| Error::image(path, format!("MINC1: {e}"));
    let mut reader = FileReader::open(path).map_err(|e| bad(format!("{e:?}")))?;
    let (dim_names, dim_sizes, unsigned, attr_range, min_dims, max_dims) = {
        let ds = reader.data_set();
        let var = ds.get_var("image").ok_or_else(|| bad("no image variable".into()))?;
        let unsigned = ds
            .get_var_attr_as_string("image", "signtype")
            .map(|s| s.trim_end_matches('\0').trim().starts_with("unsigned"))
            .unwrap_or(matches!(var.data_type(), DataType::I8));
        (
            var.dim_names(),
            var.get_dims().iter().map(|d| d.size()).collect::<Vec<usize>>(),
            unsigned,
            attr_f64_pair(ds, "image", "valid_range"),
            ds.get_var("image-min").map(|v| v.num_dims()),
            ds.get_var("image-max").map(|v| v.num_dims()),
        )
    };

    let data = reader.read_var("image").map_err(|e| bad(format!("{e:?}")))?;
    let (voxels, is_float, default_range): (Vec<f64>, bool, Option<(f64, f64)>) = match data {
        DataVector::I8(v) if unsigned => (v.iter().map(|&x| x as u8 as f64).collect(), false, Some((0.0, 255.0))),
        DataVector::I8(v) => (v.iter().map(|&x| x as f64).collect(), false, Some((-128.0, 127.0))),
        DataVector::U8(v) => (v.iter().map(|&x| x as f64).collect(), false, Some((0.0, 255.0))),
        DataVector::I16(v) if unsigned => (v.iter().map(|&x| x as u16 as f64).collect(), false, Some((0.0, 65535.0))),
        DataVector::I16(v) => (v.iter().map(|&x| x as f64).collect(), false, Some((-32768.0, 32767.0))),
        DataVector::I32(v) if unsigned => (
            v.iter().map(|&x| x as u32 as f64).collect(),
            false,
            Some((0.0, u32::MAX as f64)),
        ),
        DataVector::I32(v) => (
            v.iter().map(|&x| x as f64).collect(),
            false,
            Some((i32::MIN as f64, i32::MAX as f64)),
        ),
        DataVector::F32(v) => (v.iter().map(|&x| x as f64).collect(), true, None),
        DataVector::F64(v) => (v, true, None),
    };
    let valid_range = attr_range.or(default_range);

    let read_real = |reader: &mut FileReader, name: &str, dims: Option<usize>| -> Result<Option<(Vec<f64>, usize)>> {
        let Some(n_dims) = dims else {
            return Ok(None);
        };
        let vals = match reader.read_var(name).map_err(|e| bad(format!("{e:?}")))? {
            DataVector::F64(v) => v,
            DataVector::F32(v) => v.into_iter().map(f64::from).collect(),
            DataVector::I32(v) => v.into_iter().map(f64::from).collect(),
            DataVector::I16(v) => v.into_iter().map(f64::from).collect(),
            DataVector::I8(v) => v.into_iter().map(f64::from).collect(),
            DataVector::U8(v) => v.into_iter().map(f64::from).collect(),
        };
        Ok(Some((vals, n_dims)))
    };
    let imin = read_real(&mut reader, "image-min", min_dims)?;
    let imax = read_real(&mut reader, "image-max", max_dims)?;
    let slice_dims = imin.as_ref().map(|(_, n)| *n).unwrap_or(0);

    finish_minc(
        path,
        RawMinc {
            dim_names,
            dim_sizes,
            voxels,
            is_float,
            valid_range,
            image_min: imin.map(|(v, _)| v),
            image_max: imax.map(|(v, _)| v),
            slice_dims,
        },
    )
}

fn attr_f64_pair(ds: &netcdf3::DataSet, var: &str, attr: &str) -> Option<(f64, f64)> {
    let a = ds.get_var_attr(var, attr)?;
    let vals: Vec<f64> = if let Some(v) = a.get_f64() {
        v.to_vec()
    } else if let Some(v) = a.get_f32() {
        v.iter().map(|&x| x as f64).collect()
    } else if let Some(v) = a.get_i32() {
        v.iter().map(|&x| x as f64).collect()
    } else if let Some(v) = a.get_i16() {
        v.iter().map(|&x| x as f64).collect()
    } else {
        return None;
    };
    (vals.len() == 2).then(|| (vals[0], vals[1]))
}

#[cfg(feature = "minc2")]
fn read_minc2(path: &Path) -> Result<Volume> {
    use hdf5_metno as h5;

    let bad = |e: String| Error::image(path, format!("MINC2: {e}"));
    let file = h5::File::open(path).map_err(|e| bad(e.to_string()))?;
    let image = file
        .dataset("/minc-2.0/image/0/image")
        .map_err(|e| bad(e.to_string()))?;
    let dim_sizes = image.shape();
    let dim_names = match image.attr("dimorder") {
        Ok(a) => read_string_attr(&a).map_err(|e| bad(e.to_string()))?,
        Err(_) => default_dim_names(dim_sizes.len()).join(","),
    };
    let dim_names: Vec<String> = dim_names
        .trim_end_matches('\0')
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let dtype = image.dtype().map_err(|e| bad(e.to_string()))?;
    let is_float = matches!(
        dtype.to_descriptor().map_err(|e| bad(e.to_string()))?,
        h5::types::TypeDescriptor::Float(_)
    );
    let voxels: Vec<f64> = image.read_raw::<f64>().map_err(|e| bad(e.to_string()))?;
    let valid_range = image
        .attr("valid_range")
        .ok()
        .and_then(|a| a.read_raw::<f64>().ok())
        .filter(|v| v.len() == 2)
        .map(|v| (v[0], v[1]))
        .or_else(|| {
            use h5::types::{IntSize, TypeDescriptor::*};
            match dtype.to_descriptor().ok()? {
                Unsigned(IntSize::U1) => Some((0.0, 255.0)),
                Integer(IntSize::U1) => Some((-128.0, 127.0)),
                Unsigned(IntSize::U2) => Some((0.0, 65535.0)),
                Integer(IntSize::U2) => Some((-32768.0, 32767.0)),
                Unsigned(IntSize::U4) => Some((0.0, u32::MAX as f64)),
                Integer(IntSize::U4) => Some((i32::MIN as f64, i32::MAX as f64)),
                _ => None,
            }
        });
    let read_real = |name: &str| -> Option<(Vec<f64>, usize)> {
        let ds = file.dataset(&format!("/minc-2.0/image/0/{name}")).ok()?;
        let n = ds.ndim();
        Some((ds.read_raw::<f64>().ok()?, n))
    };
    let imin = read_real("image-min");
    let imax = read_real("image-max");
    let slice_dims = imin.as_ref().map(|(_, n)| *n).unwrap_or(0);
    finish_minc(
        path,
        RawMinc {
            dim_names,
            dim_sizes,
            voxels,
            is_float,
            valid_range,
            image_min: imin.map(|(v, _)| v),
            image_max: imax.map(|(v, _)| v),
            slice_dims,
        },
    )
}

#[cfg(feature = "minc2")]
fn read_string_attr(attr: &hdf5_metno::Attribute) -> hdf5_metno::Result<String> {
    use hdf5_metno::types::{FixedAscii, TypeDescriptor, VarLenAscii, VarLenUnicode};
    match attr.dtype()?.to_descriptor()? {
        TypeDescriptor::VarLenAscii => Ok(attr.read_scalar::<VarLenAscii>()?.as_str().to_string()),
        TypeDescriptor::VarLenUnicode => Ok(attr.read_scalar::<VarLenUnicode>()?.as_str().to_string()),
        _ => Ok(attr.read_scalar::<FixedAscii<256>>()?.as_str().to_string()),
    }
}

#[cfg(not(feature = "minc2"))]
fn read_minc2(path: &Path) -> Result<Volume> {
    Err(Error::image(
        path,
        "MINC2 (HDF5) input needs the `minc2` cargo feature; rebuild with default features",
    ))
}

fn default_dim_names(n: usize) -> Vec<&'static str> {
    ["zspace", "yspace", "xspace"][3 - n.min(3)..].to_vec()
}

/// Applies voxel→real scaling and reorders axes to `(z, y, x)`.
fn finish_minc(path: &Path, raw: RawMinc) -> Result<Volume> {
    let RawMinc {
        dim_names,
        dim_sizes,
        mut voxels,
        is_float,
        valid_range,
        image_min,
        image_max,
        slice_dims,
    } = raw;
    let bad = |e: String| Error::image(path, format!("MINC: {e}"));
    let n_dims = dim_sizes.len();
    if !(2..=3).contains(&n_dims) {
        return Err(bad(format!("expected 2 or 3 image dimensions, found {n_dims}")));
    }

    if let (false, Some((vmin, vmax)), Some(imin), Some(imax)) = (is_float, valid_range, &image_min, &image_max) {
        let inner: usize = dim_sizes[slice_dims.min(n_dims)..].iter().product();
        let span = vmax - vmin;
        if span != 0.0 && imin.len() == imax.len() && !imin.is_empty() {
            for (i, v) in voxels.iter_mut().enumerate() {
                let s = (i / inner).min(imin.len() - 1);
                *v = (*v - vmin) / span * (imax[s] - imin[s]) + imin[s];
            }
        }
    }

    // map file axes onto z, y, x
    let names: Vec<&str> = if dim_names.len() == n_dims && dim_names.iter().all(|n| n.ends_with("space")) {
        dim_names.iter().map(String::as_str).collect()
    } else {
        default_dim_names(n_dims)
    };
    let pos = |axis: &str| names.iter().position(|n| *n == axis);
    let (zi, yi, xi) = match n_dims {
        3 => match (pos("zspace"), pos("yspace"), pos("xspace")) {
            (Some(z), Some(y), Some(x)) => (Some(z), y, x),
            _ => (Some(0), 1, 2),
        },
        _ => {
            // a 2D image: treat its two axes as (rows, cols) in file order
            (None, 0, 1)
        }
    };
    let depth = zi.map(|z| dim_sizes[z]).unwrap_or(1);
    let (rows, cols) = (dim_sizes[yi], dim_sizes[xi]);
    let mut strides = vec![0usize; n_dims];
    let mut acc = 1;
    for d in (0..n_dims).rev() {
        strides[d] = acc;
        acc *= dim_sizes[d];
    }
    let mut data = Vec::with_capacity(voxels.len());
    for z in 0..depth {
        for y in 0..rows {
            for x in 0..cols {
                let idx = zi.map(|zi| z * strides[zi]).unwrap_or(0) + y * strides[yi] + x * strides[xi];
                data.push(voxels[idx]);
            }
        }
    }
    Volume::new(depth, rows, cols, 1, data)
}
