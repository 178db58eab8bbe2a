//! Parameter persistence in safetensors format.
//!
//! Backbone tensors are named `{layer}/{kernel|bias|depthwise_kernel|
//! pointwise_kernel|gamma|beta|moving_mean|moving_variance}` with Keras
//! shapes (`kh, kw, in, out` for kernels), so an export of a Keras
//! application model loads without reshuffling.

use std::collections::HashMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};

use super::backbones::BackboneName;
use super::graph::Graph;
use crate::error::{Error, IoContext, Result};

pub const WEIGHTS_DIR_ENV: &str = "BRAINAGE_WEIGHTS_DIR";

/// `$BRAINAGE_WEIGHTS_DIR`, else `$XDG_CACHE_HOME/brainage/weights`, else
/// `~/.cache/brainage/weights`.
pub fn weights_dir() -> PathBuf {
    if let Some(dir) = env::var_os(WEIGHTS_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    let cache = env::var_os("XDG_CACHE_HOME")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
        .unwrap_or_else(|| PathBuf::from(".cache"));
    cache.join("brainage").join("weights")
}

pub fn weights_path(name: BackboneName) -> PathBuf {
    weights_dir().join(format!("{}.safetensors", name.weights_stem()))
}

/// Owned tensor ready for serialisation.
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Self {
        Entry {
            name: name.into(),
            shape,
            dtype: Dtype::F32,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Entry {
            name: name.into(),
            shape,
            dtype: Dtype::F64,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

fn st_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Model(format!("{}: {e}", path.display()))
}

pub fn write_safetensors(path: &Path, entries: &[Entry], metadata: Option<HashMap<String, String>>) -> Result<()> {
    let views = entries
        .iter()
        .map(|e| {
            safetensors::tensor::TensorView::new(e.dtype, e.shape.clone(), &e.bytes)
                .map(|v| (e.name.clone(), v))
                .map_err(|err| st_err(path, err))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, metadata).map_err(|e| st_err(path, e))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, bytes).at(path)
}

/// Tensors of a safetensors file decoded to `f64`, keyed by name.
pub struct TensorFile {
    pub path: PathBuf,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| st_err(path, e))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data: Vec<f64> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                other => return Err(st_err(path, format!("tensor {name} has unsupported dtype {other:?}"))),
            };
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(TensorFile {
            path: path.to_path_buf(),
            tensors,
        })
    }

    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| st_err(&self.path, format!("missing tensor {name}")))?;
        if s != shape {
            return Err(Error::Shape {
                expected: format!("{name} {shape:?}"),
                actual: format!("{s:?} in {}", self.path.display()),
            });
        }
        Ok(data)
    }

    /// Overwrites every parameter of `graph` with `{prefix}{param name}`.
    pub fn load_graph(&mut self, graph: &mut Graph, prefix: &str) -> Result<()> {
        for p in &mut graph.params {
            let data = self.take(&format!("{prefix}{}", p.name), &p.shape)?;
            p.data = data.into_iter().map(|v| v as f32).collect();
        }
        Ok(())
    }
}

pub fn graph_entries(graph: &Graph, prefix: &str) -> Vec<Entry> {
    graph
        .params
        .iter()
        .map(|p| Entry::f32(format!("{prefix}{}", p.name), p.shape.clone(), &p.data))
        .collect()
}

/// Loads cached ImageNet weights for `name` into `graph`.
pub fn load_pretrained(graph: &mut Graph, name: BackboneName) -> Result<()> {
    let path = weights_path(name);
    if !path.is_file() {
        return Err(Error::WeightsUnavailable {
            backbone: name.to_string(),
            path,
        });
    }
    let mut file = TensorFile::read(&path)?;
    file.load_graph(graph, "")
}
