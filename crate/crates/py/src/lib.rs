//! Python bindings for the brain-age pipeline: synthetic data, outlier
//! scoring, fold assignment, metrics, cross-validated training and reports.

use std::path::PathBuf;

use brainage::evaluation::{self, ComparisonReport, ExperimentConfig, FoldMetrics, Phase};
use brainage::isoforest::{self, ForestParams, IsolationForestModel};
use brainage::model::{BackboneName, BackboneSpec, WeightsSource};
use brainage::preprocess::{self, Dataset};
use brainage::synth::{self, SynthConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: brainage::Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &FoldMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mse", m.mse)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("mae", m.mae)?;
    d.set_item("mape", m.mape)?;
    d.set_item("training_time_seconds", m.training_time_seconds)?;
    Ok(d)
}

fn metrics_from(d: &Bound<'_, PyDict>) -> PyResult<FoldMetrics> {
    let get = |k: &str| -> PyResult<f64> {
        d.get_item(k)?
            .ok_or_else(|| PyValueError::new_err(format!("missing key {k:?}")))?
            .extract()
    };
    Ok(FoldMetrics {
        mse: get("mse")?,
        rmse: get("rmse")?,
        mae: get("mae")?,
        mape: get("mape")?,
        training_time_seconds: get("training_time_seconds")?,
    })
}

/// Preprocessed 224×224×3 images with age targets.
#[pyclass(name = "Dataset", module = "brainage_py")]
struct PyDataset {
    inner: Dataset,
    is_noise: Option<Vec<bool>>,
}

#[pymethods]
impl PyDataset {
    /// Synthetic brightness-to-age images plus uniform-noise images with random ages.
    #[staticmethod]
    #[pyo3(signature = (structured, noise=0, seed=0))]
    fn synthetic(structured: usize, noise: usize, seed: u64) -> PyResult<Self> {
        let (inner, flags) = synth::dataset(&SynthConfig {
            structured,
            noise,
            seed,
        })
        .map_err(py_err)?;
        Ok(PyDataset {
            inner,
            is_noise: Some(flags),
        })
    }

    /// Builds a dataset from raw 224×224×3 byte buffers.
    #[staticmethod]
    #[pyo3(signature = (images, ages, subjects=None))]
    fn from_bytes(images: Vec<Vec<u8>>, ages: Vec<f64>, subjects: Option<Vec<String>>) -> PyResult<Self> {
        let inputs = images
            .iter()
            .map(|b| preprocess::normalize(b))
            .collect::<brainage::Result<Vec<_>>>()
            .map_err(py_err)?;
        let ids: Vec<String> = (0..inputs.len()).map(|i| i.to_string()).collect();
        let subjects = subjects.unwrap_or_else(|| ids.clone());
        let inner = Dataset::new(inputs, ages, ids, subjects).map_err(py_err)?;
        Ok(PyDataset { inner, is_noise: None })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn targets(&self) -> Vec<f64> {
        self.inner.targets.clone()
    }

    /// Planted-noise flags for synthetic datasets, else `None`.
    #[getter]
    fn is_noise(&self) -> Option<Vec<bool>> {
        self.is_noise.clone()
    }

    /// Outlier features of every record: grayscale area-averaged to `grid`×`grid`.
    #[pyo3(signature = (grid=isoforest::DEFAULT_GRID))]
    fn features(&self, grid: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .inputs
            .iter()
            .map(|x| isoforest::extract_features_with(x, grid, "").map(|f| f.values))
            .collect::<brainage::Result<_>>()
            .map_err(py_err)
    }
}

#[pyclass(name = "IsolationForest", module = "brainage_py")]
struct PyIsolationForest {
    inner: IsolationForestModel,
}

#[pymethods]
impl PyIsolationForest {
    #[staticmethod]
    #[pyo3(signature = (rows, n_trees=100, subsample_size=256, seed=0))]
    fn fit(rows: Vec<Vec<f64>>, n_trees: usize, subsample_size: usize, seed: u64) -> PyResult<Self> {
        let inner = isoforest::fit(
            &rows,
            &ForestParams {
                n_trees,
                subsample_size,
                seed,
            },
        )
        .map_err(py_err)?;
        Ok(PyIsolationForest { inner })
    }

    fn score(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.score_all(&rows).map_err(py_err)
    }

    fn mean_path_length(&self, x: Vec<f64>) -> f64 {
        self.inner.mean_path_length(&x)
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.trees.len()
    }

    #[getter]
    fn subsample_size(&self) -> usize {
        self.inner.subsample_size
    }
}

/// Cross-validated comparison of backbones before and after outlier filtering.
#[pyclass(name = "Report", module = "brainage_py")]
struct PyReport {
    inner: ComparisonReport,
}

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyReport {
            inner: ComparisonReport::from_json(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyReport {
            inner: ComparisonReport::load_json(&path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().map_err(py_err)
    }

    fn determinism_hash(&self) -> PyResult<String> {
        self.inner.determinism_hash().map_err(py_err)
    }

    /// Grouped MAE bar chart on a log axis, as SVG text.
    fn render_svg(&self) -> PyResult<String> {
        let rows = evaluation::plot_rows(&self.inner).map_err(py_err)?;
        evaluation::render_svg(&rows).map_err(py_err)
    }

    /// Writes report.json, report.csv, report_folds.csv, plot.csv and plot.svg.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)?;
        evaluation::emit_plot_data(&self.inner, &dir).map_err(py_err)?;
        Ok(())
    }

    /// Fold-averaged metrics of one cell, or `None` if it did not complete.
    fn mean<'py>(&self, py: Python<'py>, backbone: &str, phase: &str) -> PyResult<Option<Bound<'py, PyDict>>> {
        let phase = match phase {
            "before_filtering" => Phase::BeforeFiltering,
            "after_filtering" => Phase::AfterFiltering,
            other => return Err(PyValueError::new_err(format!("unknown phase {other:?}"))),
        };
        let cell = self
            .inner
            .cell(backbone, phase)
            .ok_or_else(|| PyValueError::new_err(format!("no cell for {backbone} {phase}")))?;
        cell.mean.as_ref().map(|m| metrics_dict(py, m)).transpose()
    }

    /// `(backbone, phase, status)` of every cell.
    fn cells(&self) -> Vec<(String, String, String)> {
        self.inner
            .cells
            .iter()
            .map(|c| (c.backbone.clone(), c.phase.to_string(), c.status.to_string()))
            .collect()
    }
}

#[pyfunction]
fn avg_path_c(n: usize) -> f64 {
    isoforest::avg_path_c(n)
}

#[pyfunction]
fn anomaly_score(mean_path: f64, subsample_size: usize) -> f64 {
    isoforest::anomaly_score(mean_path, subsample_size)
}

/// Indices of the ⌊contamination·N⌋ highest scores, ascending.
#[pyfunction]
fn flag_outliers(scores: Vec<f64>, contamination: f64) -> PyResult<Vec<usize>> {
    isoforest::flag_outliers(&scores, contamination).map_err(py_err)
}

/// `(train_indices, test_indices)` per fold.
#[pyfunction]
fn make_folds(n: usize, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    Ok(evaluation::make_folds(n, k, seed)
        .map_err(py_err)?
        .into_iter()
        .map(|f| (f.train_indices, f.test_indices))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (y_true, y_pred, training_time_seconds=0.0))]
fn compute_metrics<'py>(
    py: Python<'py>,
    y_true: Vec<f64>,
    y_pred: Vec<f64>,
    training_time_seconds: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = evaluation::compute_metrics(&y_true, &y_pred, training_time_seconds).map_err(py_err)?;
    metrics_dict(py, &m)
}

#[pyfunction]
fn aggregate_folds<'py>(py: Python<'py>, folds: Vec<Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let rows = folds.iter().map(metrics_from).collect::<PyResult<Vec<_>>>()?;
    metrics_dict(py, &evaluation::aggregate_folds(&rows).map_err(py_err)?)
}

/// Isolation-forest scores for a dataset's outlier features.
#[pyfunction]
#[pyo3(signature = (dataset, n_trees=100, subsample_size=256, contamination=0.05, seed=0))]
fn score_dataset(
    dataset: &PyDataset,
    n_trees: usize,
    subsample_size: usize,
    contamination: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cfg = isoforest::OutlierConfig {
        n_trees,
        subsample_size,
        contamination,
        ..isoforest::OutlierConfig::default()
    };
    isoforest::score_dataset(&dataset.inner, &cfg, seed).map_err(py_err)
}

/// k-fold training and evaluation of each backbone. `kept` selects the
/// records of the after-filtering phase; without it that phase is skipped.
#[pyfunction]
#[pyo3(signature = (
    dataset, backbones=vec!["Stub".to_string()], kept=None, seed=0, k_folds=5,
    epochs=20, batch_size=128, learning_rate=0.001, trainable_tail_layers=None,
    random_weights=false, group_by_subject=true
))]
#[allow(clippy::too_many_arguments)]
fn run_experiment(
    py: Python<'_>,
    dataset: &PyDataset,
    backbones: Vec<String>,
    kept: Option<Vec<usize>>,
    seed: u64,
    k_folds: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    trainable_tail_layers: Option<usize>,
    random_weights: bool,
    group_by_subject: bool,
) -> PyResult<PyReport> {
    let specs = backbones
        .iter()
        .map(|b| {
            let name: BackboneName = b.parse().map_err(py_err)?;
            let mut spec = BackboneSpec::new(name);
            if let Some(k) = trainable_tail_layers {
                spec.trainable_tail_layers = k;
            }
            if random_weights {
                spec.weights = WeightsSource::Random;
            }
            Ok(spec)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let mut cfg = ExperimentConfig::new(specs, seed);
    cfg.k_folds = k_folds;
    cfg.group_by_subject = group_by_subject;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = batch_size;
    cfg.train.learning_rate = learning_rate;
    let snapshot = serde_json::json!({
        "backbones": backbones,
        "seed": seed,
        "k_folds": k_folds,
        "epochs": epochs,
        "batch_size": batch_size,
        "learning_rate": learning_rate,
    });
    let inner = py
        .allow_threads(|| evaluation::run_experiment(&cfg, &dataset.inner, kept.as_deref(), snapshot, None))
        .map_err(py_err)?;
    Ok(PyReport { inner })
}

#[pymodule]
fn brainage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyIsolationForest>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(avg_path_c, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(flag_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_folds, m)?)?;
    m.add_function(wrap_pyfunction!(score_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
