//! Python bindings: losses, Dice, synthetic data, splits, training, checkpoints and the
//! self-test suites.

use std::path::PathBuf;

use mms_core::config::RunConfigFile;
use mms_core::data::{disjoint_split, scan_dataset, Image, SplitManifest};
use mms_core::evaluation::{self, evaluate_set, EvalSettings, InferenceMode};
use mms_core::losses::{
    self, FeatureMapBatch, FeatureVectorBatch, LossComponents, LossWeights, MaskBatch,
    NegativeKeys, Temperature,
};
use mms_core::synthdata::{generate_dataset, SynthConfig};
use mms_core::training::{self, CheckpointState, EpochMetrics};
use mms_core::MmsError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: MmsError) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn mode(name: &str) -> PyResult<InferenceMode> {
    name.parse().map_err(py_err)
}

fn k_neg(value: Option<usize>) -> PyResult<NegativeKeys> {
    match value {
        None => Ok(NegativeKeys::All),
        Some(0) => Err(PyValueError::new_err("k_neg must be positive")),
        Some(k) => Ok(NegativeKeys::Sampled(k)),
    }
}

/// Supervised objective of `p` (probabilities) against binary `y`, both flat `B·H·W` lists.
#[pyfunction]
fn sup_loss(p: Vec<f64>, y: Vec<f64>, batch: usize, height: usize, width: usize) -> PyResult<f64> {
    let p = MaskBatch::predictions(batch, height, width, p).map_err(py_err)?;
    let y = MaskBatch::labels(batch, height, width, y).map_err(py_err)?;
    losses::sup_loss(&p, &y).map_err(py_err)
}

#[pyfunction]
fn similarity_loss(p1: Vec<f64>, p2: Vec<f64>, batch: usize, height: usize, width: usize) -> PyResult<f64> {
    let a = MaskBatch::predictions(batch, height, width, p1).map_err(py_err)?;
    let b = MaskBatch::predictions(batch, height, width, p2).map_err(py_err)?;
    losses::similarity_loss(&a, &b).map_err(py_err)
}

/// Queries and keys are lists of unit vectors.
#[pyfunction]
#[pyo3(signature = (q, k, tau = 0.07))]
fn info_nce_all_negative(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let batch = |rows: Vec<Vec<f64>>| {
        let d = rows.first().map_or(0, Vec::len);
        FeatureVectorBatch::new(rows.len(), d, rows.concat())
    };
    losses::info_nce_all_negative(
        &batch(q).map_err(py_err)?,
        &batch(k).map_err(py_err)?,
        Temperature::new(tau).map_err(py_err)?,
    )
    .map_err(py_err)
}

/// Feature maps are flat `B·D·H·W` lists; `k_neg = None` uses every other location.
#[pyfunction]
#[pyo3(signature = (f1, f2, batch, dim, height, width, tau = 0.07, k_neg = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pixel_info_nce(
    f1: Vec<f64>,
    f2: Vec<f64>,
    batch: usize,
    dim: usize,
    height: usize,
    width: usize,
    tau: f64,
    k_neg: Option<usize>,
    seed: u64,
) -> PyResult<f64> {
    losses::pixel_info_nce(
        &FeatureMapBatch::new(batch, dim, height, width, f1).map_err(py_err)?,
        &FeatureMapBatch::new(batch, dim, height, width, f2).map_err(py_err)?,
        Temperature::new(tau).map_err(py_err)?,
        self::k_neg(k_neg)?,
        seed,
    )
    .map_err(py_err)
}

#[pyfunction]
fn total_loss(components: [f64; 4], weights: [f64; 4]) -> PyResult<f64> {
    let c = LossComponents {
        l_sup: components[0],
        l_nce_sup: components[1],
        l_sim: components[2],
        l_nce: components[3],
    };
    let w = LossWeights::new(weights[0], weights[1], weights[2], weights[3]).map_err(py_err)?;
    losses::total_loss(&c, &w).map_err(py_err)
}

/// Dice score of two flat binary masks.
#[pyfunction]
fn dsc(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<f64> {
    evaluation::dsc_values(&pred, &gt).map_err(py_err)
}

/// Writes `n_images` synthetic image/mask pairs under `out_dir`; returns the mean
/// foreground fraction.
#[pyfunction]
fn generate_synthetic(out_dir: PathBuf, n_images: usize, height: usize, width: usize, seed: u64) -> PyResult<f64> {
    let summary = generate_dataset(&SynthConfig::new(n_images, height, width, seed), &out_dir).map_err(py_err)?;
    Ok(summary.mean_foreground())
}

/// Splits the labeled pairs under `data_dir` and saves the manifest to `out`.
/// Returns `(|X1|, |X2|, |U|)`.
#[pyfunction]
#[pyo3(signature = (data_dir, fraction, seed, out, test_dir = None))]
fn split(
    data_dir: PathBuf,
    fraction: f64,
    seed: u64,
    out: PathBuf,
    test_dir: Option<PathBuf>,
) -> PyResult<(usize, usize, usize)> {
    let listing = scan_dataset(&data_dir).map_err(py_err)?;
    let mut m = disjoint_split(&listing.labeled, fraction, seed)
        .and_then(|m| m.with_extra_unlabeled(listing.unlabeled))
        .map_err(py_err)?;
    if let Some(t) = test_dir {
        m = m.with_test(scan_dataset(&t).map_err(py_err)?.labeled).map_err(py_err)?;
    }
    m.save(&out).map_err(py_err)?;
    Ok((m.labeled_x1.len(), m.labeled_x2.len(), m.unlabeled.len()))
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    for (name, v) in m.components().named() {
        d.set_item(name, v)?;
    }
    d.set_item("total", m.total)?;
    Ok(d)
}

/// A trained (or freshly initialized) pair of networks with their optimizer state.
#[pyclass(module = "mms")]
struct Checkpoint {
    state: CheckpointState,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: training::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.state, &path).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.state.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.state.history.iter().map(|m| metrics_dict(py, m)).collect()
    }

    /// Binary mask of one image as rows of 0/1.
    #[pyo3(signature = (image_path, mode = "ensemble", threshold = 0.5))]
    fn predict(&self, image_path: PathBuf, mode: &str, threshold: f64) -> PyResult<Vec<Vec<u8>>> {
        let image = Image::load(&image_path).map_err(py_err)?;
        let m = evaluation::predict(&self.state.segmenter(), &image, threshold, self::mode(mode)?).map_err(py_err)?;
        Ok(m.data().chunks(m.width()).map(<[u8]>::to_vec).collect())
    }

    /// Mean DSC over the labeled pairs under `test_dir`, with the per-mode breakdown.
    #[pyo3(signature = (test_dir, mode = "ensemble", threshold = 0.5))]
    fn evaluate<'py>(&self, py: Python<'py>, test_dir: PathBuf, mode: &str, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
        let test = scan_dataset(&test_dir).map_err(py_err)?.labeled;
        let settings = EvalSettings {
            threshold,
            mode: self::mode(mode)?,
        };
        let r = evaluate_set(&self.state.segmenter(), &test, &settings, None).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("mean_dsc", r.mean_dsc)?;
        d.set_item("ensemble", r.breakdown.ensemble)?;
        d.set_item("net1", r.breakdown.net1)?;
        d.set_item("net2", r.breakdown.net2)?;
        d.set_item("scored", r.scored())?;
        d.set_item("errors", r.errors().count())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(epoch={}, history={})", self.state.epoch, self.state.history.len())
    }
}

/// Trains on a saved manifest with a TOML run configuration. `out_dir` receives metrics and
/// checkpoints when given.
#[pyfunction]
#[pyo3(signature = (manifest, config, out_dir = None, supervised_only = false))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    config: PathBuf,
    out_dir: Option<PathBuf>,
    supervised_only: bool,
) -> PyResult<Checkpoint> {
    let m = SplitManifest::load(&manifest).map_err(py_err)?;
    let cfg = RunConfigFile::load(&config).map_err(py_err)?;
    let state = py
        .detach(|| {
            if supervised_only {
                training::train_supervised_baseline(&m, &cfg.train, &cfg.augment, &cfg.model, out_dir.as_deref())
            } else {
                training::train(&m, &cfg.train, &cfg.augment, &cfg.model, out_dir.as_deref())
            }
        })
        .map_err(py_err)?;
    Ok(Checkpoint { state })
}

/// Runs the fast acceptance checks; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(u32, String, bool, String)> {
    py.detach(mms_verify::suites::quick)
        .into_iter()
        .map(|o| (o.id, o.name.to_string(), o.passed, o.detail))
        .collect()
}

#[pymodule]
fn mms(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sup_loss, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_all_negative, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
