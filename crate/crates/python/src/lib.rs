//! Python bindings: losses, attention, metrics, dataset generation,
//! training and checkpoint evaluation. Structured results come back as
//! plain dicts.

use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recame_core::attention::{self, ChannelAttentionParams, FeatureMap};
use recame_core::datagen::{self, DatasetSpec, Split};
use recame_core::eval::{self, SubgroupSpec};
use recame_core::losses::{self, ClassCountTable, EmbeddingBatch, LabelBatch, LogitBatch};
use recame_core::model::{self, MultiExpertModel};
use recame_core::train::{self, gradcheck::gradcheck as run_gradcheck, TrainingConfig};
use recame_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for recame_core::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py, S: serde::Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, c), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn tensor3(t: Vec<Vec<Vec<f64>>>) -> PyResult<Array3<f64>> {
    let h = t.len();
    let w = t.first().map_or(0, Vec::len);
    let c = t.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if t.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("ragged feature map"));
    }
    Array3::from_shape_vec((h, w, c), t.into_iter().flatten().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn logits(z: Vec<Vec<f64>>, k: usize) -> PyResult<LogitBatch> {
    LogitBatch::new(matrix(z)?, k).or_py()
}

fn labels(y: Vec<usize>, c: usize) -> PyResult<LabelBatch> {
    LabelBatch::new(y, c).or_py()
}

fn counts(n: Vec<u64>) -> PyResult<ClassCountTable> {
    ClassCountTable::new(n).or_py()
}

/// Softmax of `z + log(counts)`.
#[pyfunction]
fn balanced_softmax(z: Vec<f64>, class_counts: Vec<u64>) -> PyResult<Vec<f64>> {
    losses::balanced_softmax(&z, &counts(class_counts)?).or_py()
}

#[pyfunction]
fn cross_entropy(z: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
    let z = logits(z, 0)?;
    let c = z.num_classes();
    losses::cross_entropy(&z, &labels(y, c)?).or_py()
}

#[pyfunction]
fn arb_loss(z: Vec<Vec<f64>>, y: Vec<usize>, class_counts: Vec<u64>) -> PyResult<f64> {
    let z = logits(z, 0)?;
    let c = z.num_classes();
    losses::arb_loss(&z, &labels(y, c)?, &counts(class_counts)?).or_py()
}

#[pyfunction]
fn hcm_loss(z: Vec<Vec<f64>>, y: Vec<usize>, class_counts: Vec<u64>, top_n: usize) -> PyResult<f64> {
    let z = logits(z, 0)?;
    let c = z.num_classes();
    losses::hcm_loss(&z, &labels(y, c)?, &counts(class_counts)?, top_n).or_py()
}

fn branch_batches(branches: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<LogitBatch>> {
    branches.into_iter().enumerate().map(|(k, z)| logits(z, k)).collect()
}

/// `branches[k]` is the `(B, C)` logit matrix of branch `k`.
#[pyfunction]
fn kd_all_loss(branches: Vec<Vec<Vec<f64>>>, class_counts: Vec<u64>) -> PyResult<f64> {
    losses::kd_all_loss(&branch_batches(branches)?, &counts(class_counts)?).or_py()
}

#[pyfunction]
fn kd_hard_loss(branches: Vec<Vec<Vec<f64>>>, y: Vec<usize>, class_counts: Vec<u64>, top_n: usize) -> PyResult<f64> {
    let b = branch_batches(branches)?;
    let c = b.first().map_or(0, LogitBatch::num_classes);
    losses::kd_hard_loss(&b, &labels(y, c)?, &counts(class_counts)?, top_n).or_py()
}

#[pyfunction]
#[pyo3(signature = (e, y, margin = 1.0))]
fn contrastive_loss(e: Vec<Vec<f64>>, y: Vec<usize>, margin: f64) -> PyResult<f64> {
    let e = EmbeddingBatch::new(matrix(e)?, 0).or_py()?;
    let c = y.iter().max().map_or(1, |m| m + 1);
    losses::contrastive_loss(&e, &labels(y, c)?, margin).or_py()
}

#[pyfunction]
fn center_loss(e: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
    let e = EmbeddingBatch::new(matrix(e)?, 0).or_py()?;
    let c = y.iter().max().map_or(1, |m| m + 1);
    losses::center_loss(&e, &labels(y, c)?).or_py()
}

/// Regional channel attention with one seeded parameter set shared by the
/// four quadrants.
#[pyclass]
struct RcAttn {
    params: ChannelAttentionParams<f64>,
}

#[pymethods]
impl RcAttn {
    /// `zero=True` gives all-zero weights, so the gate is exactly 0.5.
    #[new]
    #[pyo3(signature = (channels, reduction = 16, seed = 0, zero = false))]
    fn new(channels: usize, reduction: usize, seed: u64, zero: bool) -> Self {
        let params = if zero {
            ChannelAttentionParams::zeros(channels, reduction)
        } else {
            ChannelAttentionParams::new(channels, reduction, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        Self { params }
    }

    /// `x` is an `(H, W, C)` nested list.
    fn __call__(&self, x: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let f = FeatureMap::new(tensor3(x)?).or_py()?;
        let y = attention::rc_attn(&f, &self.params).or_py()?;
        Ok(y
            .values()
            .outer_iter()
            .map(|row| row.outer_iter().map(|p| p.to_vec()).collect())
            .collect())
    }
}

type Range2 = ((usize, usize), (usize, usize));

/// Row and column ranges `((r0, r1), (c0, c1))` of the four quadrants.
#[pyfunction]
fn quadrant_bounds(h: usize, w: usize) -> PyResult<Vec<Range2>> {
    let b = attention::quadrant_bounds(h, w).or_py()?;
    Ok(b.iter().map(|(r, c)| ((r.start, r.end), (c.start, c.end))).collect())
}

fn spec(subgroups: &str) -> PyResult<SubgroupSpec> {
    subgroups.parse().or_py()
}

#[pyfunction]
#[pyo3(signature = (predictions, labels, train_counts, subgroups = "ic"))]
fn subgroup_accuracy<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    labels: Vec<usize>,
    train_counts: Vec<u64>,
    subgroups: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let s = eval::subgroup_accuracy(&predictions, &labels, &train_counts, &spec(subgroups)?).or_py()?;
    to_py(py, &s)
}

/// `(majority, minority)`; `None` for an empty group.
#[pyfunction]
#[pyo3(signature = (predictions, labels, train_counts, subgroups = "ic"))]
fn majority_minority(
    predictions: Vec<usize>,
    labels: Vec<usize>,
    train_counts: Vec<u64>,
    subgroups: &str,
) -> PyResult<(Option<f64>, Option<f64>)> {
    let m = eval::majority_minority(&predictions, &labels, &train_counts, &spec(subgroups)?).or_py()?;
    Ok((m.majority, m.minority))
}

#[pyfunction]
fn per_class_accuracy(predictions: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> PyResult<Vec<Option<f64>>> {
    eval::per_class_accuracy(&predictions, &labels, num_classes).or_py()
}

/// Writes a dataset preset to `out` and returns its distribution stats.
#[pyfunction]
#[pyo3(signature = (out, preset = "icdefect-mini", seed = 0))]
fn generate_dataset<'py>(py: Python<'py>, out: PathBuf, preset: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let spec = DatasetSpec::preset(preset, seed).or_py()?;
    let (_, stats) = datagen::generate_dataset(&spec, &out).or_py()?;
    to_py(py, &stats)
}

/// Default training config as a dict.
#[pyfunction]
fn default_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &TrainingConfig::default())
}

/// Trains from a JSON config string; checkpoints and `history.csv` go to
/// `out` when given. Returns the per-epoch history.
#[pyfunction]
#[pyo3(signature = (config_json, manifest, out = None))]
fn train_model<'py>(
    py: Python<'py>,
    config_json: &str,
    manifest: PathBuf,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = TrainingConfig::from_json(config_json).or_py()?;
    let m = datagen::read_manifest(&manifest).or_py()?;
    if let Some(o) = &out {
        std::fs::create_dir_all(o).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        config.save(&o.join("config.json")).or_py()?;
    }
    let outcome = train::train(&config, &m, out.as_deref(), &mut |_| {}).or_py()?;
    to_py(py, &outcome.history.epochs)
}

/// A trained model loaded from a checkpoint directory.
#[pyclass]
struct Model {
    inner: MultiExpertModel<f32>,
    class_counts: Vec<u64>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, meta) = model::load_checkpoint::<f32>(&checkpoint).or_py()?;
        Ok(Self {
            inner,
            class_counts: meta.class_counts,
        })
    }

    #[getter]
    fn num_branches(&self) -> usize {
        self.inner.num_branches()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn class_counts(&self) -> Vec<u64> {
        self.class_counts.clone()
    }

    /// Consensus class of each `(S, S)` image, pixels already scaled to [-1, 1].
    fn predict(&mut self, images: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<usize>> {
        let n = images.len();
        let (h, w, c) = self.inner.input_shape();
        let flat: Vec<f32> = images.into_iter().flatten().flatten().map(|v| v as f32).collect();
        let x = Array4::from_shape_vec((n, h, w, c), flat)
            .map_err(|_| PyValueError::new_err(format!("expected images of shape ({h}, {w})")))?;
        Ok(self.inner.predict(&x).or_py()?.classes)
    }

    /// Full report on the test split of `manifest`.
    #[pyo3(signature = (manifest, subgroups = "ic"))]
    fn evaluate<'py>(&mut self, py: Python<'py>, manifest: PathBuf, subgroups: &str) -> PyResult<Bound<'py, PyAny>> {
        let m = datagen::read_manifest(&manifest).or_py()?;
        let data = datagen::load_split(&m, Split::Test).or_py()?;
        let r = eval::evaluate(&mut self.inner, &data, &self.class_counts, &spec(subgroups)?, 128).or_py()?;
        to_py(py, &r)
    }

    /// Writes per-(sample, branch) embeddings of the test split; returns the row count.
    fn export_embeddings(&mut self, manifest: PathBuf, out: PathBuf) -> PyResult<usize> {
        let m = datagen::read_manifest(&manifest).or_py()?;
        let data = datagen::load_split(&m, Split::Test).or_py()?;
        eval::export_embeddings(&mut self.inner, &data, &out, 128).or_py()
    }
}

#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn gradcheck<'py>(py: Python<'py>, name: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &run_gradcheck(name, seed).or_py()?)
}

/// Runs the command line with `argv` (without the program name); returns the exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    recame_core::cli::dispatch(std::iter::once("recame".to_string()).chain(argv))
}

#[pymodule]
fn recame(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(balanced_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(arb_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hcm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_all_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kd_hard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(center_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quadrant_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(subgroup_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(majority_minority, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_class::<RcAttn>()?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
