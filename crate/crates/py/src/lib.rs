//! Python bindings: models, datasets, attacks, the Langevin chain,
//! smoothing, verification suites and full experiment runs.
//!
//! Batches cross the boundary as lists of rows (one flat list of floats
//! per sample) with integer class labels.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use atent::attacks::{self, AttackConfig};
use atent::checkpoint;
use atent::config::parse_config_str;
use atent::data::{self, one_hot, Dataset};
use atent::error::AtentError;
use atent::models::{self, Batch, GradTarget, ModelParams};
use atent::rng;
use atent::runner::{self, RunOptions};
use atent::sampler::{self, GibbsSamplerConfig};
use atent::smoothing::{self, SmoothPrediction, SmoothingConfig};
use atent::tensor::Tensor;
use atent::verify;

fn to_py(e: AtentError) -> PyErr {
    match e {
        AtentError::Config(_)
        | AtentError::Json(_)
        | AtentError::ShapeMismatch { .. }
        | AtentError::InvalidLabels(_)
        | AtentError::Data(_) => PyValueError::new_err(e.to_string()),
        AtentError::Io { .. } | AtentError::Format { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn batch(model: &ModelParams, inputs: &[Vec<f64>], labels: &[usize]) -> PyResult<Batch> {
    let y = one_hot(labels, model.arch().classes()).map_err(to_py)?;
    Batch::new(rows_to_tensor(inputs)?, y).map_err(to_py)
}

fn split(ds: &Dataset) -> (Vec<Vec<f64>>, Vec<usize>) {
    (tensor_to_rows(&ds.inputs), ds.class_indices())
}

/// Classifier weights plus architecture.
#[pyclass(name = "Model", module = "atent_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Fully connected ReLU network with the given layer widths.
    #[staticmethod]
    #[pyo3(signature = (widths, seed = 0))]
    fn mlp(widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: models::build_mlp(&widths, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Architecture as JSON.
    #[getter]
    fn architecture(&self) -> String {
        serde_json::to_string(self.inner.arch()).expect("serializable")
    }

    fn logits(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = models::forward_logits(&self.inner, &rows_to_tensor(&inputs)?).map_err(to_py)?;
        Ok(tensor_to_rows(&out))
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        models::predict(&self.inner, &rows_to_tensor(&inputs)?).map_err(to_py)
    }

    fn accuracy(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let b = batch(&self.inner, &inputs, &labels)?;
        models::accuracy(&self.inner, &b.inputs, &b.labels).map_err(to_py)
    }

    /// Mean cross-entropy.
    fn loss(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        models::loss(&self.inner, &batch(&self.inner, &inputs, &labels)?).map_err(to_py)
    }

    /// Per-sample gradients of each sample's own loss with respect to its input.
    fn input_gradients(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let out = models::loss_and_grads(&self.inner, &batch(&self.inner, &inputs, &labels)?, GradTarget::Inputs).map_err(to_py)?;
        Ok(tensor_to_rows(&out.inputs.expect("requested")))
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} parameters)", self.architecture(), self.param_count())
    }
}

/// Two Gaussian blobs in the unit square: `(inputs, labels)`.
#[pyfunction]
#[pyo3(signature = (n, separation, seed = 0))]
fn two_gaussians(n: usize, separation: f64, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    Ok(split(&data::synth_two_gaussians(n, separation, seed).map_err(to_py)?))
}

/// Train and test splits of an MNIST-style IDX directory, flattened.
#[pyfunction]
fn load_mnist(dir: PathBuf) -> PyResult<((Vec<Vec<f64>>, Vec<usize>), (Vec<Vec<f64>>, Vec<usize>))> {
    let (train, test) = data::load_mnist_dir(&dir).map_err(to_py)?;
    Ok((split(&train), split(&test)))
}

/// Adversarial inputs for one batch; `attack` is an attack config as JSON.
#[pyfunction]
#[pyo3(signature = (model, inputs, labels, attack, stream = 0))]
fn attack(model: &PyModel, inputs: Vec<Vec<f64>>, labels: Vec<usize>, attack: &str, stream: u64) -> PyResult<Vec<Vec<f64>>> {
    let cfg: AttackConfig = serde_json::from_str(attack).map_err(json_err)?;
    let b = batch(&model.inner, &inputs, &labels)?;
    Ok(tensor_to_rows(&attacks::attack_batch(&model.inner, &b, &cfg, stream).map_err(to_py)?))
}

#[pyfunction]
fn robust_accuracy(model: &PyModel, inputs: Vec<Vec<f64>>, labels: Vec<usize>, attack: &str) -> PyResult<f64> {
    let cfg: AttackConfig = serde_json::from_str(attack).map_err(json_err)?;
    let b = batch(&model.inner, &inputs, &labels)?;
    let ds = Dataset::new(b.inputs, b.labels, (0..model.inner.arch().classes()).map(|c| c.to_string()).collect()).map_err(to_py)?;
    attacks::robust_accuracy(&model.inner, &ds, &cfg).map_err(to_py)
}

/// Langevin chain around a batch; `sampler` is a sampler config as JSON.
/// Returns the kept samples, their batch losses and the loss EMA.
#[pyfunction]
#[pyo3(signature = (model, inputs, labels, sampler, seed = 0))]
fn run_chain(
    model: &PyModel,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sampler: &str,
    seed: u64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<f64>, f64)> {
    let cfg: GibbsSamplerConfig = serde_json::from_str(sampler).map_err(json_err)?;
    let b = batch(&model.inner, &inputs, &labels)?;
    let out = sampler::run_chain(&model.inner, &b, &cfg, rng::derive(seed, &[])).map_err(to_py)?;
    Ok((out.samples.iter().map(tensor_to_rows).collect(), out.sample_losses, out.ema_loss))
}

/// Smoothed prediction of one sample: `(class or None on abstain, votes)`.
#[pyfunction]
#[pyo3(signature = (model, x, sigma, n_samples, abstain_margin = 0.0, seed = 0, stream = 0))]
fn smooth_predict(
    model: &PyModel,
    x: Vec<f64>,
    sigma: f64,
    n_samples: usize,
    abstain_margin: f64,
    seed: u64,
    stream: u64,
) -> PyResult<(Option<usize>, Vec<usize>)> {
    let cfg = SmoothingConfig {
        sigma,
        n_samples,
        abstain_margin,
        seed,
    };
    let x = Tensor::new(vec![1, x.len()], x).map_err(to_py)?;
    let r = smoothing::smooth_predict(&model.inner, &x, &cfg, stream).map_err(to_py)?;
    let class = match r.prediction {
        SmoothPrediction::Class(c) => Some(c),
        SmoothPrediction::Abstain => None,
    };
    Ok((class, r.votes))
}

/// Runs verification suites; returns `(suite, check, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0))]
fn run_verify(suite: &str, seed: u64) -> PyResult<Vec<(String, String, bool, String)>> {
    let reports = verify::run_suites(suite, seed).map_err(to_py)?;
    Ok(reports
        .into_iter()
        .flat_map(|r| {
            let suite = r.suite.to_string();
            r.checks.into_iter().map(move |c| (suite.clone(), c.name, c.passed, c.detail))
        })
        .collect())
}

/// Trains and evaluates an experiment config (JSON text); returns the
/// report CSV.
#[pyfunction]
#[pyo3(signature = (config, data_dir = None, resume = false))]
fn run_experiment(py: Python<'_>, config: &str, data_dir: Option<PathBuf>, resume: bool) -> PyResult<String> {
    let cfg = parse_config_str(config).map_err(to_py)?;
    let opts = RunOptions {
        data_dir,
        resume,
        stop_after_epochs: None,
    };
    let report = py.detach(|| runner::run_experiment(&cfg, &opts)).map_err(to_py)?;
    Ok(report.to_csv())
}

#[pymodule]
fn atent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(two_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(robust_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run_chain, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_predict, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
