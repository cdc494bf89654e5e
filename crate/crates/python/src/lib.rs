//! Python bindings: models, losses, suite generation and experiment runs.
//!
//! Matrices cross the boundary as lists of rows of floats.

use hirnet_core::autodiff::{Graph, Tensor};
use hirnet_core::data::SuiteSpec;
use hirnet_core::diagnostics::{self, DiagOptions};
use hirnet_core::harness::{self, ExperimentConfig, RunOptions};
use hirnet_core::losses::{self, BatchLabels, HirOptions};
use hirnet_core::models::{init, MlpSpec, ModelParams};
use hirnet_core::HirError;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: HirError) -> PyErr {
    match e {
        HirError::Io(io) => PyOSError::new_err(io.to_string()),
        HirError::Divergence(_) | HirError::DiagnosticUnavailable(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(to_py)
}

fn rows(t: &Tensor) -> Rows {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Multilayer perceptron parameters.
#[pyclass(name = "Model", module = "hirnet", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Glorot-uniform weights, zero biases.
    #[new]
    fn new(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        let inner = init(&MlpSpec::new(layer_sizes, seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    /// Returns `(z, logits)`.
    fn forward(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (z, logits) = self.inner.infer(&tensor(&x)?).map_err(to_py)?;
        Ok((rows(&z), rows(&logits)))
    }

    fn predict(&self, x: Rows) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(&x)?).map_err(to_py)
    }

    fn checkpoint(&self) -> String {
        self.inner.to_checkpoint_string()
    }

    fn __repr__(&self) -> String {
        format!("Model(layer_sizes={:?})", self.inner.layer_sizes())
    }
}

#[pyfunction]
fn log_softmax(x: Rows) -> PyResult<Rows> {
    Ok(rows(&tensor(&x)?.log_softmax()))
}

#[pyfunction]
fn cross_entropy(log_probs: Rows, labels: Vec<usize>) -> PyResult<f64> {
    let mut g = Graph::new();
    let lp = g.constant(tensor(&log_probs)?);
    let out = losses::cross_entropy(&mut g, lp, &labels).map_err(to_py)?;
    g.value(out).item().map_err(to_py)
}

/// Posterior alignment loss of a batch; returns `(value, pair_count)`.
#[pyfunction]
#[pyo3(signature = (log_probs, labels, domains, cross_domain_only=false, normalize=false, symmetric=false))]
fn hir_kl(
    log_probs: Rows,
    labels: Vec<usize>,
    domains: Vec<usize>,
    cross_domain_only: bool,
    normalize: bool,
    symmetric: bool,
) -> PyResult<(f64, usize)> {
    let mut g = Graph::new();
    let lp = g.constant(tensor(&log_probs)?);
    let opts = HirOptions {
        cross_domain_only,
        normalize,
        symmetric,
    };
    let (out, pairs) = losses::hir_kl(&mut g, lp, &BatchLabels::new(labels, domains), &opts).map_err(to_py)?;
    Ok((g.value(out).item().map_err(to_py)?, pairs))
}

#[pyfunction]
fn mmd_rbf(z_a: Rows, z_b: Rows, bandwidth: f64) -> PyResult<f64> {
    losses::mmd_rbf_value(&tensor(&z_a)?, &tensor(&z_b)?, bandwidth).map_err(to_py)
}

#[pyfunction]
fn median_bandwidth(z: Rows) -> PyResult<f64> {
    Ok(losses::median_bandwidth(&tensor(&z)?))
}

/// Builds a suite from a JSON manifest. Returns one `(x, y, base_id)` tuple
/// per domain.
#[pyfunction]
fn generate_suite(manifest: &str) -> PyResult<Vec<(Rows, Vec<usize>, Vec<usize>)>> {
    let suite = SuiteSpec::from_json(manifest).and_then(|s| s.build()).map_err(to_py)?;
    Ok(suite
        .domains
        .iter()
        .map(|d| {
            (
                d.samples.iter().map(|s| s.x.clone()).collect(),
                d.labels(),
                d.samples.iter().map(|s| s.base_id).collect(),
            )
        })
        .collect())
}

/// Runs an experiment from a JSON config and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, workers=1))]
fn run_experiment(py: Python<'_>, config: &str, workers: usize) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config).map_err(to_py)?;
    let report = py
        .detach(|| harness::run_experiment_with(&cfg, RunOptions { workers }))
        .map_err(to_py)?
        .0;
    report.to_json().map_err(to_py)
}

/// Diagnostics summary of a model on a suite manifest, as JSON.
#[pyfunction]
#[pyo3(signature = (model, manifest, probe_size=200, seed=0))]
fn diagnose(py: Python<'_>, model: &PyModel, manifest: &str, probe_size: usize, seed: u64) -> PyResult<String> {
    let suite = SuiteSpec::from_json(manifest).and_then(|s| s.build()).map_err(to_py)?;
    let opts = DiagOptions {
        probe_size,
        seed,
        ..DiagOptions::default()
    };
    let params = model.inner.clone();
    let bundle = py.detach(|| diagnostics::diagnose(&params, &suite, &opts)).map_err(to_py)?;
    serde_json::to_string(&bundle.summary()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn hirnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(log_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(hir_kl, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_rbf, m)?)?;
    m.add_function(wrap_pyfunction!(median_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(generate_suite, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
