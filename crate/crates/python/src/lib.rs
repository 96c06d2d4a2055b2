//! Python bindings for `fedgen-core`.
//!
//! Exposes the model, the mask state, the synthetic generator and the
//! training loop. Configuration errors raise `ValueError`, divergence raises
//! `FloatingPointError` and file problems raise `OSError`.

use fedgen_core::datasets::{self, DatasetSpec};
use fedgen_core::{masking, model, Error, RunConfig};
use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Diverged { .. } | Error::NonFinite { .. } => PyFloatingPointError::new_err(err.to_string()),
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// MLP weights and biases.
#[pyclass(name = "ModelParams", module = "fedgen", skip_from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: model::ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    fn new(seed: u64, layer_dims: Vec<usize>) -> PyResult<Self> {
        let inner = model::ModelParams::init(seed, &layer_dims).map_err(to_py)?;
        Ok(PyModelParams { inner })
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims().to_vec()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    fn set_flat(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat(&flat).map_err(to_py)
    }

    /// Class logits for one input row.
    fn forward(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&z).map_err(to_py)
    }

    /// Total loss and its gradient (flattened like `to_flat`) on a batch.
    #[pyo3(signature = (x, y, mask_logits=None, lam=0.0, l1_weight=0.0))]
    fn loss_and_grad(
        &self,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        mask_logits: Option<Vec<f64>>,
        lam: f64,
        l1_weight: f64,
    ) -> PyResult<(f64, Vec<f64>)> {
        let features = self.inner.input_dim();
        if let Some(row) = x.iter().find(|r| r.len() != features) {
            return Err(PyValueError::new_err(format!(
                "rows must have {features} values, got {}",
                row.len()
            )));
        }
        let batch = model::Batch::new(x.concat(), features, y).map_err(to_py)?;
        let graph =
            model::fedgen_loss(&self.inner, &batch, mask_logits.as_deref(), lam, l1_weight).map_err(to_py)?;
        let total = graph.graph.value(graph.total).item().unwrap_or(f64::NAN);
        let grads = graph.gradients().map_err(to_py)?;
        Ok((total, grads.to_flat()))
    }

    fn __repr__(&self) -> String {
        format!("ModelParams(layer_dims={:?})", self.inner.layer_dims())
    }
}

/// Per-feature mask logits with their EMA statistics.
#[pyclass(name = "MaskState", module = "fedgen")]
struct PyMaskState {
    inner: masking::MaskState,
}

#[pymethods]
impl PyMaskState {
    #[new]
    #[pyo3(signature = (features, width, alpha=10.0, beta=0.1, delta=0.9, e_init=5))]
    fn new(features: usize, width: usize, alpha: f64, beta: f64, delta: f64, e_init: usize) -> PyResult<Self> {
        let settings = masking::MaskSettings {
            alpha,
            beta,
            delta,
            e_init,
            ..masking::MaskSettings::default()
        };
        let inner = masking::MaskState::new(features, width, settings).map_err(to_py)?;
        Ok(PyMaskState { inner })
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits().to_vec()
    }

    #[setter]
    fn set_logits(&mut self, logits: Vec<f64>) -> PyResult<()> {
        self.inner.set_logits(&logits).map_err(to_py)
    }

    #[getter]
    fn gates(&self) -> Vec<f64> {
        self.inner.gates()
    }

    fn feature_variance(&self) -> Vec<f64> {
        self.inner.feature_variance()
    }

    fn begin_round(&mut self) {
        self.inner.begin_round();
    }

    /// Folds one epoch's first-layer weights, grouped by feature.
    fn ema_update(&mut self, grouped_weights: Vec<f64>) -> PyResult<()> {
        self.inner.ema_update(&grouped_weights).map_err(to_py)
    }

    /// Applies the logit update; returns the deltas, or None during warm-up.
    fn mask_update(&mut self) -> Option<Vec<f64>> {
        match self.inner.mask_update() {
            masking::MaskUpdate::Applied(d) => Some(d),
            masking::MaskUpdate::WarmUp => None,
        }
    }
}

/// Training and test environments.
#[pyclass(name = "RunData", module = "fedgen")]
struct PyRunData {
    inner: fedgen_core::RunData,
}

fn env_dict<'py>(py: Python<'py>, env: &datasets::Environment) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let rows: Vec<Vec<f64>> = (0..env.data.len()).map(|i| env.data.row(i).to_vec()).collect();
    d.set_item("x", rows)?;
    d.set_item("y", env.data.y().to_vec())?;
    d.set_item("alpha", env.alpha)?;
    d.set_item("env_id", env.env_id)?;
    d.set_item("spurious_idx", env.spurious_idx.clone())?;
    Ok(d)
}

#[pymethods]
impl PyRunData {
    #[getter]
    fn num_train_envs(&self) -> usize {
        self.inner.train.len()
    }

    /// One training environment as a dict with `x`, `y`, `alpha`,
    /// `env_id` and `spurious_idx`.
    fn train_env<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let env = self
            .inner
            .train
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no training environment {index}")))?;
        env_dict(py, env)
    }

    fn test_env<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        env_dict(py, &self.inner.test)
    }
}

#[pyfunction]
#[pyo3(signature = (n_invariant=10, n_spurious=1, classes=2, train_alphas=vec![0.8, 0.9], test_alpha=0.1, samples_per_env=2000, label_noise=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    n_invariant: usize,
    n_spurious: usize,
    classes: usize,
    train_alphas: Vec<f64>,
    test_alpha: f64,
    samples_per_env: usize,
    label_noise: f64,
    seed: u64,
) -> PyResult<PyRunData> {
    let spec = DatasetSpec {
        n_invariant,
        n_spurious,
        classes,
        train_alphas,
        test_alpha,
        samples_per_env,
        label_noise,
        seed,
    };
    let data = datasets::gen_synthetic(&spec).map_err(to_py)?;
    Ok(PyRunData { inner: data.into() })
}

/// Logit increments `mean(v) - alpha * v_i`.
#[pyfunction]
fn mask_deltas(feature_variance: Vec<f64>, alpha: f64) -> Vec<f64> {
    masking::mask_deltas(&feature_variance, alpha)
}

/// Outcome of a training run.
#[pyclass(name = "RunResult", module = "fedgen")]
struct PyRunResult {
    inner: fedgen_core::RunResult,
}

#[pymethods]
impl PyRunResult {
    /// One dict per completed round.
    #[getter]
    fn reports<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .reports
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("round", r.round)?;
                d.set_item("algorithm", r.algorithm.name())?;
                d.set_item("train_accuracy", r.train_accuracy)?;
                d.set_item("test_accuracy", r.test_accuracy)?;
                d.set_item("loss_loc", r.loss.loc)?;
                d.set_item("loss_l1", r.loss.l1)?;
                d.set_item("loss_pen", r.loss.pen)?;
                d.set_item("gates", r.gates.clone())?;
                d.set_item("B_est", r.b_est)?;
                d.set_item("eps_est", r.eps_est)?;
                d.set_item("bound_satisfied", r.bound_satisfied)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn params(&self) -> PyModelParams {
        PyModelParams {
            inner: self.inner.server.params.clone(),
        }
    }

    #[getter]
    fn mask_logits(&self) -> Option<Vec<f64>> {
        self.inner.server.mask_logits.clone()
    }

    #[getter]
    fn final_test_accuracy(&self) -> f64 {
        self.inner.final_report().test_accuracy
    }

    #[getter]
    fn final_train_accuracy(&self) -> f64 {
        self.inner.final_report().train_accuracy
    }

    #[getter]
    fn stopped_early(&self) -> bool {
        self.inner.stopped_early
    }
}

/// Runs federated training. Keyword arguments override the defaults, e.g.
/// `run_training(data, algorithm="fedgen", eta=0.15, hidden=[20])`.
#[pyfunction]
#[pyo3(signature = (data, algorithm="fedgen", eta=0.001, **overrides))]
fn run_training(
    py: Python<'_>,
    data: &PyRunData,
    algorithm: &str,
    eta: f64,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyRunResult> {
    let mut config = RunConfig {
        algorithm: algorithm.parse().map_err(to_py)?,
        eta,
        ..RunConfig::default()
    };
    if let Some(kw) = overrides {
        for (key, value) in kw.iter() {
            let key: String = key.extract()?;
            match key.as_str() {
                "clients" => config.clients = value.extract()?,
                "client_fraction" => config.client_fraction = value.extract()?,
                "rounds" => config.rounds = value.extract()?,
                "local_epochs" => config.local_epochs = value.extract()?,
                "lam" | "lambda_" => config.lambda = value.extract()?,
                "l1_weight" => config.l1_weight = value.extract()?,
                "mu" => config.mu = value.extract()?,
                "batch_size" => config.batch_size = value.extract()?,
                "hidden" => config.hidden = value.extract()?,
                "seed" => config.seed = value.extract()?,
                "patience" => config.patience = value.extract()?,
                "theory_checks" => config.theory_checks = value.extract()?,
                "alpha" => config.mask.alpha = value.extract()?,
                "beta" => config.mask.beta = value.extract()?,
                "delta" => config.mask.delta = value.extract()?,
                "e_init" => config.mask.e_init = value.extract()?,
                "disable_scaling" => config.ablation.disable_scaling = value.extract()?,
                "disable_mask" => config.ablation.disable_mask = value.extract()?,
                "disable_penalty" => config.ablation.disable_penalty = value.extract()?,
                other => return Err(PyValueError::new_err(format!("unknown option '{other}'"))),
            }
        }
    }
    let run = &data.inner;
    let result = py
        .detach(|| fedgen_core::run_training(&config, run))
        .map_err(to_py)?;
    Ok(PyRunResult { inner: result })
}

#[pymodule]
fn fedgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyMaskState>()?;
    m.add_class::<PyRunData>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(mask_deltas, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    Ok(())
}
