//! Python bindings: systems, data generation, model training and rollout,
//! and the numerical bound checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use resflow::cli::{reproduce as run_reproduce, PresetId, ReproduceOptions};
use resflow::dataio::{generate_pairs, load_training_set, save_training_set};
use resflow::dynamics::{
    estimate_lipschitz, integrate_flow, lookup_system, reference_trajectory, toggle_switch,
};
use resflow::theory;
use resflow::training;
use resflow::{
    Architecture, DiscreteFlow, Error, FlowModel, IntegratorConfig, ModelKind, NoiseSpec,
    OracleFlow, SystemDef, TrainConfig, TrainingSet,
};

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        3 if matches!(root(&e), Error::Io(_)) => PyOSError::new_err(msg),
        2 | 3 => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Context { source, .. } => root(source),
        other => other,
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn integrator(method: &str) -> PyResult<IntegratorConfig> {
    match method {
        "rk4" => Ok(IntegratorConfig::default()),
        "adaptive" => Ok(IntegratorConfig::adaptive()),
        other => Err(PyValueError::new_err(format!(
            "unknown integrator {other:?}; expected 'rk4' or 'adaptive'"
        ))),
    }
}

/// A builtin autonomous ODE system.
#[pyclass(name = "System", frozen)]
struct PySystem {
    inner: SystemDef,
}

#[pymethods]
impl PySystem {
    /// `eta` is accepted only for the toggle switch.
    #[new]
    #[pyo3(signature = (name, eta=None))]
    fn new(name: &str, eta: Option<f64>) -> PyResult<Self> {
        let inner = match eta {
            Some(eta) if name == "toggle" => toggle_switch(eta),
            Some(_) => return Err(PyValueError::new_err("eta applies only to 'toggle'")),
            None => lookup_system(name).map_err(err)?,
        };
        Ok(PySystem { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension
    }

    /// `(lower, upper)` corners of the default domain.
    #[getter]
    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        let d = &self.inner.default_domain;
        (d.lower.0.clone(), d.upper.0.clone())
    }

    fn rhs(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.rhs_eval(&x).map_err(err)?.into_inner())
    }

    /// Numerical flow `Φ_t(x)`.
    #[pyo3(signature = (x, t, method="rk4"))]
    fn flow(&self, x: Vec<f64>, t: f64, method: &str) -> PyResult<Vec<f64>> {
        let cfg = integrator(method)?;
        Ok(integrate_flow(&self.inner, &x, t, &cfg)
            .map_err(err)?
            .into_inner())
    }

    /// States at `0, step, ..., steps * step`.
    #[pyo3(signature = (x0, step, steps, method="adaptive"))]
    fn trajectory(
        &self,
        x0: Vec<f64>,
        step: f64,
        steps: usize,
        method: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cfg = integrator(method)?;
        let states = reference_trajectory(&self.inner, &x0, step, steps, &cfg).map_err(err)?;
        Ok(states.into_iter().map(|s| s.into_inner()).collect())
    }

    #[pyo3(signature = (samples=10000, seed=0))]
    fn lipschitz(&self, samples: usize, seed: u64) -> PyResult<f64> {
        let est = estimate_lipschitz(&self.inner, &self.inner.default_domain, samples, seed)
            .map_err(err)?;
        Ok(est.value)
    }

    fn __repr__(&self) -> String {
        format!(
            "System({:?}, dimension={})",
            self.inner.name, self.inner.dimension
        )
    }
}

/// Pairs of states separated by a fixed lag.
#[pyclass(name = "TrainingSet", frozen)]
struct PyTrainingSet {
    inner: TrainingSet,
}

#[pymethods]
impl PyTrainingSet {
    #[staticmethod]
    #[pyo3(signature = (system, j, delta=0.1, seed=0, noise=0.0))]
    fn generate(system: &PySystem, j: usize, delta: f64, seed: u64, noise: f64) -> PyResult<Self> {
        let sys = &system.inner;
        let inner = generate_pairs(
            sys,
            &sys.default_domain,
            j,
            delta,
            NoiseSpec::gaussian(noise),
            &IntegratorConfig::default(),
            seed,
        )
        .map_err(err)?;
        Ok(PyTrainingSet { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainingSet {
            inner: load_training_set(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_training_set(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.lag
    }

    #[getter]
    fn system(&self) -> &str {
        &self.inner.system_name
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.pairs.iter().map(|p| p.z1.0.clone()).collect()
    }

    #[getter]
    fn outputs(&self) -> Vec<Vec<f64>> {
        self.inner.pairs.iter().map(|p| p.z2.0.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A ResNet, RT-ResNet or RS-ResNet flow model.
#[pyclass(name = "FlowModel")]
struct PyFlowModel {
    inner: FlowModel,
}

#[pymethods]
impl PyFlowModel {
    /// `kind` is 'resnet', 'rt' or 'rs'; `init_std=None` uses `1/sqrt(fan_in)`.
    #[new]
    #[pyo3(signature = (kind, state_dim, hidden, k=None, delta=0.1, seed=0, init_std=Some(0.1)))]
    fn new(
        kind: &str,
        state_dim: usize,
        hidden: Vec<usize>,
        k: Option<usize>,
        delta: f64,
        seed: u64,
        init_std: Option<f64>,
    ) -> PyResult<Self> {
        let kind = ModelKind::from_short_name(kind).map_err(err)?;
        let k = k.unwrap_or(if kind == ModelKind::ResNet { 1 } else { 3 });
        let arch = Architecture::with_hidden(state_dim, &hidden).map_err(err)?;
        let inner = FlowModel::init(kind, k, delta, &arch, seed, init_std).map_err(err)?;
        Ok(PyFlowModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFlowModel {
            inner: FlowModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyFlowModel {
            inner: FlowModel::from_json(text).map_err(err)?,
        })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.lag
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    /// One lag step.
    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.advance(&x).map_err(err)?.into_inner())
    }

    /// `(times, states)`. With `fine=True`, `steps` counts block applications
    /// (a multiple of `k`) and every intermediate state is kept.
    #[pyo3(signature = (x0, steps, fine=false))]
    fn rollout(
        &self,
        x0: Vec<f64>,
        steps: usize,
        fine: bool,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let traj = self.inner.rollout(&x0, steps, fine).map_err(err)?;
        Ok((
            traj.times,
            traj.states.into_iter().map(|s| s.into_inner()).collect(),
        ))
    }

    /// Trains in place and returns the loss history as a dict.
    #[pyo3(signature = (data, epochs=500, learning_rate=1e-4, batch_size=10, seed=0, holdout=0.1, optimizer="adam"))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data: &PyTrainingSet,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        holdout: f64,
        optimizer: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let optimizer = match optimizer {
            "adam" => resflow::Optimizer::Adam,
            "sgd" => resflow::Optimizer::Sgd,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown optimizer {other:?}"
                )))
            }
        };
        let cfg = TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
            holdout_fraction: holdout,
            optimizer,
            ..TrainConfig::default()
        };
        let (model, report) = py
            .detach(|| training::train(&self.inner, &data.inner, &cfg))
            .map_err(err)?;
        self.inner = model;
        let out = PyDict::new(py);
        out.set_item("train_loss", report.per_epoch_train_loss)?;
        out.set_item("holdout_loss", report.per_epoch_holdout_loss)?;
        out.set_item("final_holdout_loss", report.final_holdout_loss)?;
        Ok(out)
    }

    /// `(sup, mean)` one-step error against the system flow on uniform points.
    #[pyo3(signature = (system, points=10000, seed=0))]
    fn holdout_error(&self, system: &PySystem, points: usize, seed: u64) -> PyResult<(f64, f64)> {
        let sys = &system.inner;
        training::holdout_error(&self.inner, sys, &sys.default_domain, points, seed).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FlowModel({}, K={}, delta={})",
            self.inner.kind, self.inner.k, self.inner.lag
        )
    }
}

#[pyfunction]
#[pyo3(signature = (system, t, l, pairs=1000, seed=0))]
fn check_flow_lipschitz<'py>(
    py: Python<'py>,
    system: &PySystem,
    t: f64,
    l: f64,
    pairs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let sys = &system.inner;
    let r =
        theory::check_flow_lipschitz(sys, &sys.default_domain, t, pairs, l, seed).map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (system, x, delta=0.1, k=3))]
fn check_composition<'py>(
    py: Python<'py>,
    system: &PySystem,
    x: Vec<f64>,
    delta: f64,
    k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let r = theory::check_composition(&system.inner, &x, delta, k, &IntegratorConfig::default())
        .map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (system, delta=0.1, k=3, samples=10000, seed=0))]
fn check_near_identity<'py>(
    py: Python<'py>,
    system: &PySystem,
    delta: f64,
    k: usize,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let sys = &system.inner;
    let r = theory::check_near_identity(sys, &sys.default_domain, delta, k, samples, seed)
        .map_err(err)?;
    to_py(py, &r)
}

/// Bound reports for every step `1..=m`. Without `model` the exact flow is
/// rolled out; `sup_error` defaults to the model's sampled one-step error.
#[pyfunction]
#[pyo3(signature = (system, x0, m, l, model=None, sup_error=None, delta=0.1))]
#[allow(clippy::too_many_arguments)]
fn check_rollout_bound<'py>(
    py: Python<'py>,
    system: &PySystem,
    x0: Vec<f64>,
    m: usize,
    l: f64,
    model: Option<PyRef<'_, PyFlowModel>>,
    sup_error: Option<f64>,
    delta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let sys = &system.inner;
    let oracle;
    let flow: &dyn DiscreteFlow = match &model {
        Some(m) => &m.inner,
        None => {
            oracle = OracleFlow::new(sys.clone(), delta);
            &oracle
        }
    };
    let eps = match sup_error {
        Some(e) => e,
        None => {
            training::holdout_error(flow, sys, &sys.default_domain, 10_000, 0)
                .map_err(err)?
                .0
        }
    };
    let reports = theory::rollout_bound_series(flow, sys, &sys.default_domain, &x0, m, l, eps)
        .map_err(err)?;
    to_py(py, &reports)
}

/// Runs a full preset experiment into `dir` and returns its summary.
#[pyfunction]
#[pyo3(signature = (preset, dir, seed=1, j=1000, epochs=500))]
fn reproduce<'py>(
    py: Python<'py>,
    preset: &str,
    dir: PathBuf,
    seed: u64,
    j: usize,
    epochs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let id = PresetId::ALL
        .into_iter()
        .find(|p| p.name() == preset)
        .ok_or_else(|| PyValueError::new_err(format!("unknown preset {preset:?}")))?;
    let options = ReproduceOptions {
        seed,
        j,
        epochs,
        ..ReproduceOptions::default()
    };
    let summary = py
        .detach(|| run_reproduce(id, &options, &dir, &[]))
        .map_err(err)?;
    to_py(py, &summary)
}

#[pyfunction]
fn builtin_systems() -> Vec<String> {
    resflow::dynamics::builtin_systems()
        .into_iter()
        .map(|s| s.name)
        .collect()
}

#[pymodule]
fn pyresflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyTrainingSet>()?;
    m.add_class::<PyFlowModel>()?;
    m.add_function(wrap_pyfunction!(builtin_systems, m)?)?;
    m.add_function(wrap_pyfunction!(check_flow_lipschitz, m)?)?;
    m.add_function(wrap_pyfunction!(check_composition, m)?)?;
    m.add_function(wrap_pyfunction!(check_near_identity, m)?)?;
    m.add_function(wrap_pyfunction!(check_rollout_bound, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    Ok(())
}
