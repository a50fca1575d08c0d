//! Python bindings for the ensemble control library.

use ensemble_core as core;
use nalgebra::DVector;
use pyo3::create_exception;
use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

create_exception!(ensemble_pocs, EnsembleError, PyValueError);

fn err(e: core::EnsembleError) -> PyErr {
    EnsembleError::new_err(e.to_string())
}

fn vectors(rows: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    rows.into_iter().map(DVector::from_vec).collect()
}

/// Uniform grid on `[0, horizon]` with `steps` intervals.
#[pyclass(name = "TimeGrid", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyTimeGrid(core::TimeGrid);

#[pymethods]
impl PyTimeGrid {
    #[new]
    fn new(horizon: f64, steps: usize) -> PyResult<Self> {
        core::make_time_grid(horizon, steps).map(Self).map_err(err)
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.0.horizon()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.n_steps()
    }

    fn nodes(&self) -> Vec<f64> {
        self.0.nodes()
    }

    fn __repr__(&self) -> String {
        format!(
            "TimeGrid(horizon={}, steps={})",
            self.0.horizon(),
            self.0.n_steps()
        )
    }
}

/// Vector-valued control sampled at the grid nodes, node-major.
#[pyclass(name = "ControlSignal", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyControlSignal(core::ControlSignal);

#[pymethods]
impl PyControlSignal {
    #[new]
    fn new(grid: &PyTimeGrid, channels: usize, samples: Vec<f64>) -> PyResult<Self> {
        core::ControlSignal::from_samples(grid.0, channels, samples)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn constant(grid: &PyTimeGrid, value: Vec<f64>) -> PyResult<Self> {
        core::ControlSignal::constant(grid.0, &value)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[getter]
    fn grid(&self) -> PyTimeGrid {
        PyTimeGrid(*self.0.grid())
    }

    fn samples(&self) -> Vec<f64> {
        self.0.samples().to_vec()
    }

    fn channel(&self, c: usize) -> PyResult<Vec<f64>> {
        if c >= self.0.channels() {
            return Err(PyIndexError::new_err(format!("channel {c} out of range")));
        }
        Ok(self.0.channel(c).collect())
    }

    fn norm(&self) -> f64 {
        self.0.norm_l2()
    }

    fn energy(&self) -> f64 {
        self.0.energy()
    }

    fn inner(&self, other: &PyControlSignal) -> PyResult<f64> {
        self.0.inner_product(&other.0).map_err(err)
    }

    fn distance(&self, other: &PyControlSignal) -> PyResult<f64> {
        self.0.distance(&other.0).map_err(err)
    }
}

#[pyclass(name = "LinearEnsembleModel", frozen)]
pub struct PyLinearModel(core::LinearEnsembleModel);

#[pymethods]
impl PyLinearModel {
    /// Planar oscillators with rotation rates `params` and two inputs.
    #[staticmethod]
    fn harmonic_oscillator_2in(params: Vec<f64>, horizon: f64) -> PyResult<Self> {
        core::LinearEnsembleModel::harmonic_oscillator_2in(params, horizon)
            .map(Self)
            .map_err(err)
    }

    /// Planar oscillators driven through the first state only.
    #[staticmethod]
    fn harmonic_oscillator_1in(params: Vec<f64>, horizon: f64) -> PyResult<Self> {
        core::LinearEnsembleModel::harmonic_oscillator_1in(params, horizon)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.tag().name()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.0.params().to_vec()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Bloch equations for spins with Larmor frequencies `params`.
#[pyclass(name = "BlochModel", frozen)]
pub struct PyBlochModel(core::BilinearEnsembleModel);

#[pymethods]
impl PyBlochModel {
    #[new]
    fn new(params: Vec<f64>, horizon: f64) -> PyResult<Self> {
        core::BilinearEnsembleModel::bloch(params, horizon)
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "BoundaryPair", frozen)]
pub struct PyBoundary(core::BoundaryPair);

#[pymethods]
impl PyBoundary {
    #[new]
    fn new(initial: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<Self> {
        core::BoundaryPair::new(vectors(initial), vectors(target))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn identical(initial: Vec<f64>, target: Vec<f64>, count: usize) -> PyResult<Self> {
        core::BoundaryPair::identical(&initial, &target, count)
            .map(Self)
            .map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Trajectory", frozen)]
pub struct PyTrajectory(core::Trajectory);

#[pymethods]
impl PyTrajectory {
    fn state(&self, sample: usize, node: usize) -> PyResult<Vec<f64>> {
        if sample >= self.0.len() || node >= self.0.grid().n_nodes() {
            return Err(PyIndexError::new_err("sample or node out of range"));
        }
        Ok(self.0.state(sample, node).to_vec())
    }

    fn terminal(&self, sample: usize) -> PyResult<Vec<f64>> {
        self.state(sample, self.0.grid().n_steps())
    }

    fn terminal_errors(&self, targets: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        if targets.len() != self.0.len() {
            return Err(PyValueError::new_err("one target per sample is required"));
        }
        Ok(self.0.terminal_errors(&vectors(targets)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "SolveReport", frozen)]
pub struct PySolveReport(core::SolveReport);

#[pymethods]
impl PySolveReport {
    #[getter]
    fn control(&self) -> PyControlSignal {
        PyControlSignal(self.0.control.clone())
    }

    #[getter]
    fn classification(&self) -> &'static str {
        self.0.classification.name()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.0.residuals.clone()
    }

    #[getter]
    fn energy(&self) -> f64 {
        self.0.energy
    }

    #[getter]
    fn max_residual(&self) -> f64 {
        self.0.max_residual()
    }

    #[getter]
    fn checkpoints(&self) -> Vec<(usize, PyControlSignal)> {
        self.0
            .checkpoints
            .iter()
            .map(|(k, u)| (*k, PyControlSignal(u.clone())))
            .collect()
    }

    /// Rows of `(iteration, control_norm, max_residual, step_size)`.
    fn trace(&self) -> Vec<(usize, f64, f64, f64)> {
        self.0
            .trace
            .rows
            .iter()
            .map(|r| (r.iteration, r.control_norm, r.max_residual, r.step_size))
            .collect()
    }
}

#[pyclass(name = "BilinearReport", frozen)]
pub struct PyBilinearReport(core::BilinearReport);

#[pymethods]
impl PyBilinearReport {
    #[getter]
    fn control(&self) -> PyControlSignal {
        PyControlSignal(self.0.control.clone())
    }

    #[getter]
    fn trajectory(&self) -> PyTrajectory {
        PyTrajectory(self.0.trajectory.clone())
    }

    #[getter]
    fn terminal_errors(&self) -> Vec<f64> {
        self.0.terminal_errors.clone()
    }

    #[getter]
    fn outer_errors(&self) -> Vec<f64> {
        self.0.outer_errors.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn diverged(&self) -> bool {
        self.0.diverged
    }

    #[getter]
    fn outer_iterations(&self) -> usize {
        self.0.outer_iterations
    }

    fn max_terminal_error(&self) -> f64 {
        self.0.max_terminal_error()
    }
}

fn options(
    max_iterations: usize,
    initial_control: Option<&PyControlSignal>,
    checkpoints: Option<Vec<usize>>,
) -> core::SolverOptions {
    let mut o = core::SolverOptions::default().with_max_iterations(max_iterations);
    o.initial_control = initial_control.map(|u| u.0.clone());
    o.checkpoints = checkpoints.unwrap_or_default();
    o.record_trace = true;
    o.trace_every = (max_iterations / 1000).max(1);
    o
}

/// `count` equally spaced values on `[lo, hi]`.
#[pyfunction]
fn sample_parameters(lo: f64, hi: f64, count: usize) -> PyResult<Vec<f64>> {
    core::sample_parameters(lo, hi, count).map_err(err)
}

/// Weighted projections from `initial_control` (zero by default).
#[pyfunction]
#[pyo3(signature = (model, grid, boundary, max_iterations = 10_000, initial_control = None, checkpoints = None))]
fn solve_feasible(
    py: Python<'_>,
    model: &PyLinearModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    max_iterations: usize,
    initial_control: Option<PyControlSignal>,
    checkpoints: Option<Vec<usize>>,
) -> PyResult<PySolveReport> {
    let o = options(max_iterations, initial_control.as_ref(), checkpoints);
    py.detach(|| core::solve_feasible(&model.0, &grid.0, &boundary.0, &o))
        .map(PySolveReport)
        .map_err(err)
}

/// Weighted projections from zero, whose limit is the minimum-energy control.
#[pyfunction]
#[pyo3(signature = (model, grid, boundary, max_iterations = 10_000))]
fn solve_min_energy(
    py: Python<'_>,
    model: &PyLinearModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    max_iterations: usize,
) -> PyResult<PySolveReport> {
    let o = options(max_iterations, None, None);
    py.detach(|| core::solve_min_energy(&model.0, &grid.0, &boundary.0, &o))
        .map(PySolveReport)
        .map_err(err)
}

/// Weighted projections with an energy ball (`kind="ball"`) or amplitude box
/// (`kind="box"`) of size `bound` as one more set.
#[pyfunction]
#[pyo3(signature = (model, grid, boundary, kind, bound, per_channel = true, max_iterations = 10_000))]
#[allow(clippy::too_many_arguments)]
fn solve_constrained(
    py: Python<'_>,
    model: &PyLinearModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    kind: &str,
    bound: f64,
    per_channel: bool,
    max_iterations: usize,
) -> PyResult<PySolveReport> {
    let set = match kind {
        "ball" => {
            core::ConstraintSet::Ball(core::EnergyBall::new(bound, per_channel).map_err(err)?)
        }
        "box" => core::ConstraintSet::Box(core::AmplitudeBox::new(bound).map_err(err)?),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown constraint kind {other:?}"
            )))
        }
    };
    let o = options(max_iterations, None, None);
    py.detach(|| core::solve_constrained(&model.0, &grid.0, &boundary.0, set, &o))
        .map(PySolveReport)
        .map_err(err)
}

/// Closed-form limit of the iteration in a Legendre basis of `order` per channel.
#[pyfunction]
#[pyo3(signature = (model, grid, boundary, order, reach_tol = core::DEFAULT_REACH_TOL))]
fn solve_spectral(
    py: Python<'_>,
    model: &PyLinearModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    order: usize,
    reach_tol: f64,
) -> PyResult<PySolveReport> {
    py.detach(|| {
        let basis = core::legendre_basis(order, &grid.0)?;
        let op = core::build_spectral(
            &model.0,
            &grid.0,
            &boundary.0,
            &basis,
            &core::SolverOptions::default(),
        )?;
        let mu0 = core::Coordinates::zeros(order, model.0.input_dim());
        core::spectral_evidence(&model.0, &grid.0, &boundary.0, &op, &mu0, reach_tol)
    })
    .map(PySolveReport)
    .map_err(err)
}

/// Reachability verdict (`"reachable"`, `"not_reachable"` or `"inconclusive"`)
/// with the report of the run behind it.
#[pyfunction]
#[pyo3(signature = (model, grid, boundary, method = "iterative", order = None, reach_tol = core::DEFAULT_REACH_TOL, max_iterations = 10_000))]
#[allow(clippy::too_many_arguments)]
fn assess_reachability(
    py: Python<'_>,
    model: &PyLinearModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    method: &str,
    order: Option<usize>,
    reach_tol: f64,
    max_iterations: usize,
) -> PyResult<(&'static str, PySolveReport)> {
    let method = match (method, order) {
        ("iterative", _) => core::ReachabilityMethod::Iterative,
        ("spectral", Some(order)) => core::ReachabilityMethod::Spectral { order },
        ("spectral", None) => return Err(PyValueError::new_err("spectral method needs an order")),
        (other, _) => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    let o = options(max_iterations, None, None);
    let r = py
        .detach(|| core::assess_reachability(&model.0, &grid.0, &boundary.0, &o, method, reach_tol))
        .map_err(err)?;
    Ok((r.verdict.name(), PySolveReport(r.evidence)))
}

#[pyfunction]
fn simulate_linear(
    model: &PyLinearModel,
    control: &PyControlSignal,
    initial: Vec<Vec<f64>>,
) -> PyResult<PyTrajectory> {
    core::simulate_linear(&model.0, &control.0, &vectors(initial))
        .map(PyTrajectory)
        .map_err(err)
}

#[pyfunction]
fn simulate_bloch(
    model: &PyBlochModel,
    control: &PyControlSignal,
    initial: Vec<Vec<f64>>,
) -> PyResult<PyTrajectory> {
    core::simulate_bilinear(&model.0, &control.0, &vectors(initial))
        .map(PyTrajectory)
        .map_err(err)
}

/// Iterative linearization of the Bloch ensemble. `seed` is a constant
/// starting control, one value per channel.
#[pyfunction]
#[pyo3(signature = (
    model, grid, boundary, outer_cap = 300, stop_tol = 5e-2, damping = 1.0,
    warm_start = false, relinearize = "true_dynamics", inner_iterations = 1000, seed = None
))]
#[allow(clippy::too_many_arguments)]
fn solve_bilinear(
    py: Python<'_>,
    model: &PyBlochModel,
    grid: &PyTimeGrid,
    boundary: &PyBoundary,
    outer_cap: usize,
    stop_tol: f64,
    damping: f64,
    warm_start: bool,
    relinearize: &str,
    inner_iterations: usize,
    seed: Option<Vec<f64>>,
) -> PyResult<PyBilinearReport> {
    let relinearize = match relinearize {
        "true_dynamics" => core::RelinearizeAbout::TrueDynamics,
        "frozen_model" => core::RelinearizeAbout::FrozenModel,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown relinearization {other:?}"
            )))
        }
    };
    let initial_control = seed
        .map(|s| core::ControlSignal::constant(grid.0, &s))
        .transpose()
        .map_err(err)?;
    let opts = core::BilinearOptions {
        inner: core::SolverOptions::default().with_max_iterations(inner_iterations),
        outer_cap,
        stop_tol,
        damping,
        warm_start,
        initial_control,
        relinearize,
        ..Default::default()
    };
    py.detach(|| core::solve_bilinear(&model.0, &grid.0, &boundary.0, &opts))
        .map(PyBilinearReport)
        .map_err(err)
}

#[pymodule]
mod ensemble_pocs {
    #[pymodule_export]
    use super::{
        assess_reachability, sample_parameters, simulate_bloch, simulate_linear, solve_bilinear,
        solve_constrained, solve_feasible, solve_min_energy, solve_spectral, EnsembleError,
        PyBilinearReport, PyBlochModel, PyBoundary, PyControlSignal, PyLinearModel, PySolveReport,
        PyTimeGrid, PyTrajectory,
    };
}
