//! Iterative linearization of bilinear ensembles.
//!
//! `dX = A(β)X + Σ u_j B_j(β) X` is rewritten as `dX = A(β)X + B̃(X)u` with the
//! columns of `B̃(X)` equal to `B_j(β)X`. Freezing `X` along the previous
//! trajectory gives a time-varying linear ensemble, whose minimum-energy
//! control drives the next simulation of the true dynamics.

use log::{debug, info};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::ensemble_model::{
    simulate_bilinear, simulate_linear, BoundaryPair, DriftTable, FamilyTag, LinearEnsembleModel,
    Trajectory,
};
use crate::error::{invalid, shape, EnsembleError, Result};
use crate::function_space::{ControlSignal, TimeGrid};
use crate::solvers::{solve_feasible, solve_min_energy, SolverOptions};

/// `dX = A(β)X + Σ_j u_j B_j(β) X` sampled at finitely many parameters.
#[derive(Debug, Clone)]
pub struct BilinearEnsembleModel {
    bloch: bool,
    n: usize,
    m: usize,
    params: Vec<f64>,
    horizon: f64,
    /// Row-major n×n per sample.
    drift: Vec<Vec<f64>>,
    /// Per sample, one row-major n×n generator per input channel.
    generators: Vec<Vec<Vec<f64>>>,
}

impl BilinearEnsembleModel {
    pub fn new(
        params: Vec<f64>,
        horizon: f64,
        n: usize,
        m: usize,
        drift: impl Fn(f64) -> Vec<f64>,
        generators: impl Fn(f64) -> Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::build(false, params, horizon, n, m, drift, generators)
    }

    /// Bloch equations in the rotating frame, Larmor offset `ω` as parameter:
    /// `A = [[0,-ω,0],[ω,0,0],[0,0,0]]`, inputs rotating about the y and x axes.
    pub fn bloch(params: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::build(
            true,
            params,
            horizon,
            3,
            2,
            |w| vec![0.0, -w, 0.0, w, 0.0, 0.0, 0.0, 0.0, 0.0],
            |_| {
                vec![
                    vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0],
                ]
            },
        )
    }

    fn build(
        bloch: bool,
        params: Vec<f64>,
        horizon: f64,
        n: usize,
        m: usize,
        drift: impl Fn(f64) -> Vec<f64>,
        generators: impl Fn(f64) -> Vec<Vec<f64>>,
    ) -> Result<Self> {
        if params.is_empty() || params.iter().any(|b| !b.is_finite()) {
            return Err(invalid(
                "ensemble needs at least one finite parameter sample",
            ));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n == 0 || m == 0 {
            return Err(invalid("state and input dimensions must be positive"));
        }
        let drift: Vec<Vec<f64>> = params.iter().map(|&b| drift(b)).collect();
        let generators: Vec<Vec<Vec<f64>>> = params.iter().map(|&b| generators(b)).collect();
        for (i, (a, g)) in drift.iter().zip(&generators).enumerate() {
            if a.len() != n * n {
                return Err(shape(format!(
                    "drift of sample {i} has {} entries, expected {}",
                    a.len(),
                    n * n
                )));
            }
            if g.len() != m || g.iter().any(|b| b.len() != n * n) {
                return Err(shape(format!(
                    "sample {i} needs {m} generators of size {n}x{n}"
                )));
            }
            if a.iter().chain(g.iter().flatten()).any(|x| !x.is_finite()) {
                return Err(invalid(format!(
                    "sample {i} has non-finite system matrices"
                )));
            }
            if bloch && !g.iter().chain(std::iter::once(a)).all(|b| skew(b, n)) {
                return Err(invalid("Bloch generators must be skew-symmetric"));
            }
        }
        Ok(Self {
            bloch,
            n,
            m,
            params,
            horizon,
            drift,
            generators,
        })
    }

    pub fn is_bloch(&self) -> bool {
        self.bloch
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn drift_flat(&self, i: usize) -> &[f64] {
        &self.drift[i]
    }

    pub fn generators_flat(&self, i: usize) -> &[Vec<f64>] {
        &self.generators[i]
    }
}

fn skew(a: &[f64], n: usize) -> bool {
    (0..n).all(|r| (0..n).all(|c| a[r * n + c] == -a[c * n + r]))
}

/// Linear ensemble with the trajectory `x` frozen into the input matrix.
///
/// Drift stays `A(β_i)`; the input matrix at node `k` is `B̃(x_i(t_k))`.
pub fn linearize_about(
    model: &BilinearEnsembleModel,
    x: &Trajectory,
) -> Result<LinearEnsembleModel> {
    let grid = *x.grid();
    if x.len() != model.len() || x.state_dim() != model.n {
        return Err(shape(format!(
            "trajectory has {} samples of dimension {}, model has {} of dimension {}",
            x.len(),
            x.state_dim(),
            model.len(),
            model.n
        )));
    }
    if (grid.horizon() - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(shape("trajectory grid horizon differs from model horizon"));
    }
    let (n, m) = (model.n, model.m);
    let input: Vec<Vec<f64>> = (0..model.len())
        .into_par_iter()
        .map(|i| {
            let gens = &model.generators[i];
            let mut table = vec![0.0; grid.n_nodes() * n * m];
            for k in 0..grid.n_nodes() {
                let xs = x.state(i, k);
                let block = &mut table[k * n * m..(k + 1) * n * m];
                for (c, g) in gens.iter().enumerate() {
                    for r in 0..n {
                        block[r * m + c] = (0..n).map(|j| g[r * n + j] * xs[j]).sum();
                    }
                }
            }
            table
        })
        .collect();
    let drift = model
        .drift
        .iter()
        .cloned()
        .map(DriftTable::Constant)
        .collect();
    let tag = if model.bloch {
        FamilyTag::BlochLinearized
    } else {
        FamilyTag::CustomTabulated
    };
    LinearEnsembleModel::tabulated(tag, model.params.clone(), grid, n, m, drift, input)
}

/// Which trajectory the next round is linearized about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelinearizeAbout {
    /// The true bilinear dynamics simulated under the new control.
    TrueDynamics,
    /// The frozen linear model's own trajectory under the new control, which
    /// meets the targets whenever the inner solve does.
    FrozenModel,
}

/// Settings of the outer linearization loop.
#[derive(Debug, Clone)]
pub struct BilinearOptions {
    /// Options of the inner minimum-energy solve on each frozen model.
    pub inner: SolverOptions,
    pub outer_cap: usize,
    /// Stop once every terminal error is below this.
    pub stop_tol: f64,
    /// `U ← γ U_inner + (1 − γ) U`, with `γ` in (0, 1].
    pub damping: f64,
    /// Start each inner solve from the current control instead of zero.
    pub warm_start: bool,
    /// `U⁽⁰⁾`; zero when absent.
    pub initial_control: Option<ControlSignal>,
    /// Abort once the max terminal error exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    pub relinearize: RelinearizeAbout,
}

impl Default for BilinearOptions {
    fn default() -> Self {
        Self {
            inner: SolverOptions::default().with_max_iterations(1000),
            outer_cap: 300,
            stop_tol: 5e-2,
            damping: 1.0,
            warm_start: false,
            initial_control: None,
            divergence_factor: 10.0,
            relinearize: RelinearizeAbout::TrueDynamics,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilinearReport {
    pub control: ControlSignal,
    /// Trajectory of the true dynamics under `control`.
    pub trajectory: Trajectory,
    /// Per-sample terminal errors of `trajectory`.
    pub terminal_errors: Vec<f64>,
    /// Max terminal error of `X⁽ᵏ⁾`, starting with `k = 0`.
    pub outer_errors: Vec<f64>,
    /// `‖U⁽ᵏ⁾‖`, aligned with `outer_errors`.
    pub control_norms: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
    /// Number of linearize-solve-simulate rounds performed.
    pub outer_iterations: usize,
}

impl BilinearReport {
    pub fn max_terminal_error(&self) -> f64 {
        self.terminal_errors.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// CSV with header `outer_iter,max_terminal_error,control_energy`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("outer_iter,max_terminal_error,control_energy\n");
        for (k, (e, n)) in self
            .outer_errors
            .iter()
            .zip(&self.control_norms)
            .enumerate()
        {
            s.push_str(&format!("{k},{e:.16e},{:.16e}\n", n * n));
        }
        s
    }
}

fn max_error(x: &Trajectory, targets: &[DVector<f64>]) -> f64 {
    x.terminal_errors(targets).into_iter().fold(0.0, f64::max)
}

/// Alternate frozen-model minimum-energy solves with simulations of the true
/// bilinear dynamics until every terminal error drops below `stop_tol`.
pub fn solve_bilinear(
    model: &BilinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    opts: &BilinearOptions,
) -> Result<BilinearReport> {
    boundary.check(model.len(), model.n)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(invalid(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    if opts.stop_tol.is_nan() || opts.stop_tol <= 0.0 {
        return Err(invalid("stopping tolerance must be positive"));
    }
    let mut control = match &opts.initial_control {
        Some(u) => {
            if u.grid() != grid || u.channels() != model.m {
                return Err(shape(
                    "initial control does not match grid and input dimension",
                ));
            }
            u.clone()
        }
        None => ControlSignal::zeros(*grid, model.m),
    };
    let targets = &boundary.target;
    let mut x = simulate_bilinear(model, &control, &boundary.initial)?;
    let initial_error = max_error(&x, targets);
    let mut outer_errors = vec![initial_error];
    let mut control_norms = vec![control.norm_l2()];
    let mut converged = initial_error < opts.stop_tol;
    let mut diverged = false;
    let mut k = 0;

    while !converged && k < opts.outer_cap {
        let frozen = linearize_about(model, &x)?;
        let tag_outer = |e: EnsembleError| match e {
            EnsembleError::SingularGramian {
                sample,
                min_eig,
                max_eig,
                ..
            } => EnsembleError::SingularGramian {
                sample,
                min_eig,
                max_eig,
                outer: Some(k),
            },
            other => other,
        };
        let inner = if opts.warm_start {
            let inner_opts = opts.inner.clone().with_initial_control(control.clone());
            solve_feasible(&frozen, grid, boundary, &inner_opts)
        } else {
            solve_min_energy(&frozen, grid, boundary, &opts.inner)
        }
        .map_err(tag_outer)?;
        let mut next = inner.control.scaled(opts.damping);
        if opts.damping < 1.0 {
            next.axpy(1.0 - opts.damping, &control)?;
        }
        control = next;
        let truth = simulate_bilinear(model, &control, &boundary.initial)?;
        k += 1;
        let err = max_error(&truth, targets);
        x = match opts.relinearize {
            RelinearizeAbout::TrueDynamics => truth,
            RelinearizeAbout::FrozenModel => simulate_linear(&frozen, &control, &boundary.initial)?,
        };
        debug!(
            "outer iteration {k}: max terminal error {err:.3e}, inner {}",
            inner.classification
        );
        outer_errors.push(err);
        control_norms.push(control.norm_l2());
        if err < opts.stop_tol {
            converged = true;
        } else if err > opts.divergence_factor * initial_error {
            diverged = true;
            break;
        }
    }
    info!(
        "bilinear loop stopped after {k} outer iterations, converged = {converged}, max error {:.3e}",
        outer_errors.last().copied().unwrap_or(f64::NAN)
    );
    if opts.relinearize == RelinearizeAbout::FrozenModel {
        x = simulate_bilinear(model, &control, &boundary.initial)?;
    }
    Ok(BilinearReport {
        terminal_errors: x.terminal_errors(targets),
        control,
        trajectory: x,
        outer_errors,
        control_norms,
        converged,
        diverged,
        outer_iterations: k,
    })
}
