//! Iterative weighted projections, Dykstra's cyclic projections, the
//! closed-form spectral limit, and reachability verdicts built on them.

mod dykstra;
mod reachability;
mod spectral;
mod weighted;

pub use dykstra::{solve_dykstra, DykstraState};
pub use reachability::{
    assess_reachability, spectral_evidence, ReachabilityMethod, ReachabilityReport, Verdict,
    DEFAULT_REACH_TOL,
};
pub use spectral::{build_spectral, solve_spectral, SpectralOperator};
pub use weighted::{
    affine_sets, solve_constrained, solve_feasible, solve_min_energy, weighted_projection_step,
};

use crate::error::{invalid, Result};
use crate::function_space::ControlSignal;

/// Stopping rules and bookkeeping for the iterative solvers.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Convex weights; `None` means uniform. With a constraint set the first
    /// weight belongs to it.
    pub weights: Option<Vec<f64>>,
    pub max_iterations: usize,
    /// Residual tolerance, relative to `1 + max_i ‖ξ_i‖`.
    pub residual_tol: f64,
    /// Consecutive iterations a stall condition must hold.
    pub stall_window: usize,
    /// Relative step size below which the iteration counts as stationary.
    pub stall_threshold: f64,
    /// Divergence when `‖u‖ > divergence_factor · (1 + ‖u⁽⁰⁾‖)`.
    pub divergence_factor: f64,
    pub record_trace: bool,
    /// Record one trace row every this many iterations (0 is treated as 1).
    pub trace_every: usize,
    /// Iteration counts at which to keep a copy of the iterate.
    pub checkpoints: Vec<usize>,
    /// Starting control; zero when absent.
    pub initial_control: Option<ControlSignal>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            weights: None,
            max_iterations: 10_000,
            residual_tol: 1e-6,
            stall_window: 100,
            stall_threshold: 1e-12,
            divergence_factor: 1e8,
            record_trace: false,
            trace_every: 1,
            checkpoints: Vec::new(),
            initial_control: None,
        }
    }
}

impl SolverOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_initial_control(mut self, u: ControlSignal) -> Self {
        self.initial_control = Some(u);
        self
    }

    /// Weights for `count` sets, validated to lie in (0,1] and sum to one.
    pub(crate) fn resolve_weights(&self, count: usize) -> Result<Vec<f64>> {
        let w = match &self.weights {
            None => vec![1.0 / count as f64; count],
            Some(w) => w.clone(),
        };
        if w.len() != count {
            return Err(invalid(format!(
                "{} weights given for {count} sets",
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(invalid("weights must lie in (0, 1]"));
        }
        if count > 1 && w.iter().any(|&x| x >= 1.0) {
            return Err(invalid("with several sets every weight must lie in (0, 1)"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("weights must sum to 1, got {sum}")));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    ConvergedFeasible,
    ConvergedInfeasible,
    Diverged,
    Stalled,
    IterationCap,
}

impl Classification {
    pub fn name(&self) -> &'static str {
        match self {
            Classification::ConvergedFeasible => "converged_feasible",
            Classification::ConvergedInfeasible => "converged_infeasible",
            Classification::Diverged => "diverged",
            Classification::Stalled => "stalled",
            Classification::IterationCap => "iteration_cap",
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub control_norm: f64,
    pub max_residual: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    pub rows: Vec<TraceRow>,
}

impl IterationTrace {
    /// CSV with header `iter,control_norm,max_residual,step_size`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,control_norm,max_residual,step_size\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.iteration, r.control_norm, r.max_residual, r.step_size
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub control: ControlSignal,
    pub classification: Classification,
    /// Number of update steps applied.
    pub iterations: usize,
    pub trace: IterationTrace,
    /// `‖L_i u − ξ_i‖` for every affine set, in set order.
    pub residuals: Vec<f64>,
    pub energy: f64,
    /// Copies of the iterate at the requested iteration counts.
    pub checkpoints: Vec<(usize, ControlSignal)>,
}

impl SolveReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, &b| a.max(b))
    }
}
