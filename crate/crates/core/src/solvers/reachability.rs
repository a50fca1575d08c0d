use super::{
    build_spectral, solve_feasible, solve_spectral, Classification, SolveReport, SolverOptions,
    SpectralOperator,
};
use crate::ensemble_model::{BoundaryPair, LinearEnsembleModel};
use crate::error::Result;
use crate::function_space::{legendre_basis, Coordinates, TimeGrid};
use crate::solvers::weighted::affine_sets;

/// Default bound on the per-sample residual for a reachable verdict.
pub const DEFAULT_REACH_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Reachable,
    NotReachable,
    Inconclusive,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Reachable => "reachable",
            Verdict::NotReachable => "not_reachable",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReachabilityMethod {
    /// Run the weighted projection iteration.
    Iterative,
    /// Evaluate its limit in closed form with a Legendre basis of this order.
    Spectral { order: usize },
}

#[derive(Debug, Clone)]
pub struct ReachabilityReport {
    pub verdict: Verdict,
    pub reach_tol: f64,
    /// Candidate control with its residuals and iteration evidence.
    pub evidence: SolveReport,
}

/// The spectral limit from `mu0` packaged as a solve report.
///
/// The limit is exact, so it counts as converged; it is feasible when every
/// residual is within `reach_tol`.
pub fn spectral_evidence(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    op: &SpectralOperator,
    mu0: &Coordinates,
    reach_tol: f64,
) -> Result<SolveReport> {
    let control = solve_spectral(op, mu0)?;
    let residuals = affine_sets(model, grid, boundary)?
        .iter()
        .map(|s| s.residual(&control))
        .collect::<Result<Vec<_>>>()?;
    let feasible = residuals.iter().all(|&r| r <= reach_tol);
    Ok(SolveReport {
        energy: control.energy(),
        control,
        classification: if feasible {
            Classification::ConvergedFeasible
        } else {
            Classification::ConvergedInfeasible
        },
        iterations: 0,
        trace: Default::default(),
        residuals,
        checkpoints: Vec::new(),
    })
}

/// Decide whether the targets are reachable from the initial states.
///
/// A converged or stationary iteration whose control misses some target by
/// more than `reach_tol` means the admissible sets do not intersect; a
/// control that meets every target within `reach_tol` is its own witness.
pub fn assess_reachability(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    opts: &SolverOptions,
    method: ReachabilityMethod,
    reach_tol: f64,
) -> Result<ReachabilityReport> {
    let evidence = match method {
        ReachabilityMethod::Iterative => solve_feasible(model, grid, boundary, opts)?,
        ReachabilityMethod::Spectral { order } => {
            let basis = legendre_basis(order, grid)?;
            let op = build_spectral(model, grid, boundary, &basis, opts)?;
            let mu0 = match &opts.initial_control {
                Some(u) => crate::function_space::to_coordinates(u, &basis)?,
                None => Coordinates::zeros(order, model.input_dim()),
            };
            spectral_evidence(model, grid, boundary, &op, &mu0, reach_tol)?
        }
    };
    let max_res = evidence.max_residual();
    let verdict = match evidence.classification {
        Classification::Diverged => Verdict::NotReachable,
        _ if max_res <= reach_tol => Verdict::Reachable,
        Classification::ConvergedInfeasible | Classification::Stalled => Verdict::NotReachable,
        // converged to the residual tolerance, which is looser than reach_tol
        Classification::ConvergedFeasible => Verdict::Inconclusive,
        Classification::IterationCap => Verdict::Inconclusive,
    };
    Ok(ReachabilityReport {
        verdict,
        reach_tol,
        evidence,
    })
}
