use log::debug;

use super::{Classification, IterationTrace, SolveReport, SolverOptions, TraceRow};
use crate::error::{invalid, Result};
use crate::function_space::ControlSignal;
use crate::projections::ConstraintSet;

/// Iterate and per-set offsets of Dykstra's cyclic projections.
#[derive(Debug, Clone)]
pub struct DykstraState {
    pub iterate: ControlSignal,
    /// `I_i = P_i(y) − y` from the previous cycle; all zero for affine families.
    pub offsets: Vec<ControlSignal>,
}

impl DykstraState {
    fn new(u0: ControlSignal, count: usize) -> Self {
        let zero = ControlSignal::zeros(*u0.grid(), u0.channels());
        Self {
            iterate: u0,
            offsets: vec![zero; count],
        }
    }

    /// One full cycle over all sets. Returns the distance moved by the iterate.
    fn cycle(&mut self, sets: &[ConstraintSet], use_offsets: bool) -> Result<f64> {
        let start = self.iterate.clone();
        for (set, offset) in sets.iter().zip(self.offsets.iter_mut()) {
            let mut y = self.iterate.clone();
            if use_offsets {
                y.axpy(-1.0, offset)?;
            }
            let next = set.project(&y)?;
            if use_offsets {
                *offset = next.sub(&y)?;
            }
            self.iterate = next;
        }
        Ok(self.iterate.distance_unchecked(&start))
    }
}

/// Dykstra's algorithm: cyclic projections whose limit is the point of
/// `⋂ sets` nearest to `u0`. Offsets are dropped when every set is affine.
///
/// The iteration stops once a full cycle moves the iterate by less than
/// `stall_threshold · (1 + ‖u‖)` for `stall_window` consecutive cycles.
pub fn solve_dykstra(
    sets: &[ConstraintSet],
    u0: &ControlSignal,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if sets.is_empty() {
        return Err(invalid("Dykstra needs at least one set"));
    }
    let use_offsets = !sets.iter().all(|s| s.is_affine());
    let scale = 1.0
        + sets
            .iter()
            .filter_map(|s| s.as_affine())
            .map(|a| a.target().norm())
            .fold(0.0, f64::max);
    let tol = opts.residual_tol * scale;
    let trace_every = opts.trace_every.max(1);
    let diverge_at = opts.divergence_factor * (1.0 + u0.norm_l2());

    let mut state = DykstraState::new(u0.clone(), sets.len());
    let mut trace = IterationTrace::default();
    let mut checkpoints = Vec::new();
    let mut quiet = 0usize;
    let mut classification = Classification::IterationCap;
    let mut k = 0usize;
    let residuals = |u: &ControlSignal| -> Result<Vec<f64>> {
        sets.iter()
            .filter_map(|s| s.as_affine())
            .map(|a| a.residual(u))
            .collect()
    };

    while k < opts.max_iterations {
        let step = state.cycle(sets, use_offsets)?;
        k += 1;
        let norm = state.iterate.norm_l2();
        if opts.record_trace && k.is_multiple_of(trace_every) {
            let res = residuals(&state.iterate)?;
            trace.rows.push(TraceRow {
                iteration: k,
                control_norm: norm,
                max_residual: res.iter().fold(0.0, |a, &b| a.max(b)),
                step_size: step,
            });
        }
        if opts.checkpoints.contains(&k) {
            checkpoints.push((k, state.iterate.clone()));
        }
        if norm > diverge_at {
            classification = Classification::Diverged;
            break;
        }
        if step <= opts.stall_threshold * (1.0 + norm) {
            quiet += 1;
        } else {
            quiet = 0;
        }
        if quiet >= opts.stall_window.max(1) || (sets.len() == 1 && step == 0.0) {
            let feasible = sets
                .iter()
                .all(|s| s.contains(&state.iterate, tol.max(1e-9)).unwrap_or(false));
            classification = if feasible {
                Classification::ConvergedFeasible
            } else {
                Classification::ConvergedInfeasible
            };
            break;
        }
    }
    let residuals = residuals(&state.iterate)?;
    debug!("Dykstra stopped after {k} cycles: {classification}");
    let control = state.iterate;
    Ok(SolveReport {
        energy: control.energy(),
        control,
        classification,
        iterations: k,
        trace,
        residuals,
        checkpoints,
    })
}
