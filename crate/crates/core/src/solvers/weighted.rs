use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Classification, IterationTrace, SolveReport, SolverOptions, TraceRow};
use crate::ensemble_model::{steering_operator, target_vector, BoundaryPair, LinearEnsembleModel};
use crate::error::{invalid, shape, Result};
use crate::function_space::{ControlSignal, TimeGrid};
use crate::projections::{AffineSteeringSet, ConstraintSet};

/// Admissible control sets `C_i` of every sample.
pub fn affine_sets(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
) -> Result<Vec<AffineSteeringSet>> {
    boundary.check(model.len(), model.state_dim())?;
    (0..model.len())
        .into_par_iter()
        .map(|i| {
            let op = steering_operator(model, grid, i)?;
            let xi = target_vector(model, i, boundary)?;
            AffineSteeringSet::new(op, xi)
        })
        .collect()
}

/// Workspace for one Jacobi sweep over all sets.
struct Sweep {
    acc: Vec<f64>,
    scratch: Vec<f64>,
    residuals: Vec<f64>,
}

impl Sweep {
    fn new(u: &ControlSignal, sets: &[ConstraintSet]) -> Self {
        let n = sets
            .iter()
            .filter_map(|s| s.as_affine())
            .map(|a| a.operator().state_dim())
            .max()
            .unwrap_or(0);
        Self {
            acc: vec![0.0; u.samples().len()],
            scratch: vec![0.0; n],
            residuals: Vec::with_capacity(sets.len()),
        }
    }

    /// `acc = Σ_j w_j P_j(u)`, every projection taken from the same `u`.
    /// Also records `‖L_i u − ξ_i‖` of each affine set.
    fn run(&mut self, u: &ControlSignal, sets: &[ConstraintSet], weights: &[f64]) -> Result<()> {
        self.acc.iter_mut().for_each(|x| *x = 0.0);
        self.residuals.clear();
        let mut affine_weight = 0.0;
        for (set, &w) in sets.iter().zip(weights) {
            match set {
                ConstraintSet::Affine(a) => {
                    let n = a.operator().state_dim();
                    let defect = &mut self.scratch[..n];
                    let c = a.correction(u.samples(), defect);
                    self.residuals
                        .push(defect.iter().map(|d| d * d).sum::<f64>().sqrt());
                    a.operator()
                        .adjoint_accumulate(c.as_slice(), -w, &mut self.acc);
                    affine_weight += w;
                }
                other => {
                    other.project_accumulate(u, w, &mut self.acc, &mut self.scratch)?;
                }
            }
        }
        if affine_weight != 0.0 {
            self.acc
                .iter_mut()
                .zip(u.samples())
                .for_each(|(x, y)| *x += affine_weight * y);
        }
        Ok(())
    }
}

fn check_sets(u: &ControlSignal, sets: &[ConstraintSet]) -> Result<()> {
    if sets.is_empty() {
        return Err(invalid("at least one constraint set is required"));
    }
    for s in sets {
        if let Some(a) = s.as_affine() {
            u.grid().ensure_same(a.operator().grid())?;
            if u.channels() != a.operator().input_dim() {
                return Err(shape(format!(
                    "control has {} channels, steering operator expects {}",
                    u.channels(),
                    a.operator().input_dim()
                )));
            }
        }
    }
    Ok(())
}

/// One weighted projection step `Σ_j λ_j P_j(u)`.
pub fn weighted_projection_step(
    u: &ControlSignal,
    sets: &[ConstraintSet],
    weights: &[f64],
) -> Result<ControlSignal> {
    check_sets(u, sets)?;
    if weights.len() != sets.len() {
        return Err(invalid(format!(
            "{} weights given for {} sets",
            weights.len(),
            sets.len()
        )));
    }
    let mut sweep = Sweep::new(u, sets);
    sweep.run(u, sets, weights)?;
    ControlSignal::from_samples(*u.grid(), u.channels(), sweep.acc)
}

fn residual_scale(sets: &[ConstraintSet]) -> f64 {
    1.0 + sets
        .iter()
        .filter_map(|s| s.as_affine())
        .map(|a| a.target().norm())
        .fold(0.0, f64::max)
}

/// The iterate of the weighted projection map together with what one
/// stopping decision needs.
trait Engine {
    /// Residuals of the current iterate and the pending update.
    fn evaluate(&mut self) -> Result<()>;
    fn residuals(&self) -> &[f64];
    fn norm(&self) -> f64;
    /// Apply the pending update; returns the step length and the new norm.
    fn advance(&mut self) -> Result<(f64, f64)>;
    fn control(&self) -> Result<ControlSignal>;
}

/// Iterates stored as grid samples; handles every kind of set.
struct GridEngine<'a> {
    sets: &'a [ConstraintSet],
    weights: Vec<f64>,
    u: ControlSignal,
    sweep: Sweep,
}

impl Engine for GridEngine<'_> {
    fn evaluate(&mut self) -> Result<()> {
        self.sweep.run(&self.u, self.sets, &self.weights)
    }

    fn residuals(&self) -> &[f64] {
        &self.sweep.residuals
    }

    fn norm(&self) -> f64 {
        self.u.norm_l2()
    }

    fn advance(&mut self) -> Result<(f64, f64)> {
        let next = ControlSignal::from_samples(
            *self.u.grid(),
            self.u.channels(),
            std::mem::take(&mut self.sweep.acc),
        )?;
        let step = next.distance_unchecked(&self.u);
        self.sweep.acc = std::mem::replace(&mut self.u, next).into_samples();
        Ok((step, self.u.norm_l2()))
    }

    fn control(&self) -> Result<ControlSignal> {
        Ok(self.u.clone())
    }
}

/// Iterates of an all-affine family kept as `u = u⁽⁰⁾ + Σ_i L_i* c_i`.
///
/// Every update of the map lies in the range of the adjoints, so the iteration
/// only needs the cross Gramians `L_i L_j*`; the grid is touched again only to
/// measure tiny steps and to rebuild the control.
struct DualEngine<'a> {
    sets: Vec<&'a AffineSteeringSet>,
    weights: Vec<f64>,
    offsets: Vec<usize>,
    cross: DMatrix<f64>,
    base: DVector<f64>,
    u0: ControlSignal,
    u0_sq: f64,
    coeffs: DVector<f64>,
    image: DVector<f64>,
    pending: DVector<f64>,
    residuals: Vec<f64>,
    norm: f64,
    /// Steps below this relative size are re-measured on the grid.
    exact_below: f64,
}

/// Largest stacked state dimension handled in coefficient form.
const DUAL_MAX_DIM: usize = 4096;

impl<'a> DualEngine<'a> {
    fn try_new(
        sets: &'a [ConstraintSet],
        weights: &[f64],
        u0: &ControlSignal,
        stall_threshold: f64,
    ) -> Option<Self> {
        let sets: Vec<&AffineSteeringSet> =
            sets.iter().map(|s| s.as_affine()).collect::<Option<_>>()?;
        let grid = *u0.grid();
        let m = u0.channels();
        let mut offsets = Vec::with_capacity(sets.len() + 1);
        let mut dim = 0;
        for s in &sets {
            offsets.push(dim);
            dim += s.operator().state_dim();
        }
        offsets.push(dim);
        let cols = grid.n_nodes() * m;
        if dim > DUAL_MAX_DIM || dim >= cols {
            return None;
        }
        // rows of K scaled by the square roots of the quadrature weights
        let mut k = DMatrix::<f64>::zeros(dim, cols);
        for (s, &off) in sets.iter().zip(&offsets) {
            let op = s.operator();
            let n = op.state_dim();
            for node in 0..grid.n_nodes() {
                let w = grid.weight(node).sqrt();
                let kern = op.kernel_at(node);
                for r in 0..n {
                    for c in 0..m {
                        k[(off + r, node * m + c)] = w * kern[r * m + c];
                    }
                }
            }
        }
        let cross = &k * k.transpose();
        let mut base = DVector::<f64>::zeros(dim);
        for (s, &off) in sets.iter().zip(&offsets) {
            let n = s.operator().state_dim();
            s.operator()
                .apply_into(u0.samples(), &mut base.as_mut_slice()[off..off + n]);
        }
        let u0_sq = u0.energy();
        Some(Self {
            residuals: Vec::with_capacity(sets.len()),
            sets,
            weights: weights.to_vec(),
            offsets,
            cross,
            image: base.clone(),
            base,
            u0: u0.clone(),
            u0_sq,
            coeffs: DVector::zeros(dim),
            pending: DVector::zeros(dim),
            norm: u0_sq.sqrt(),
            exact_below: 1e4 * stall_threshold,
        })
    }

    /// `L u` of the current iterate and its norm.
    fn refresh(&mut self) {
        self.image = &self.base + &self.cross * &self.coeffs;
        let quad = self.coeffs.dot(&(&self.image - &self.base));
        self.norm = (self.u0_sq + 2.0 * self.coeffs.dot(&self.base) + quad)
            .max(0.0)
            .sqrt();
    }

    /// `‖Σ_i L_i* v_i‖` evaluated on the grid.
    fn grid_norm(&self, v: &DVector<f64>) -> Result<f64> {
        let mut acc = vec![0.0; self.u0.samples().len()];
        for (i, s) in self.sets.iter().enumerate() {
            let block = &v.as_slice()[self.offsets[i]..self.offsets[i + 1]];
            s.operator().adjoint_accumulate(block, 1.0, &mut acc);
        }
        Ok(ControlSignal::from_samples(*self.u0.grid(), self.u0.channels(), acc)?.norm_l2())
    }
}

impl Engine for DualEngine<'_> {
    fn evaluate(&mut self) -> Result<()> {
        self.residuals.clear();
        for (i, s) in self.sets.iter().enumerate() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            let defect = self.image.rows(lo, hi - lo) - s.target();
            self.residuals.push(defect.norm());
            let g = s.gramian().solve(&defect) * self.weights[i];
            self.pending.rows_mut(lo, hi - lo).copy_from(&g);
        }
        Ok(())
    }

    fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    fn norm(&self) -> f64 {
        self.norm
    }

    fn advance(&mut self) -> Result<(f64, f64)> {
        let mut step = self
            .pending
            .dot(&(&self.cross * &self.pending))
            .max(0.0)
            .sqrt();
        self.coeffs -= &self.pending;
        self.refresh();
        // the quadratic form loses relative accuracy on tiny steps, which
        // matters only near the stall threshold
        if step <= self.exact_below * (1.0 + self.norm) {
            step = self.grid_norm(&self.pending)?;
        }
        Ok((step, self.norm))
    }

    fn control(&self) -> Result<ControlSignal> {
        let mut u = self.u0.clone();
        for (i, s) in self.sets.iter().enumerate() {
            let block = &self.coeffs.as_slice()[self.offsets[i]..self.offsets[i + 1]];
            s.operator().adjoint_accumulate(block, 1.0, u.samples_mut());
        }
        Ok(u)
    }
}

/// Run the weighted projection iteration from `u0` until a stopping rule fires.
pub(crate) fn iterate(
    sets: &[ConstraintSet],
    u0: ControlSignal,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    check_sets(&u0, sets)?;
    let weights = opts.resolve_weights(sets.len())?;
    match DualEngine::try_new(sets, &weights, &u0, opts.stall_threshold) {
        Some(engine) => run(engine, sets, opts),
        None => {
            let sweep = Sweep::new(&u0, sets);
            let engine = GridEngine {
                sets,
                weights,
                u: u0,
                sweep,
            };
            run(engine, sets, opts)
        }
    }
}

/// Grid-only iteration, kept for cross-checking the coefficient form.
#[cfg(test)]
pub(crate) fn iterate_on_grid(
    sets: &[ConstraintSet],
    u0: ControlSignal,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    check_sets(&u0, sets)?;
    let weights = opts.resolve_weights(sets.len())?;
    let sweep = Sweep::new(&u0, sets);
    let engine = GridEngine {
        sets,
        weights,
        u: u0,
        sweep,
    };
    run(engine, sets, opts)
}

fn run<E: Engine>(mut e: E, sets: &[ConstraintSet], opts: &SolverOptions) -> Result<SolveReport> {
    let tol = opts.residual_tol * residual_scale(sets);
    let diverge_at = opts.divergence_factor * (1.0 + e.norm());
    let trace_every = opts.trace_every.max(1);
    let window = opts.stall_window.max(1);
    let mut trace = IterationTrace::default();
    let mut checkpoints = Vec::new();
    let mut tiny_steps = 0usize;
    let mut recent_steps: std::collections::VecDeque<f64> = Default::default();
    let classification;
    let mut k = 0usize;

    loop {
        e.evaluate()?;
        let max_res = e.residuals().iter().fold(0.0_f64, |a, &b| a.max(b));
        let unorm = e.norm();
        if opts.checkpoints.contains(&k) {
            checkpoints.push((k, e.control()?));
        }
        if !e.residuals().is_empty() && max_res <= tol {
            classification = Classification::ConvergedFeasible;
        } else if k >= opts.max_iterations {
            classification = Classification::IterationCap;
        } else {
            let (step, next_norm) = e.advance()?;
            if opts.record_trace && k.is_multiple_of(trace_every) {
                trace.rows.push(TraceRow {
                    iteration: k,
                    control_norm: unorm,
                    max_residual: max_res,
                    step_size: step,
                });
            }
            k += 1;
            if next_norm.is_nan() || next_norm > diverge_at {
                classification = Classification::Diverged;
                e.evaluate()?;
                break;
            }
            if step <= opts.stall_threshold * (1.0 + next_norm) {
                tiny_steps += 1;
            } else {
                tiny_steps = 0;
            }
            recent_steps.push_back(step);
            if recent_steps.len() > window + 1 {
                recent_steps.pop_front();
            }
            if tiny_steps >= window {
                classification = if e.residuals().is_empty() {
                    Classification::ConvergedFeasible
                } else {
                    Classification::ConvergedInfeasible
                };
                // residuals below refer to the final iterate
                e.evaluate()?;
                break;
            }
            // Averaged projections never lengthen their steps; a step that has
            // not shrunk over a whole window signals drift rather than progress.
            if recent_steps.len() == window + 1
                && tiny_steps == 0
                && step >= recent_steps[0]
                && !e.residuals().is_empty()
            {
                classification = Classification::Stalled;
                e.evaluate()?;
                break;
            }
            continue;
        }
        if opts.record_trace {
            trace.rows.push(TraceRow {
                iteration: k,
                control_norm: unorm,
                max_residual: max_res,
                step_size: 0.0,
            });
        }
        break;
    }

    let control = e.control()?;
    for &c in &opts.checkpoints {
        if c > k && c <= opts.max_iterations && classification == Classification::ConvergedFeasible
        {
            checkpoints.push((c, control.clone()));
        }
    }
    let residuals = e.residuals().to_vec();
    debug!(
        "weighted projections stopped after {k} iterations: {classification} (max residual {:.3e})",
        residuals.iter().fold(0.0_f64, |a, &b| a.max(b))
    );
    Ok(SolveReport {
        energy: control.energy(),
        residuals,
        control,
        classification,
        iterations: k,
        trace,
        checkpoints,
    })
}

fn initial_control(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<ControlSignal> {
    match &opts.initial_control {
        Some(u) => {
            grid.ensure_same(u.grid())?;
            if u.channels() != model.input_dim() {
                return Err(shape(format!(
                    "initial control has {} channels, model expects {}",
                    u.channels(),
                    model.input_dim()
                )));
            }
            Ok(u.clone())
        }
        None => Ok(ControlSignal::zeros(*grid, model.input_dim())),
    }
}

/// Feasible broadcast control by the Jacobi weighted projection iteration.
pub fn solve_feasible(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let u0 = initial_control(model, grid, opts)?;
    let sets: Vec<ConstraintSet> = affine_sets(model, grid, boundary)?
        .into_iter()
        .map(ConstraintSet::Affine)
        .collect();
    iterate(&sets, u0, opts)
}

/// Minimum-energy broadcast control: the same iteration started from zero.
pub fn solve_min_energy(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let mut opts = opts.clone();
    opts.initial_control = None;
    solve_feasible(model, grid, boundary, &opts)
}

/// Weighted projections onto `G, C_1, …, C_N`, finished by one projection onto `G`.
pub fn solve_constrained(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    constraint: ConstraintSet,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if constraint.is_affine() {
        return Err(invalid("the input constraint must be a ball or a box"));
    }
    let u0 = initial_control(model, grid, opts)?;
    let mut sets = Vec::with_capacity(model.len() + 1);
    sets.push(constraint);
    sets.extend(
        affine_sets(model, grid, boundary)?
            .into_iter()
            .map(ConstraintSet::Affine),
    );
    let mut report = iterate(&sets, u0, opts)?;
    let g = &sets[0];
    report.control = g.project(&report.control)?;
    report.energy = report.control.energy();
    report.residuals = sets[1..]
        .iter()
        .filter_map(|s| s.as_affine())
        .map(|a| a.residual(&report.control))
        .collect::<Result<_>>()?;
    Ok(report)
}
