//! Exact projections onto affine steering sets, energy balls and amplitude boxes.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::ensemble_model::SteeringOperator;
use crate::error::{invalid, shape, EnsembleError, Result};
use crate::function_space::ControlSignal;

/// Relative eigenvalue floor below which a Gramian counts as singular.
pub const SINGULAR_GRAMIAN_RTOL: f64 = 1e-10;
/// Condition number above which a Gramian solve is reported as ill-conditioned.
pub const ILL_CONDITIONED: f64 = 1e8;

/// `W = L L*` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub matrix: DMatrix<f64>,
    pub factor: Cholesky<f64, Dyn>,
    pub condition: f64,
}

impl Gramian {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }
}

/// Assemble `W = ∫ K(σ)K(σ)' dσ` by quadrature and factor it.
pub fn gramian(op: &SteeringOperator) -> Result<Gramian> {
    let n = op.state_dim();
    let m = op.input_dim();
    let grid = *op.grid();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for k in 0..grid.n_nodes() {
        let kern = op.kernel_at(k);
        let wt = grid.weight(k);
        for a in 0..n {
            for b in a..n {
                let mut s = 0.0;
                for c in 0..m {
                    s += kern[a * m + c] * kern[b * m + c];
                }
                w[(a, b)] += wt * s;
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            w[(a, b)] = w[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(w.clone());
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if max_eig.is_nan() || max_eig <= 0.0 || min_eig <= SINGULAR_GRAMIAN_RTOL * max_eig {
        return Err(EnsembleError::SingularGramian {
            sample: op.sample(),
            min_eig,
            max_eig,
            outer: None,
        });
    }
    let condition = max_eig / min_eig;
    if condition > ILL_CONDITIONED {
        warn!(
            "Gramian of sample {} is ill-conditioned (condition {condition:.3e})",
            op.sample()
        );
    }
    let factor = Cholesky::new(w.clone()).ok_or(EnsembleError::SingularGramian {
        sample: op.sample(),
        min_eig,
        max_eig,
        outer: None,
    })?;
    Ok(Gramian {
        matrix: w,
        factor,
        condition,
    })
}

/// `C_i = {u : L_i u = ξ_i}`.
#[derive(Debug, Clone)]
pub struct AffineSteeringSet {
    op: SteeringOperator,
    target: DVector<f64>,
    gramian: Gramian,
}

impl AffineSteeringSet {
    pub fn new(op: SteeringOperator, target: DVector<f64>) -> Result<Self> {
        if target.len() != op.state_dim() {
            return Err(shape(format!(
                "target has dimension {}, operator maps to {}",
                target.len(),
                op.state_dim()
            )));
        }
        let gramian = gramian(&op)?;
        Ok(Self {
            op,
            target,
            gramian,
        })
    }

    pub fn operator(&self) -> &SteeringOperator {
        &self.op
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn gramian(&self) -> &Gramian {
        &self.gramian
    }

    /// `L u − ξ`.
    pub fn defect(&self, u: &ControlSignal) -> Result<DVector<f64>> {
        Ok(self.op.apply(u)? - &self.target)
    }

    /// `‖L u − ξ‖`.
    pub fn residual(&self, u: &ControlSignal) -> Result<f64> {
        Ok(self.defect(u)?.norm())
    }

    /// Gramian-weighted correction `W⁻¹(L u − ξ)` for grid-ordered samples.
    pub(crate) fn correction(&self, samples: &[f64], defect: &mut [f64]) -> DVector<f64> {
        self.op.apply_into(samples, defect);
        for (d, t) in defect.iter_mut().zip(self.target.iter()) {
            *d -= t;
        }
        self.gramian.solve(&DVector::from_column_slice(defect))
    }

    pub fn project(&self, u: &ControlSignal) -> Result<ControlSignal> {
        let c = self.gramian.solve(&self.defect(u)?);
        let mut out = u.clone();
        self.op
            .adjoint_accumulate(c.as_slice(), -1.0, out.samples_mut());
        Ok(out)
    }
}

/// `{u : ‖u‖₂ ≤ M}`, per channel by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBall {
    pub radius: f64,
    /// Bound every channel's L² norm separately instead of the joint norm.
    pub per_channel: bool,
}

impl EnergyBall {
    pub fn new(radius: f64, per_channel: bool) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(invalid(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            radius,
            per_channel,
        })
    }

    pub fn project(&self, u: &ControlSignal) -> ControlSignal {
        let mut out = u.clone();
        let m = u.channels();
        if self.per_channel {
            for c in 0..m {
                let norm = u.channel_norm(c);
                if norm > self.radius {
                    let s = self.radius / norm;
                    out.samples_mut()
                        .iter_mut()
                        .skip(c)
                        .step_by(m)
                        .for_each(|x| *x *= s);
                }
            }
        } else {
            let norm = u.norm_l2();
            if norm > self.radius {
                out.scale(self.radius / norm);
            }
        }
        out
    }

    pub fn contains(&self, u: &ControlSignal, tol: f64) -> bool {
        if self.per_channel {
            (0..u.channels()).all(|c| u.channel_norm(c) <= self.radius + tol)
        } else {
            u.norm_l2() <= self.radius + tol
        }
    }
}

/// `{u : |u_c(t_k)| ≤ M}` for every channel and node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeBox {
    pub bound: f64,
}

impl AmplitudeBox {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(invalid(format!(
                "amplitude bound must be positive, got {bound}"
            )));
        }
        Ok(Self { bound })
    }

    pub fn project(&self, u: &ControlSignal) -> ControlSignal {
        let mut out = u.clone();
        out.samples_mut()
            .iter_mut()
            .for_each(|x| *x = x.clamp(-self.bound, self.bound));
        out
    }

    pub fn contains(&self, u: &ControlSignal, tol: f64) -> bool {
        u.max_abs() <= self.bound + tol
    }
}

#[derive(Debug, Clone)]
pub enum ConstraintSet {
    Affine(AffineSteeringSet),
    Ball(EnergyBall),
    Box(AmplitudeBox),
}

impl ConstraintSet {
    pub fn project(&self, u: &ControlSignal) -> Result<ControlSignal> {
        match self {
            ConstraintSet::Affine(a) => a.project(u),
            ConstraintSet::Ball(b) => Ok(b.project(u)),
            ConstraintSet::Box(b) => Ok(b.project(u)),
        }
    }

    pub fn contains(&self, u: &ControlSignal, tol: f64) -> Result<bool> {
        match self {
            ConstraintSet::Affine(a) => {
                let scale = 1.0 + a.target.norm();
                Ok(a.residual(u)? <= tol * scale)
            }
            ConstraintSet::Ball(b) => Ok(b.contains(u, tol)),
            ConstraintSet::Box(b) => Ok(b.contains(u, tol)),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, ConstraintSet::Affine(_))
    }

    pub fn as_affine(&self) -> Option<&AffineSteeringSet> {
        match self {
            ConstraintSet::Affine(a) => Some(a),
            _ => None,
        }
    }

    /// `acc += weight * P(u)` without materialising `P(u)` for affine sets.
    pub(crate) fn project_accumulate(
        &self,
        u: &ControlSignal,
        weight: f64,
        acc: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        match self {
            ConstraintSet::Affine(a) => {
                let c = a.correction(u.samples(), scratch);
                acc.iter_mut()
                    .zip(u.samples())
                    .for_each(|(x, y)| *x += weight * y);
                a.op.adjoint_accumulate(c.as_slice(), -weight, acc);
            }
            other => {
                let p = other.project(u)?;
                acc.iter_mut()
                    .zip(p.samples())
                    .for_each(|(x, y)| *x += weight * y);
            }
        }
        Ok(())
    }
}

pub fn project_affine(u: &ControlSignal, set: &AffineSteeringSet) -> Result<ControlSignal> {
    set.project(u)
}

pub fn project_ball(u: &ControlSignal, ball: &EnergyBall) -> ControlSignal {
    ball.project(u)
}

pub fn project_box(u: &ControlSignal, bx: &AmplitudeBox) -> ControlSignal {
    bx.project(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble_model::{steering_operator, LinearEnsembleModel};
    use crate::function_space::{make_time_grid, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn integrator(grid: TimeGrid, gain: f64) -> LinearEnsembleModel {
        LinearEnsembleModel::time_invariant(vec![gain], grid, 1, 1, |_| vec![0.0], |b| vec![b])
            .unwrap()
    }

    #[test]
    fn gramian_examples() {
        let grid = make_time_grid(1.0, 1000).unwrap();
        let osc = LinearEnsembleModel::harmonic_oscillator_2in(vec![0.0], 1.0).unwrap();
        let g = gramian(&steering_operator(&osc, &grid, 0).unwrap()).unwrap();
        assert_abs_diff_eq!(g.matrix, DMatrix::identity(2, 2), epsilon = 1e-12);

        let grid2 = make_time_grid(2.0, 400).unwrap();
        let g = gramian(&steering_operator(&integrator(grid2, 1.0), &grid2, 0).unwrap()).unwrap();
        assert_abs_diff_eq!(g.matrix[(0, 0)], 2.0, epsilon = 1e-12);

        let single = LinearEnsembleModel::harmonic_oscillator_1in(vec![0.0], 1.0).unwrap();
        let err = gramian(&steering_operator(&single, &grid, 0).unwrap()).unwrap_err();
        assert!(matches!(
            err,
            EnsembleError::SingularGramian { sample: 0, .. }
        ));
    }

    #[test]
    fn affine_examples() {
        let grid = make_time_grid(1.0, 1000).unwrap();
        let model = integrator(grid, 1.0);
        let set = AffineSteeringSet::new(
            steering_operator(&model, &grid, 0).unwrap(),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let p = project_affine(&ControlSignal::zeros(grid, 1), &set).unwrap();
        assert!(p.samples().iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let feasible = ControlSignal::from_fn(grid, 1, |t, u| u[0] = 2.0 * t);
        let p = project_affine(&feasible, &set).unwrap();
        assert!(p.distance(&feasible).unwrap() < 1e-9);

        let osc = LinearEnsembleModel::harmonic_oscillator_2in(vec![0.0], 1.0).unwrap();
        let set = AffineSteeringSet::new(
            steering_operator(&osc, &grid, 0).unwrap(),
            DVector::from_vec(vec![-1.0, 1.0]),
        )
        .unwrap();
        let p = project_affine(&ControlSignal::zeros(grid, 2), &set).unwrap();
        for k in 0..grid.n_nodes() {
            assert_abs_diff_eq!(p.at(k)[0], -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.at(k)[1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn affine_target_dimension_checked() {
        let grid = make_time_grid(1.0, 10).unwrap();
        let osc = LinearEnsembleModel::harmonic_oscillator_2in(vec![0.0], 1.0).unwrap();
        let op = steering_operator(&osc, &grid, 0).unwrap();
        assert!(AffineSteeringSet::new(op, DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn ball_examples() {
        let grid = make_time_grid(1.0, 100).unwrap();
        let u = ControlSignal::constant(grid, &[6.0, 8.0]).unwrap();
        let joint = EnergyBall::new(5.0, false).unwrap();
        let p = project_ball(&u, &joint);
        assert_abs_diff_eq!(p.at(3)[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at(3)[1], 4.0, epsilon = 1e-12);

        let small = ControlSignal::constant(grid, &[1.8, 2.4]).unwrap();
        assert_eq!(project_ball(&small, &joint), small);
        let edge = ControlSignal::constant(grid, &[3.0, 4.0]).unwrap();
        assert_eq!(project_ball(&edge, &joint), edge);

        let per = EnergyBall::new(5.0, true).unwrap();
        let p = project_ball(&u, &per);
        assert_abs_diff_eq!(p.at(0)[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.at(0)[1], 5.0, epsilon = 1e-12);
        assert!(per.contains(&p, 1e-12));
        assert!(EnergyBall::new(0.0, true).is_err());
    }

    #[test]
    fn box_examples() {
        let grid = make_time_grid(1.0, 2).unwrap();
        let bx = AmplitudeBox::new(5.0).unwrap();
        let u = ControlSignal::from_samples(grid, 1, vec![7.0, -7.0, 2.0]).unwrap();
        assert_eq!(project_box(&u, &bx).samples(), &[5.0, -5.0, 2.0]);
        let inside = ControlSignal::from_samples(grid, 1, vec![-5.0, 0.0, 4.9]).unwrap();
        assert_eq!(project_box(&inside, &bx), inside);
        assert!(AmplitudeBox::new(-1.0).is_err());
    }
}
