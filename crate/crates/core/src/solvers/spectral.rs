use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::{affine_sets, SolverOptions};
use crate::ensemble_model::{BoundaryPair, LinearEnsembleModel};
use crate::error::{shape, EnsembleError, Result};
use crate::function_space::{from_coordinates, BasisSet, ControlSignal, Coordinates, TimeGrid};
use crate::projections::AffineSteeringSet;

/// Eigenvalues of `I − W` within this distance of one are kept in `W∞`.
pub const UNIT_EIGENVALUE_TOL: f64 = 1e-8;
/// Allowed excursion of the spectrum of `I − W` outside `[0, 1]`.
pub const SPECTRUM_SLACK: f64 = 1e-6;
/// Relative singular-value cutoff of the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-12;

/// The averaged-projection map `u ↦ (I − Q)u + δ` restricted to a truncated basis.
///
/// Coordinates are ordered as in [`Coordinates`]: channel-major, `c * r + j`.
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    pub basis: BasisSet,
    pub channels: usize,
    /// Coordinates of `Q v_j` in column `j`.
    pub w: DMatrix<f64>,
    pub w_pinv: DMatrix<f64>,
    /// `lim (I − W)^k`.
    pub w_inf: DMatrix<f64>,
    /// Coordinates of `δ`.
    pub delta: DVector<f64>,
    /// Spectrum of `I − W`, ascending.
    pub eigenvalues: Vec<f64>,
}

/// `L_i v_j` for every basis element: an n × (r·m) matrix.
fn restricted_operator(set: &AffineSteeringSet, basis: &BasisSet) -> DMatrix<f64> {
    let op = set.operator();
    let (n, m) = (op.state_dim(), op.input_dim());
    let r = basis.order();
    let grid = op.grid();
    let mut out = DMatrix::<f64>::zeros(n, r * m);
    for j in 0..r {
        let phi = basis.function(j);
        let mut acc = vec![0.0; n * m];
        for (k, &p) in phi.iter().enumerate() {
            let w = grid.weight(k) * p;
            for (a, kern) in acc.iter_mut().zip(op.kernel_at(k)) {
                *a += w * kern;
            }
        }
        for row in 0..n {
            for c in 0..m {
                out[(row, c * r + j)] = acc[row * m + c];
            }
        }
    }
    out
}

/// Assemble `W`, its pseudo-inverse and limit, and the coordinates of `δ`.
///
/// With `M_i = L_i V` the coordinate matrix is `W = Σ λ_i M_i' (L_i L_i*)⁻¹ M_i`,
/// which is the matrix of `V' Q V`.
pub fn build_spectral(
    model: &LinearEnsembleModel,
    grid: &TimeGrid,
    boundary: &BoundaryPair,
    basis: &BasisSet,
    opts: &SolverOptions,
) -> Result<SpectralOperator> {
    grid.ensure_same(basis.grid())?;
    let sets = affine_sets(model, grid, boundary)?;
    let weights = opts.resolve_weights(sets.len())?;
    let m = model.input_dim();
    let dim = basis.order() * m;

    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = sets
        .par_iter()
        .zip(weights.par_iter())
        .map(|(set, &lambda)| {
            let mi = restricted_operator(set, basis);
            let g = set.gramian();
            // columns of G⁻¹ M_i
            let mut ginv_m = mi.clone();
            for col in 0..dim {
                let solved = g.solve(&mi.column(col).into_owned());
                ginv_m.set_column(col, &solved);
            }
            let w = mi.transpose() * &ginv_m * lambda;
            let d = mi.transpose() * g.solve(set.target()) * lambda;
            (w, d)
        })
        .collect();
    let mut w = DMatrix::<f64>::zeros(dim, dim);
    let mut delta = DVector::<f64>::zeros(dim);
    for (wi, di) in parts {
        w += wi;
        delta += di;
    }
    let w = (&w + w.transpose()) * 0.5;

    let identity = DMatrix::<f64>::identity(dim, dim);
    let eig = SymmetricEigen::try_new(&identity - &w, 1e-14, 10_000).ok_or_else(|| {
        EnsembleError::Numerical("eigendecomposition of I - W did not converge".into())
    })?;
    for &e in eig.eigenvalues.iter() {
        if !(-SPECTRUM_SLACK..=1.0 + SPECTRUM_SLACK).contains(&e) {
            return Err(EnsembleError::SpectrumViolation { eigenvalue: e });
        }
    }
    let keep = DVector::from_iterator(
        dim,
        eig.eigenvalues.iter().map(|&e| {
            if (e - 1.0).abs() <= UNIT_EIGENVALUE_TOL {
                1.0
            } else {
                0.0
            }
        }),
    );
    let p = &eig.eigenvectors;
    let w_inf = p * DMatrix::from_diagonal(&keep) * p.transpose();

    let svd = w.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let w_pinv = svd
        .pseudo_inverse(PINV_RTOL * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| EnsembleError::Numerical(e.to_string()))?;

    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.total_cmp(b));
    Ok(SpectralOperator {
        basis: basis.clone(),
        channels: m,
        w,
        w_pinv,
        w_inf,
        delta,
        eigenvalues,
    })
}

impl SpectralOperator {
    /// `μ* = W∞(μ⁰ − W†δ) + W†δ`.
    pub fn limit_coordinates(&self, mu0: &Coordinates) -> Result<Coordinates> {
        if mu0.len() != self.delta.len() {
            return Err(shape(format!(
                "initial coordinates have length {}, operator expects {}",
                mu0.len(),
                self.delta.len()
            )));
        }
        let mu0 = DVector::from_column_slice(&mu0.coeffs);
        let particular = &self.w_pinv * &self.delta;
        let mu = &self.w_inf * (mu0 - &particular) + particular;
        Ok(Coordinates {
            coeffs: mu.iter().copied().collect(),
        })
    }
}

/// Closed-form limit of the weighted projection iteration, as a grid signal.
pub fn solve_spectral(op: &SpectralOperator, mu0: &Coordinates) -> Result<ControlSignal> {
    let mu = op.limit_coordinates(mu0)?;
    from_coordinates(&mu, &op.basis)
}
