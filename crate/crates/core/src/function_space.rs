//! Controls as elements of L²([0,T], ℝᵐ): uniform time grids, grid-sampled
//! signals with trapezoidal inner products, and truncated Legendre bases.

use crate::error::{invalid, shape, EnsembleError, Result};

/// Uniform partition of `[0, T]` into `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps < 2 {
            return Err(invalid(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of node `k`. The last node is exactly the horizon.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.node(k)).collect()
    }

    /// Composite trapezoid weight of node `k`.
    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        let h = self.step();
        if k == 0 || k == self.n_steps {
            0.5 * h
        } else {
            h
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.weight(k)).collect()
    }

    pub(crate) fn ensure_same(&self, other: &TimeGrid) -> Result<()> {
        if self != other {
            return Err(shape(format!(
                "grid mismatch: (T={}, steps={}) vs (T={}, steps={})",
                self.horizon, self.n_steps, other.horizon, other.n_steps
            )));
        }
        Ok(())
    }
}

/// Create a uniform time grid.
pub fn make_time_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, n_steps)
}

/// A vector-valued control sampled at every grid node.
///
/// Samples are stored node-major: `samples[k * m + c]` is channel `c` at node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    grid: TimeGrid,
    channels: usize,
    samples: Vec<f64>,
}

impl ControlSignal {
    pub fn zeros(grid: TimeGrid, channels: usize) -> Self {
        assert!(channels >= 1, "control needs at least one channel");
        Self {
            grid,
            channels,
            samples: vec![0.0; grid.n_nodes() * channels],
        }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Result<Self> {
        if value.is_empty() {
            return Err(invalid("constant control needs at least one channel"));
        }
        let samples = value
            .iter()
            .copied()
            .cycle()
            .take(grid.n_nodes() * value.len())
            .collect();
        Self::from_samples(grid, value.len(), samples)
    }

    pub fn from_samples(grid: TimeGrid, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("control needs at least one channel"));
        }
        if samples.len() != grid.n_nodes() * channels {
            return Err(shape(format!(
                "expected {} samples for {} channels, got {}",
                grid.n_nodes() * channels,
                channels,
                samples.len()
            )));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(EnsembleError::NumericalBlowup(
                "control contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            grid,
            channels,
            samples,
        })
    }

    /// Sample `f(t)` at every node; `f` writes `channels` values into the slice.
    pub fn from_fn(grid: TimeGrid, channels: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut out = Self::zeros(grid, channels);
        for k in 0..grid.n_nodes() {
            f(grid.node(k), out.at_mut(k));
        }
        out
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.samples[k * self.channels..(k + 1) * self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.samples[k * self.channels..(k + 1) * self.channels]
    }

    /// Samples of one channel across all nodes.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().skip(c).step_by(self.channels).copied()
    }

    pub fn is_compatible(&self, other: &ControlSignal) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }

    pub(crate) fn ensure_compatible(&self, other: &ControlSignal) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.channels != other.channels {
            return Err(shape(format!(
                "channel mismatch: {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub fn inner_product(&self, other: &ControlSignal) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self.dot_unchecked(other))
    }

    pub(crate) fn dot_unchecked(&self, other: &ControlSignal) -> f64 {
        let m = self.channels;
        let mut acc = 0.0;
        for k in 0..self.grid.n_nodes() {
            let a = &self.samples[k * m..(k + 1) * m];
            let b = &other.samples[k * m..(k + 1) * m];
            let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            acc += self.grid.weight(k) * s;
        }
        acc
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot_unchecked(self).max(0.0).sqrt()
    }

    /// Energy ∫ u'u dt.
    pub fn energy(&self) -> f64 {
        self.dot_unchecked(self)
    }

    /// L² norm of a single channel.
    pub fn channel_norm(&self, c: usize) -> f64 {
        let acc: f64 = self
            .channel(c)
            .enumerate()
            .map(|(k, x)| self.grid.weight(k) * x * x)
            .sum();
        acc.max(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
    }

    /// L² distance to another compatible signal.
    pub fn distance(&self, other: &ControlSignal) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self.distance_unchecked(other))
    }

    pub(crate) fn distance_unchecked(&self, other: &ControlSignal) -> f64 {
        let m = self.channels;
        let mut acc = 0.0;
        for k in 0..self.grid.n_nodes() {
            let s: f64 = self.samples[k * m..(k + 1) * m]
                .iter()
                .zip(&other.samples[k * m..(k + 1) * m])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            acc += self.grid.weight(k) * s;
        }
        acc.max(0.0).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> ControlSignal {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn scale(&mut self, alpha: f64) {
        self.samples.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ControlSignal) -> Result<()> {
        self.ensure_compatible(other)?;
        self.samples
            .iter_mut()
            .zip(&other.samples)
            .for_each(|(x, y)| *x += alpha * y);
        Ok(())
    }

    pub fn sub(&self, other: &ControlSignal) -> Result<ControlSignal> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn add(&self, other: &ControlSignal) -> Result<ControlSignal> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    /// Control at time `t`, linearly interpolated between nodes.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let h = self.grid.step();
        let pos = (t / h).clamp(0.0, self.grid.n_steps as f64);
        let k = (pos.floor() as usize).min(self.grid.n_steps - 1);
        let frac = pos - k as f64;
        let a = self.at(k);
        let b = self.at(k + 1);
        for c in 0..self.channels {
            out[c] = (1.0 - frac) * a[c] + frac * b[c];
        }
    }
}

/// ∫₀ᵀ u'v dt by the composite trapezoid rule.
pub fn inner_product(u: &ControlSignal, v: &ControlSignal) -> Result<f64> {
    u.inner_product(v)
}

pub fn norm_l2(u: &ControlSignal) -> f64 {
    u.norm_l2()
}

/// Truncated orthonormal basis of scalar functions, applied per channel.
#[derive(Debug, Clone)]
pub struct BasisSet {
    grid: TimeGrid,
    /// `functions[j][k]` is basis function `j` at node `k`.
    functions: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn order(&self) -> usize {
        self.functions.len()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn function(&self, j: usize) -> &[f64] {
        &self.functions[j]
    }

    /// Discrete Gram matrix ⟨φ_j, φ_k⟩, row-major r×r.
    pub fn gram(&self) -> Vec<f64> {
        let r = self.order();
        let w = self.grid.weights();
        let mut g = vec![0.0; r * r];
        for a in 0..r {
            for b in a..r {
                let s = weighted_dot(&w, &self.functions[a], &self.functions[b]);
                g[a * r + b] = s;
                g[b * r + a] = s;
            }
        }
        g
    }

    /// Scalar basis element `j` embedded in channel `c` of an `m`-channel signal.
    pub fn element(&self, j: usize, c: usize, channels: usize) -> ControlSignal {
        let mut out = ControlSignal::zeros(self.grid, channels);
        for (k, &phi) in self.functions[j].iter().enumerate() {
            out.at_mut(k)[c] = phi;
        }
        out
    }
}

#[inline]
fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

/// Shifted Legendre polynomials of degree `0..order` on `[0, T]`,
/// re-orthonormalised against the trapezoid inner product.
pub fn legendre_basis(order: usize, grid: &TimeGrid) -> Result<BasisSet> {
    if order == 0 {
        return Err(invalid("basis order must be at least 1"));
    }
    if order > grid.n_steps() {
        return Err(EnsembleError::Resolution {
            order,
            n_steps: grid.n_steps(),
        });
    }
    let n = grid.n_nodes();
    let horizon = grid.horizon();
    let xs: Vec<f64> = (0..n).map(|k| 2.0 * grid.node(k) / horizon - 1.0).collect();

    // Three-term recurrence, normalised for the continuous L² norm on [0, T].
    let mut functions: Vec<Vec<f64>> = Vec::with_capacity(order);
    let mut prev = vec![0.0; n];
    let mut cur = vec![1.0; n];
    for deg in 0..order {
        let scale = ((2 * deg + 1) as f64 / horizon).sqrt();
        functions.push(cur.iter().map(|p| p * scale).collect());
        let d = deg as f64;
        let next: Vec<f64> = (0..n)
            .map(|k| ((2.0 * d + 1.0) * xs[k] * cur[k] - d * prev[k]) / (d + 1.0))
            .collect();
        prev = std::mem::replace(&mut cur, next);
    }

    // Modified Gram-Schmidt, two passes.
    let w = grid.weights();
    for j in 0..order {
        for _ in 0..2 {
            for i in 0..j {
                let proj = weighted_dot(&w, &functions[j], &functions[i]);
                let (head, tail) = functions.split_at_mut(j);
                tail[0]
                    .iter_mut()
                    .zip(&head[i])
                    .for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = weighted_dot(&w, &functions[j], &functions[j]).sqrt();
        if norm.is_nan() || norm <= 1e-12 {
            return Err(EnsembleError::Numerical(format!(
                "basis function {j} collapsed during orthonormalisation"
            )));
        }
        functions[j].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(BasisSet {
        grid: *grid,
        functions,
    })
}

/// Basis coefficients of a control; channel `c`, mode `j` lives at `c * r + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates {
    pub coeffs: Vec<f64>,
}

impl Coordinates {
    pub fn zeros(order: usize, channels: usize) -> Self {
        Self {
            coeffs: vec![0.0; order * channels],
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

pub fn to_coordinates(u: &ControlSignal, basis: &BasisSet) -> Result<Coordinates> {
    u.grid().ensure_same(basis.grid())?;
    let m = u.channels();
    let r = basis.order();
    let w = basis.grid.weights();
    let mut coeffs = vec![0.0; r * m];
    for c in 0..m {
        let chan: Vec<f64> = u.channel(c).collect();
        for j in 0..r {
            coeffs[c * r + j] = weighted_dot(&w, &chan, &basis.functions[j]);
        }
    }
    Ok(Coordinates { coeffs })
}

pub fn from_coordinates(mu: &Coordinates, basis: &BasisSet) -> Result<ControlSignal> {
    let r = basis.order();
    if mu.coeffs.is_empty() || !mu.coeffs.len().is_multiple_of(r) {
        return Err(shape(format!(
            "{} coefficients do not fit a basis of order {r}",
            mu.coeffs.len()
        )));
    }
    let m = mu.coeffs.len() / r;
    let mut out = ControlSignal::zeros(basis.grid, m);
    for c in 0..m {
        for j in 0..r {
            let a = mu.coeffs[c * r + j];
            if a == 0.0 {
                continue;
            }
            for (k, phi) in basis.functions[j].iter().enumerate() {
                out.samples[k * m + c] += a * phi;
            }
        }
    }
    Ok(out)
}
