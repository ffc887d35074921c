//! Uniform grids, log-space densities and the one-step transfer operator.
//!
//! All densities are stored as natural logarithms of nonnegative values;
//! `f64::NEG_INFINITY` encodes an exact zero and is legal everywhere, NaN is
//! legal nowhere. Integrals are rectangle-rule sums, `sum exp(f_i) * dx`,
//! evaluated through a max-shifted log-sum-exp so the absolute scale of a
//! density never matters. Because the same quadrature is used for every
//! operation, composing two transfer steps is literally a matrix product and
//! Chapman-Kolmogorov style identities hold to floating-point roundoff, not
//! just to discretization order.

use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Grid size above which a transfer step parallelizes over output nodes.
const PAR_THRESHOLD: usize = 4096;

/// Max-shifted log-sum-exp. Empty input and all-minus-infinity input both
/// return minus infinity (the log of an empty or zero sum).
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in values {
        if v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &v in values {
        if v > f64::NEG_INFINITY {
            s += (v - m).exp();
        }
    }
    m + s.ln()
}

/// A uniform grid `x_i = x_min + i * dx`, `i = 0..count`. Nodes are always
/// recomputed from the index rather than accumulated, so coordinates are
/// bitwise reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub dx: f64,
    pub count: usize,
}

impl Grid {
    pub fn new(x_min: f64, dx: f64, count: usize) -> Result<Self> {
        if !(dx > 0.0) || !dx.is_finite() || !x_min.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid needs finite x_min and dx > 0, got x_min={x_min}, dx={dx}"
            )));
        }
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 nodes, got {count}"
            )));
        }
        Ok(Grid { x_min, dx, count })
    }

    /// Symmetric grid on `[-half_width, half_width]`, widened outward so that
    /// x = 0 is exactly a node. The Burgers normalization and every polymer
    /// anchored at the origin rely on that node existing.
    pub fn symmetric(half_width: f64, dx: f64) -> Result<Self> {
        if !(half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "symmetric grid needs half_width > 0, got {half_width}"
            )));
        }
        let m = (half_width / dx).ceil() as usize;
        Grid::new(-(m as f64) * dx, dx, 2 * m + 1)
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.x_min + (i as f64) * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.node(self.count - 1)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.node(i))
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest_index(&self, x: f64) -> usize {
        let raw = ((x - self.x_min) / self.dx).round();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.count - 1)
        }
    }

    /// Index of the node at `x`, requiring `x` to sit on the grid up to a
    /// relative snap tolerance of 1e-9 * dx.
    pub fn index_at(&self, x: f64) -> Result<usize> {
        let i = self.nearest_index(x);
        if (self.node(i) - x).abs() <= 1e-9 * self.dx {
            Ok(i)
        } else {
            Err(Error::OutOfRange(format!(
                "x = {x} is not a grid node (nearest node {})",
                self.node(i)
            )))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min - 1e-9 * self.dx && x <= self.x_max() + 1e-9 * self.dx
    }
}

/// A log-density on a grid: `values[i] = ln f(x_i)`, minus infinity allowed,
/// NaN rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl LogDensity {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count {
            return Err(Error::GridMismatch(format!(
                "value count {} != grid count {}",
                values.len(),
                grid.count
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("log-density contains NaN".into()));
        }
        Ok(LogDensity { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().map(f).collect();
        LogDensity::new(grid, values)
    }

    /// Identically zero density (all log-values minus infinity).
    pub fn zero(grid: Grid) -> Self {
        LogDensity {
            grid,
            values: vec![f64::NEG_INFINITY; grid.count],
        }
    }

    /// Grid stand-in for a unit point mass at node `i`: a single finite entry
    /// of log(1/dx), so that rectangle-rule integration gives mass one and a
    /// transfer step applied to it reproduces the kernel row exactly.
    pub fn delta(grid: Grid, i: usize) -> Result<Self> {
        if i >= grid.count {
            return Err(Error::OutOfRange(format!(
                "delta node {i} outside grid of {} nodes",
                grid.count
            )));
        }
        let mut values = vec![f64::NEG_INFINITY; grid.count];
        values[i] = -grid.dx.ln();
        Ok(LogDensity { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn add_scalar(&self, c: f64) -> LogDensity {
        LogDensity {
            grid: self.grid,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// Pointwise product of the underlying densities (sum of log-values).
    pub fn product(&self, other: &LogDensity) -> Result<LogDensity> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "pointwise product of densities on different grids".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                // -inf + inf cannot occur (log-values are never +inf), so the
                // only special case is -inf + -inf which f64 handles.
                a + b
            })
            .collect();
        LogDensity::new(self.grid, values)
    }

    /// Log of the total mass, `ln( sum exp(f_i) * dx )`.
    pub fn log_mass(&self) -> f64 {
        logsumexp(&self.values) + self.grid.dx.ln()
    }

    /// Rescale so the total mass is one. Errors if the mass is zero.
    pub fn normalized(&self) -> Result<LogDensity> {
        let m = self.log_mass();
        if m == f64::NEG_INFINITY {
            return Err(Error::MassCollapse(
                "cannot normalize a density with zero mass".into(),
            ));
        }
        Ok(self.add_scalar(-m))
    }

    /// Mean of the normalized density. Errors on zero mass.
    pub fn mean(&self) -> Result<f64> {
        let m = self
            .values
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        if m == f64::NEG_INFINITY {
            return Err(Error::MassCollapse("mean of a zero density".into()));
        }
        let mut mass = 0.0;
        let mut first = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > f64::NEG_INFINITY {
                let w = (v - m).exp();
                mass += w;
                first += w * self.grid.node(i);
            }
        }
        Ok(first / mass)
    }

    /// Mean and variance of the normalized density.
    pub fn mean_and_variance(&self) -> Result<(f64, f64)> {
        let mean = self.mean()?;
        let m = self
            .values
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        let mut mass = 0.0;
        let mut second = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > f64::NEG_INFINITY {
                let w = (v - m).exp();
                mass += w;
                let d = self.grid.node(i) - mean;
                second += w * d * d;
            }
        }
        Ok((mean, second / mass))
    }

    /// Cumulative distribution of the normalized density at every node,
    /// F(x_i) = P(X <= x_i). The last entry is exactly 1.
    pub fn cdf(&self) -> Result<Vec<f64>> {
        let m = self
            .values
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
        if m == f64::NEG_INFINITY {
            return Err(Error::MassCollapse("cdf of a zero density".into()));
        }
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            if v > f64::NEG_INFINITY {
                acc += (v - m).exp();
            }
            out.push(acc);
        }
        let total = acc;
        for v in &mut out {
            *v /= total;
        }
        Ok(out)
    }

    /// Total-variation distance between the two normalized densities,
    /// `(1/2) * sum |f_i - g_i| * dx` after normalization.
    pub fn tv_distance(&self, other: &LogDensity) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "tv distance of densities on different grids".into(),
            ));
        }
        let a = self.normalized()?;
        let b = other.normalized()?;
        let dx = self.grid.dx;
        let mut acc = 0.0;
        for (u, v) in a.values.iter().zip(&b.values) {
            acc += (u.exp() - v.exp()).abs();
        }
        Ok(0.5 * acc * dx)
    }
}

/// Natural log of the centered Gaussian density with the given variance.
#[inline]
pub fn log_gaussian(x: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - x * x / (2.0 * variance)
}

/// Heat kernel row: the log-density of a Gaussian with the given variance
/// centered at `center`, sampled on the grid.
pub fn heat_kernel_logrow(grid: Grid, center: f64, variance: f64) -> Result<LogDensity> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "heat kernel needs variance > 0, got {variance}"
        )));
    }
    LogDensity::from_fn(grid, |x| log_gaussian(x - center, variance))
}

/// Log of the rectangle-rule integral of the density.
pub fn log_integrate(density: &LogDensity) -> f64 {
    density.log_mass()
}

/// Which way a transfer step maps in time. A step lives on the time interval
/// `[k, k+1]`: forward consumes a density in the time-k variable and produces
/// one in the time-(k+1) variable, backward is the adjoint map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Which end of the step the potential weight `exp(-F/(2 kappa))` attaches to.
/// `IncludeLeft` evaluates it at the time-k end; chaining steps k = m..n-1
/// forward then charges the potential at times m..n-1 and never at time n,
/// which is the asymmetric energy convention used throughout. `IncludeRight`
/// charges the time-(k+1) end instead and is what the time-reversed engine
/// uses so that reversed chains reproduce the same asymmetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    IncludeLeft,
    IncludeRight,
}

/// Options for a transfer step. `band_sigmas = Some(s)` truncates the kernel
/// at `s` standard deviations; entries beyond the band contribute at most
/// `erfc(s/sqrt(2))` of the total kernel mass, about 1.2e-15 at s = 8, so the
/// default band used by long campaigns is well below every tolerance in the
/// test suite. `None` keeps the kernel dense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferOptions {
    pub band_sigmas: Option<f64>,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions { band_sigmas: None }
    }
}

impl TransferOptions {
    pub fn banded(sigmas: f64) -> Self {
        TransferOptions {
            band_sigmas: Some(sigmas),
        }
    }
}

/// One transfer step over `[k, k+1]` against a fixed potential slice.
///
/// Forward with `IncludeLeft`:
///   out(y) = ln ∫ g_{2κ}(y - x) e^{-F(x)/(2κ)} e^{in(x)} dx
/// with the integral a rectangle-rule sum over grid nodes. The other three
/// combinations move the potential weight to the other end or transpose the
/// kernel, as described on [`Direction`] and [`Convention`]. The result lives
/// on the same grid; mass that diffuses past the grid edge is lost, which is
/// the absorbing truncation the window-sizing policy accounts for.
pub fn apply_transfer(
    potential: &[f64],
    kappa: f64,
    input: &LogDensity,
    direction: Direction,
    convention: Convention,
    options: TransferOptions,
) -> Result<LogDensity> {
    let grid = *input.grid();
    if potential.len() != grid.count {
        return Err(Error::GridMismatch(format!(
            "potential slice has {} values, grid has {} nodes",
            potential.len(),
            grid.count
        )));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "transfer needs kappa > 0, got {kappa}"
        )));
    }
    if potential.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "potential slice contains non-finite values".into(),
        ));
    }
    let variance = 2.0 * kappa;
    let half_band = match options.band_sigmas {
        Some(s) => {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "band width must be positive, got {s} sigmas"
                )));
            }
            ((s * variance.sqrt() / grid.dx).ceil() as usize).min(grid.count - 1)
        }
        None => grid.count - 1,
    };

    // Kernel row by node distance; g depends on |x_j - x_i| only.
    let log_kernel: Vec<f64> = (0..=half_band)
        .map(|d| log_gaussian(d as f64 * grid.dx, variance))
        .collect();

    let inv = 1.0 / (2.0 * kappa);
    // Fold the potential weight into whichever side it attaches to. After
    // this, every combination is the same banded log-space convolution plus
    // an optional output-side weight.
    let (pre, post): (Vec<f64>, Option<Vec<f64>>) = match (direction, convention) {
        (Direction::Forward, Convention::IncludeLeft)
        | (Direction::Backward, Convention::IncludeRight) => (
            input
                .values()
                .iter()
                .zip(potential)
                .map(|(v, f)| v - f * inv)
                .collect(),
            None,
        ),
        (Direction::Forward, Convention::IncludeRight)
        | (Direction::Backward, Convention::IncludeLeft) => (
            input.values().to_vec(),
            Some(potential.iter().map(|f| -f * inv).collect()),
        ),
    };

    let ln_dx = grid.dx.ln();
    let convolve = |j: usize| -> f64 {
        let lo = j.saturating_sub(half_band);
        let hi = (j + half_band).min(grid.count - 1);
        let mut m = f64::NEG_INFINITY;
        for i in lo..=hi {
            let d = if i > j { i - j } else { j - i };
            let v = pre[i] + log_kernel[d];
            if v > m {
                m = v;
            }
        }
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut s = 0.0;
        for i in lo..=hi {
            let d = if i > j { i - j } else { j - i };
            let v = pre[i] + log_kernel[d];
            if v > f64::NEG_INFINITY {
                s += (v - m).exp();
            }
        }
        m + s.ln() + ln_dx
    };

    let mut out: Vec<f64> = if grid.count >= PAR_THRESHOLD {
        (0..grid.count).into_par_iter().map(convolve).collect()
    } else {
        (0..grid.count).map(convolve).collect()
    };
    if let Some(w) = post {
        for (o, p) in out.iter_mut().zip(&w) {
            *o += p;
        }
    }
    LogDensity::new(grid, out)
}
