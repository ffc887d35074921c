//! Polymer path measures.
//!
//! The polymer measure over `[m, n]` anchored at `(m, x)` with terminal law
//! `ν` weighs a path `γ` by `Π g_{2κ}(γ_{k+1} - γ_k) exp(-F_k(γ_k)/(2κ))`
//! times `ν(dγ_n)`, normalized by the partition function. On the grid every
//! marginal is a ratio of partition slices, so a measure caches its forward
//! slices `Z^{m,k}(x, ·)` and backward weights `Z^{k,n}(·, ν)` once and reads
//! marginals off in O(grid) each.
//!
//! Backward objects reuse the forward engine: the segment weight from time
//! `k` down to the terminal is a forward chain through the time-reversed
//! potential window with the convention flag flipped, which charges exactly
//! the same potential slices at the same path positions. Path sampling runs
//! backward from the terminal using the cached forward slices, so sampled
//! paths are exact draws from the grid measure, not an approximation.

use crate::env::{substream, Environment, StreamPurpose};
use crate::lattice::{self, Convention, Direction, Grid, LogDensity, TransferOptions};
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Law of the free endpoint `γ_n`.
#[derive(Debug, Clone)]
pub enum TerminalMeasure {
    /// Point mass at a grid node.
    Atom(f64),
    /// Gridded probability density; must integrate to one within 1e-8.
    Density(LogDensity),
    /// Uniform on `[a, b]` (realized exactly on the covered nodes).
    Uniform { a: f64, b: f64 },
}

impl TerminalMeasure {
    /// Log-weight column for the terminal: integrating a segment weight
    /// against this column (with the usual dx quadrature) integrates it
    /// against the terminal measure. Atoms use the same `1/dx` convention as
    /// [`LogDensity::delta`].
    fn log_weight_column(&self, grid: Grid) -> Result<LogDensity> {
        match self {
            TerminalMeasure::Atom(y) => {
                let iy = grid.index_at(*y)?;
                LogDensity::delta(grid, iy)
            }
            TerminalMeasure::Density(d) => {
                if *d.grid() != grid {
                    return Err(Error::GridMismatch(
                        "terminal density lives on a different grid".into(),
                    ));
                }
                let mass = d.log_mass();
                if mass.abs() > 1e-8 {
                    return Err(Error::InvalidArgument(format!(
                        "terminal density is not normalized: mass = {}",
                        mass.exp()
                    )));
                }
                // Renormalize exactly so downstream identities are clean.
                Ok(d.add_scalar(-mass))
            }
            TerminalMeasure::Uniform { a, b } => {
                if !(a < b) {
                    return Err(Error::InvalidArgument(format!(
                        "uniform terminal needs a < b, got [{a}, {b}]"
                    )));
                }
                let eps = 1e-9 * grid.dx;
                let hits: Vec<usize> = (0..grid.count)
                    .filter(|&i| grid.node(i) >= a - eps && grid.node(i) <= b + eps)
                    .collect();
                if hits.is_empty() {
                    return Err(Error::OutOfRange(format!(
                        "uniform terminal [{a}, {b}] covers no grid nodes"
                    )));
                }
                let level = -((hits.len() as f64) * grid.dx).ln();
                let mut values = vec![f64::NEG_INFINITY; grid.count];
                for i in hits {
                    values[i] = level;
                }
                LogDensity::new(grid, values)
            }
        }
    }
}

/// A realized polymer measure with cached forward and backward slices.
#[derive(Debug, Clone)]
pub struct PolymerMeasure {
    env: Environment,
    m: i64,
    n: i64,
    x: f64,
    terminal: TerminalMeasure,
    convention: Convention,
    options: TransferOptions,
    /// `fwd[j]` = log Z^{m, m+1+j}(x, ·), for j = 0 .. n-m-1.
    fwd: Vec<LogDensity>,
    /// `bwd[j]` = log weight from time n-1-j to the terminal, j = 0 .. n-m-1;
    /// the last entry (time m) equals log Z^{m,n}(·, ν).
    bwd: Vec<LogDensity>,
    log_z: f64,
}

impl PolymerMeasure {
    /// Standard polymer measure: potential charged at the left end of every
    /// step (times `m..n-1`).
    pub fn new(
        env: &Environment,
        m: i64,
        n: i64,
        x: f64,
        terminal: TerminalMeasure,
        options: TransferOptions,
    ) -> Result<Self> {
        Self::with_convention(env, m, n, x, terminal, Convention::IncludeLeft, options)
    }

    /// Same measure with an explicit energy convention; `IncludeRight` is the
    /// time-reversed engine's native convention.
    pub fn with_convention(
        env: &Environment,
        m: i64,
        n: i64,
        x: f64,
        terminal: TerminalMeasure,
        convention: Convention,
        options: TransferOptions,
    ) -> Result<Self> {
        if n <= m {
            return Err(Error::InvalidArgument(format!(
                "polymer range needs n > m, got [{m}, {n}]"
            )));
        }
        let window = env.window(m, n)?;
        let grid = window.grid();
        let ix = grid.index_at(x)?;
        let steps = (n - m) as usize;

        // Forward slices from the anchored start.
        let mut fwd = Vec::with_capacity(steps);
        let mut cur = LogDensity::delta(grid, ix)?;
        for k in m..n {
            cur = lattice::apply_transfer(
                window.slice(k)?,
                window.kappa(),
                &cur,
                Direction::Forward,
                convention,
                options,
            )?;
            fwd.push(cur.clone());
        }

        // Backward weights: forward chain through the reversed window with
        // the opposite convention.
        let terminal_column = terminal.log_weight_column(grid)?;
        let rev = window.reversed();
        let flipped = match convention {
            Convention::IncludeLeft => Convention::IncludeRight,
            Convention::IncludeRight => Convention::IncludeLeft,
        };
        let mut bwd = Vec::with_capacity(steps);
        let mut back = terminal_column.clone();
        for j in 0..steps as i64 {
            back = lattice::apply_transfer(
                rev.slice(j)?,
                rev.kappa(),
                &back,
                Direction::Forward,
                flipped,
                options,
            )?;
            bwd.push(back.clone());
        }

        let log_z = lattice::log_integrate(&fwd[steps - 1].product(&terminal_column)?);
        if log_z == f64::NEG_INFINITY {
            return Err(Error::MassCollapse(format!(
                "polymer over [{m}, {n}] from x = {x} has zero partition mass"
            )));
        }
        Ok(PolymerMeasure {
            env: window,
            m,
            n,
            x,
            terminal,
            convention,
            options,
            fwd,
            bwd,
            log_z,
        })
    }

    pub fn m(&self) -> i64 {
        self.m
    }

    pub fn n(&self) -> i64 {
        self.n
    }

    pub fn start(&self) -> f64 {
        self.x
    }

    pub fn grid(&self) -> Grid {
        self.env.grid()
    }

    pub fn terminal(&self) -> &TerminalMeasure {
        &self.terminal
    }

    /// Log partition function `log Z^{m,n}(x, ν)`.
    pub fn log_partition(&self) -> f64 {
        self.log_z
    }

    /// Forward slice `log Z^{m,k}(x, ·)` for `k` in `(m, n]`.
    pub fn forward_slice(&self, k: i64) -> Result<&LogDensity> {
        if k <= self.m || k > self.n {
            return Err(Error::OutOfRange(format!(
                "forward slice time {k} outside ({}, {}]",
                self.m, self.n
            )));
        }
        Ok(&self.fwd[(k - self.m - 1) as usize])
    }

    /// Backward weight `log Z^{k,n}(·, ν)` for `k` in `[m, n)`.
    pub fn backward_weight(&self, k: i64) -> Result<&LogDensity> {
        if k < self.m || k >= self.n {
            return Err(Error::OutOfRange(format!(
                "backward weight time {k} outside [{}, {})",
                self.m, self.n
            )));
        }
        Ok(&self.bwd[(self.n - 1 - k) as usize])
    }

    /// Normalized log-density of the time-k marginal. Interior times only;
    /// the time-n marginal exists when the terminal is a density or uniform
    /// law. The endpoints `k = m` (always) and `k = n` under an atom terminal
    /// are deterministic, which is reported as an error rather than a
    /// degenerate density.
    pub fn marginal_density(&self, k: i64) -> Result<LogDensity> {
        if k == self.n {
            let column = match &self.terminal {
                TerminalMeasure::Atom(y) => {
                    return Err(Error::InvalidArgument(format!(
                        "time-{k} marginal is the terminal atom at {y}, not a density"
                    )));
                }
                other => other.log_weight_column(self.grid())?,
            };
            let slice = &self.fwd[(self.n - self.m - 1) as usize];
            return slice.product(&column)?.add_scalar(-self.log_z).normalized();
        }
        if k <= self.m || k > self.n {
            return Err(Error::InvalidArgument(format!(
                "marginal time {k} outside the interior ({}, {}] of the polymer",
                self.m, self.n
            )));
        }
        let f = &self.fwd[(k - self.m - 1) as usize];
        let b = &self.bwd[(self.n - 1 - k) as usize];
        // fwd * bwd / Z integrates to one already (Chapman-Kolmogorov); the
        // final normalize only clears roundoff.
        f.product(b)?.add_scalar(-self.log_z).normalized()
    }

    /// Draw paths by backward inverse-CDF sampling on the grid. Sample `s` is
    /// a pure function of `(seed, s)`, so results are independent of thread
    /// count and call order.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<PathSet> {
        if count == 0 {
            return Err(Error::InvalidArgument("sample_paths needs count > 0".into()));
        }
        if count > u32::MAX as usize {
            return Err(Error::InvalidArgument("sample count too large".into()));
        }
        let grid = self.grid();
        let kappa = self.env.kappa();
        let variance = 2.0 * kappa;
        let inv = 1.0 / variance;
        // Kernel band for the conditional draw; beyond eight standard
        // deviations the kernel factor underflows any realistic weight, and
        // an explicit transfer band narrows the reach the same way.
        let sigmas = self.options.band_sigmas.unwrap_or(8.0);
        let reach = ((sigmas * variance.sqrt() / grid.dx).ceil() as usize).min(grid.count - 1);
        let steps = (self.n - self.m) as usize;

        // Endpoint law: atom index, or weights fwd_n * terminal column.
        let endpoint: EndpointLaw = match &self.terminal {
            TerminalMeasure::Atom(y) => EndpointLaw::Fixed(grid.index_at(*y)?),
            other => {
                let column = other.log_weight_column(grid)?;
                let w = self.fwd[steps - 1].product(&column)?;
                EndpointLaw::Random(w.values().to_vec())
            }
        };

        let paths: Vec<Vec<f64>> = (0..count as u32)
            .into_par_iter()
            .map(|s| {
                let mut rng = substream(seed, StreamPurpose::PathSampling, s, 0);
                let mut nodes = vec![0usize; steps + 1];
                nodes[steps] = match &endpoint {
                    EndpointLaw::Fixed(i) => *i,
                    EndpointLaw::Random(w) => inverse_cdf_draw(w, 0, w.len() - 1, &mut rng),
                };
                // Backward pass: gamma_k given gamma_{k+1}, for k = n-1 .. m+1.
                let mut weights = vec![f64::NEG_INFINITY; grid.count];
                for j in (1..steps).rev() {
                    let k = self.m + j as i64;
                    let z_node = nodes[j + 1];
                    let z = grid.node(z_node);
                    let lo = z_node.saturating_sub(reach);
                    let hi = (z_node + reach).min(grid.count - 1);
                    let fwd_k = self.fwd[j - 1].values();
                    let pot = self.env.slice(k).expect("slice in range");
                    for (i, w) in weights.iter_mut().enumerate().take(hi + 1).skip(lo) {
                        let y = grid.node(i);
                        let d = z - y;
                        let mut lw = fwd_k[i] - d * d * inv * 0.5;
                        if self.convention == Convention::IncludeLeft {
                            lw -= pot[i] * inv;
                        }
                        *w = lw;
                    }
                    // IncludeRight charges the step at the already-fixed z
                    // end, a constant that the normalization absorbs.
                    nodes[j] = inverse_cdf_draw(&weights, lo, hi, &mut rng);
                    for w in weights.iter_mut().take(hi + 1).skip(lo) {
                        *w = f64::NEG_INFINITY;
                    }
                }
                nodes[0] = grid.index_at(self.x).expect("anchor is a node");
                nodes.iter().map(|&i| grid.node(i)).collect()
            })
            .collect();

        Ok(PathSet {
            m: self.m,
            n: self.n,
            x: self.x,
            paths,
        })
    }
}

enum EndpointLaw {
    Fixed(usize),
    Random(Vec<f64>),
}

/// Inverse-CDF draw over `log_weights[lo..=hi]`; ties resolve to the lower
/// index because the scan takes the first cumulative weight >= u * total.
fn inverse_cdf_draw(
    log_weights: &[f64],
    lo: usize,
    hi: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> usize {
    use rand::Rng;
    let mut m = f64::NEG_INFINITY;
    for &w in &log_weights[lo..=hi] {
        if w > m {
            m = w;
        }
    }
    debug_assert!(m > f64::NEG_INFINITY, "conditional law has no mass");
    let mut total = 0.0;
    for &w in &log_weights[lo..=hi] {
        if w > f64::NEG_INFINITY {
            total += (w - m).exp();
        }
    }
    let target = rng.gen_range(0.0..1.0) * total;
    let mut acc = 0.0;
    for (i, &w) in log_weights.iter().enumerate().take(hi + 1).skip(lo) {
        if w > f64::NEG_INFINITY {
            acc += (w - m).exp();
        }
        if acc >= target {
            return i;
        }
    }
    hi
}

/// A set of sampled paths over times `m ..= n`; every path starts at `x`.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub m: i64,
    pub n: i64,
    pub x: f64,
    pub paths: Vec<Vec<f64>>,
}

impl PathSet {
    /// Positions of every path at time `k`.
    pub fn positions_at(&self, k: i64) -> Result<Vec<f64>> {
        if k < self.m || k > self.n {
            return Err(Error::OutOfRange(format!(
                "time {k} outside path range [{}, {}]",
                self.m, self.n
            )));
        }
        let j = (k - self.m) as usize;
        Ok(self.paths.iter().map(|p| p[j]).collect())
    }

    /// CSV with columns `sample,k,gamma`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "sample,k,gamma")?;
        for (s, p) in self.paths.iter().enumerate() {
            for (j, g) in p.iter().enumerate() {
                writeln!(w, "{s},{},{:.17e}", self.m + j as i64, g)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Path action `A(γ) = Σ_{k=m}^{n-1} F_k(γ_k) + (1/2) Σ (γ_{k+1} - γ_k)^2`;
/// the polymer weight is `exp(-A/(2κ))` up to the Gaussian normalization,
/// for every `κ`. Positions must lie inside the grid and are evaluated at the
/// nearest node (sampled paths live on nodes exactly).
pub fn path_action(env: &Environment, m: i64, path: &[f64]) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::InvalidArgument("path needs at least two points".into()));
    }
    let grid = env.grid();
    let mut action = 0.0;
    for (j, &g) in path.iter().enumerate() {
        if !grid.contains(g) {
            return Err(Error::OutOfRange(format!(
                "path position {g} at time {} outside the grid",
                m + j as i64
            )));
        }
        if j + 1 < path.len() {
            let f = env.slice(m + j as i64)?[grid.nearest_index(g)];
            let d = path[j + 1] - g;
            action += f + 0.5 * d * d;
        }
    }
    Ok(action)
}

/// Worst violation of the claimed stochastic ordering between time-k
/// marginals: `max_r (CDF_dominating(r) - CDF_dominated(r))`. Nonpositive
/// (up to roundoff) exactly when `dominating` stochastically dominates
/// `dominated` on the grid; positive values measure the violation.
pub fn dominance_residual(
    dominated: &PolymerMeasure,
    dominating: &PolymerMeasure,
    k: i64,
) -> Result<f64> {
    let a = dominated.marginal_density(k)?;
    let b = dominating.marginal_density(k)?;
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch(
            "dominance comparison across different grids".into(),
        ));
    }
    let ca = a.cdf()?;
    let cb = b.cdf()?;
    let mut worst = f64::NEG_INFINITY;
    for (u, v) in ca.iter().zip(&cb) {
        let gap = v - u;
        if gap > worst {
            worst = gap;
        }
    }
    Ok(worst)
}

/// Total-variation distance between the time-k marginals of two measures.
pub fn tv_between_marginals(a: &PolymerMeasure, b: &PolymerMeasure, k: i64) -> Result<f64> {
    a.marginal_density(k)?.tv_distance(&b.marginal_density(k)?)
}

/// A backward point-to-line polymer: paths over `[depth, n]` anchored at
/// `(n, x)` with the free end at time `depth` weighted by a positive profile
/// (typically a Hopf-Cole state). Internally this is a forward
/// [`PolymerMeasure`] through the time-reversed window with the convention
/// flag flipped; marginal times are translated back to original times.
#[derive(Debug, Clone)]
pub struct PointToLineMeasure {
    inner: PolymerMeasure,
    pub n: i64,
    pub depth: i64,
}

/// Build the point-to-line measure from a log free-end weight at time
/// `depth` (any positive profile; it is normalized internally because
/// conditioning makes the scale irrelevant).
pub fn point_to_line_measure(
    env: &Environment,
    log_weight_at_depth: &LogDensity,
    depth: i64,
    n: i64,
    x: f64,
    options: TransferOptions,
) -> Result<PointToLineMeasure> {
    if n <= depth {
        return Err(Error::InvalidArgument(format!(
            "point-to-line needs n > depth, got depth={depth}, n={n}"
        )));
    }
    if *log_weight_at_depth.grid() != env.grid() {
        return Err(Error::GridMismatch(
            "free-end weight lives on a different grid".into(),
        ));
    }
    let normalized = log_weight_at_depth.normalized()?;
    let rev = env.window(depth, n)?.reversed();
    let inner = PolymerMeasure::with_convention(
        &rev,
        0,
        n - depth,
        x,
        TerminalMeasure::Density(normalized),
        Convention::IncludeRight,
        options,
    )?;
    Ok(PointToLineMeasure { inner, n, depth })
}

impl PointToLineMeasure {
    /// Marginal at original time `k` in `[depth, n)`.
    pub fn marginal_density(&self, k: i64) -> Result<LogDensity> {
        if k < self.depth || k >= self.n {
            return Err(Error::OutOfRange(format!(
                "marginal time {k} outside [{}, {})",
                self.depth, self.n
            )));
        }
        self.inner.marginal_density(self.n - k)
    }

    pub fn log_partition(&self) -> f64 {
        self.inner.log_partition()
    }

    pub fn inner(&self) -> &PolymerMeasure {
        &self.inner
    }

    /// Sampled paths, reported in original time order `depth ..= n`.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<PathSet> {
        let rev = self.inner.sample_paths(count, seed)?;
        let paths = rev
            .paths
            .into_iter()
            .map(|mut p| {
                p.reverse();
                p
            })
            .collect();
        Ok(PathSet {
            m: self.depth,
            n: self.n,
            x: f64::NAN, // free end; anchor is at the far side
            paths,
        })
    }
}

/// Empirical cone-exit diagnostic. Paths are drawn from the point-to-point
/// polymer over `[0, big_n]` (terminal atom at the origin). For each path,
/// find times `k` in `[n, big_n/2]` where the path is inside the straight
/// cone `|γ_k| <= v k`; the path "exits" if for some later `j <= big_n` the
/// slope deviates, `|γ_j / j - γ_k / k| > q k^{-delta}`. The report carries
/// the fraction of sampled paths that enter and then exit.
#[derive(Debug, Clone, Copy)]
pub struct StraightnessReport {
    pub exit_fraction: f64,
    pub entered: usize,
    pub sampled: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn straightness_diagnostic(
    env: &Environment,
    n: i64,
    big_n: i64,
    v: f64,
    delta: f64,
    q: f64,
    samples: usize,
    seed: u64,
    options: TransferOptions,
) -> Result<StraightnessReport> {
    if !(n >= 1 && big_n >= 2 * n) {
        return Err(Error::InvalidArgument(format!(
            "straightness needs 1 <= n and big_n >= 2n, got n={n}, big_n={big_n}"
        )));
    }
    if !(0.0 < delta && delta < 0.25) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1/4), got {delta}"
        )));
    }
    let pm = PolymerMeasure::new(env, 0, big_n, 0.0, TerminalMeasure::Atom(0.0), options)?;
    let paths = pm.sample_paths(samples, seed)?;
    let mut entered = 0usize;
    let mut exited = 0usize;
    for p in &paths.paths {
        let mut path_entered = false;
        let mut path_exited = false;
        'outer: for k in n..=(big_n / 2) {
            let gk = p[k as usize];
            if gk.abs() <= v * k as f64 {
                path_entered = true;
                let bound = q * (k as f64).powf(-delta);
                let base = gk / k as f64;
                for j in (k + 1)..=big_n {
                    let slope = p[j as usize] / j as f64;
                    if (slope - base).abs() > bound {
                        path_exited = true;
                        break 'outer;
                    }
                }
            }
        }
        if path_entered {
            entered += 1;
        }
        if path_exited {
            exited += 1;
        }
    }
    Ok(StraightnessReport {
        exit_fraction: exited as f64 / samples as f64,
        entered,
        sampled: samples,
    })
}
