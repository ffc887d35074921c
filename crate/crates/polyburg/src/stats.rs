//! Estimators for the asymptotic quantities of the model: the quadratic
//! shape of the free energy in the slope, fluctuation and transversal
//! exponents with bootstrap intervals, partition log-ratio (Busemann-type)
//! sequences, and overlap curves of deep polymer measures.
//!
//! Monte Carlo campaigns draw a fresh environment per replicate, keyed by
//! the replicate index, so every table is re-derivable bit for bit from its
//! spec and seed. Replicates run in parallel and are collected in index
//! order, which keeps results byte-identical across thread counts. Grids
//! come from a policy of the form `|v| n + base + coeff n^{3/4}`; the
//! estimators watch the mass on the outermost nodes and widen the window
//! when the absorbing boundary starts to clip the polymer.

use crate::env::{sample_environment, substream, EnvironmentSpec, StreamPurpose};
use crate::lattice::{Grid, TransferOptions};
use crate::partition::{forward_slices, log_partition_slice};
use crate::polymer::{PolymerMeasure, TerminalMeasure};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Fraction of slice mass allowed on the outermost nodes before the window
/// is considered too small.
const EDGE_MASS_LIMIT: f64 = 1e-8;
/// Multiplicative window growth per widening attempt.
const WIDEN_FACTOR: f64 = 1.5;
/// Widening attempts before giving up.
const MAX_WIDENINGS: usize = 3;
/// Bootstrap resample count for confidence intervals.
const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Window policy for Monte Carlo campaigns: half-width
/// `reach + base_margin + growth_coeff * n^{3/4}` unless overridden.
#[derive(Debug, Clone, Copy)]
pub struct GridPolicy {
    pub dx: f64,
    pub base_margin: f64,
    pub growth_coeff: f64,
    pub half_width_override: Option<f64>,
}

impl Default for GridPolicy {
    fn default() -> Self {
        GridPolicy {
            dx: 0.1,
            base_margin: 12.0,
            growth_coeff: 2.0,
            half_width_override: None,
        }
    }
}

impl GridPolicy {
    pub fn half_width(&self, reach: f64, n: i64) -> f64 {
        self.half_width_override
            .unwrap_or(reach + self.base_margin + self.growth_coeff * (n as f64).powf(0.75))
    }

    pub fn grid_for(&self, reach: f64, n: i64) -> Result<Grid> {
        Grid::symmetric(self.half_width(reach, n), self.dx)
    }
}

#[derive(Debug, Clone)]
pub struct ShapeRow {
    pub v: f64,
    pub n: i64,
    pub mean: f64,
    pub stderr: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone)]
pub struct ShapeTable {
    pub spec: EnvironmentSpec,
    pub n: i64,
    pub grid: Grid,
    /// Number of window widenings the edge monitor forced.
    pub widened: usize,
    pub rows: Vec<ShapeRow>,
}

impl ShapeTable {
    /// CSV with columns `v,n,mean,stderr,replicates`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "v,n,mean,stderr,replicates")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.12e},{},{:.12e},{:.12e},{}",
                r.v, r.n, r.mean, r.stderr, r.replicates
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let r = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / r;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

fn sample_std(samples: &[f64]) -> f64 {
    let r = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / r;
    (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
}

/// Per-slope Monte Carlo means of `(1/n) log Z^{0,n}(0, vn)` over fresh
/// environments. One forward chain per replicate serves every slope, so the
/// columns share environments (common random numbers); each column's mean
/// and stderr are unaffected. The window widens automatically while the
/// outermost nodes carry more than a threshold mass fraction.
pub fn shape_estimate(
    spec: &EnvironmentSpec,
    n: i64,
    v_list: &[f64],
    replicates: usize,
    policy: GridPolicy,
    options: TransferOptions,
) -> Result<ShapeTable> {
    if replicates < 8 {
        return Err(Error::InvalidArgument(format!(
            "shape estimation needs at least 8 replicates, got {replicates}"
        )));
    }
    if v_list.is_empty() || n < 1 {
        return Err(Error::InvalidArgument(
            "shape estimation needs a nonempty slope list and n >= 1".into(),
        ));
    }
    let reach = v_list.iter().fold(0.0f64, |a, v| a.max(v.abs())) * n as f64;
    let mut half = policy.half_width(reach, n);
    for attempt in 0..=MAX_WIDENINGS {
        let grid = Grid::symmetric(half, policy.dx)?;
        let per_rep: Vec<Result<(f64, Vec<f64>)>> = (0..replicates as u32)
            .into_par_iter()
            .map(|r| {
                let env = sample_environment(spec, grid, (0, n), r)?;
                let slice = log_partition_slice(&env, 0, n, 0.0, options)?;
                let frac = slice.edge_mass_fraction();
                let per_v = v_list
                    .iter()
                    .map(|&v| slice.values.value(grid.nearest_index(v * n as f64)) / n as f64)
                    .collect();
                Ok((frac, per_v))
            })
            .collect();
        let mut worst_edge = 0.0f64;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); v_list.len()];
        for r in per_rep {
            let (frac, per_v) = r?;
            worst_edge = worst_edge.max(frac);
            for (col, val) in samples.iter_mut().zip(per_v) {
                col.push(val);
            }
        }
        if worst_edge <= EDGE_MASS_LIMIT {
            let rows = v_list
                .iter()
                .zip(&samples)
                .map(|(&v, col)| {
                    let (mean, stderr) = mean_and_stderr(col);
                    ShapeRow {
                        v,
                        n,
                        mean,
                        stderr,
                        replicates,
                    }
                })
                .collect();
            return Ok(ShapeTable {
                spec: spec.clone(),
                n,
                grid,
                widened: attempt,
                rows,
            });
        }
        half *= WIDEN_FACTOR;
    }
    Err(Error::Degenerate(format!(
        "edge mass still above {EDGE_MASS_LIMIT} after {MAX_WIDENINGS} window widenings; \
         the window policy cannot contain the polymer"
    )))
}

#[derive(Debug, Clone, Copy)]
pub struct ShapeFit {
    pub alpha0: f64,
    /// Coefficient of v² in the fitted quadratic. Tilting by v costs v²/(4κ)
    /// of free energy per step, so the expected value is -1/(4κ).
    pub curvature: f64,
    pub rms_residual: f64,
}

/// Weighted least squares of the table means against `a + c v²`, weights
/// `1/stderr²` (floored to keep exact tables finite). The model is even in v
/// because the kernel is reflection symmetric, so a linear term would only
/// fit noise.
pub fn quadratic_shape_fit(table: &ShapeTable) -> Result<ShapeFit> {
    let mut distinct: Vec<f64> = Vec::new();
    for r in &table.rows {
        if !distinct.iter().any(|d| (d - r.v).abs() < 1e-12) {
            distinct.push(r.v);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "quadratic fit needs at least 3 distinct slopes, got {}",
            distinct.len()
        )));
    }
    let pts: Vec<(f64, f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.v * r.v, r.mean, 1.0 / r.stderr.max(1e-12).powi(2)))
        .collect();
    let z_min = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let z_max = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if z_max - z_min < 1e-12 {
        return Err(Error::Degenerate(
            "quadratic fit is rank deficient: all slopes share one |v|".into(),
        ));
    }
    let (mut sw, mut swz, mut swzz, mut swm, mut swzm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(z, m, w) in &pts {
        sw += w;
        swz += w * z;
        swzz += w * z * z;
        swm += w * m;
        swzm += w * z * m;
    }
    let denom = sw * swzz - swz * swz;
    let curvature = (sw * swzm - swz * swm) / denom;
    let alpha0 = (swm - curvature * swz) / sw;
    let rms = (pts
        .iter()
        .map(|&(z, m, _)| (m - alpha0 - curvature * z).powi(2))
        .sum::<f64>()
        / pts.len() as f64)
        .sqrt();
    Ok(ShapeFit {
        alpha0,
        curvature,
        rms_residual: rms,
    })
}

#[derive(Debug, Clone)]
pub struct ScaleRow {
    pub n: i64,
    /// The fitted statistic at this scale (standard deviation of the free
    /// energy, or the mean 0.9-quantile of path deviation).
    pub statistic: f64,
    /// Mean of the underlying per-replicate values (the free energy itself
    /// for the fluctuation campaign), kept for the doubling diagnostic.
    pub mean_value: f64,
}

#[derive(Debug, Clone)]
pub struct ExponentFit {
    pub exponent: f64,
    /// Bootstrap percentile interval, expanded if needed so it contains the
    /// point estimate.
    pub ci: (f64, f64),
    pub rows: Vec<ScaleRow>,
}

impl ExponentFit {
    /// CSV with columns `n,statistic,mean_value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "n,statistic,mean_value")?;
        for r in &self.rows {
            writeln!(w, "{},{:.12e},{:.12e}", r.n, r.statistic, r.mean_value)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ordinary least-squares slope of `ln y` against `ln x`. Invariant under
/// rescaling the `y` values by any positive constant.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(
            "log-log slope needs at least two points".into(),
        ));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::InvalidArgument(
            "log-log slope needs positive coordinates".into(),
        ));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(Error::Degenerate("log-log slope: degenerate x values".into()));
    }
    Ok((n * sxy - sx * sy) / denom)
}

fn validate_scales(n_list: &[i64], replicates: usize) -> Result<()> {
    if n_list.len() < 2 || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] < 1 {
        return Err(Error::InvalidArgument(
            "scale list must be strictly increasing with n >= 1".into(),
        ));
    }
    if replicates < 32 {
        return Err(Error::InvalidArgument(format!(
            "exponent estimation needs at least 32 replicates, got {replicates}"
        )));
    }
    Ok(())
}

/// Bootstrap a log-log slope over per-scale sample sets: resample each
/// scale's values with replacement, reduce with `stat`, refit the slope.
fn bootstrap_slope_ci(
    samples: &[Vec<f64>],
    n_list: &[i64],
    stat: impl Fn(&[f64]) -> f64,
    estimate: f64,
    seed: u64,
) -> (f64, f64) {
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut buf: Vec<f64> = Vec::new();
    for b in 0..BOOTSTRAP_RESAMPLES {
        let mut rng = substream(seed, StreamPurpose::Bootstrap, b as u32, 0);
        let mut pts = Vec::with_capacity(n_list.len());
        let mut ok = true;
        for (col, &n) in samples.iter().zip(n_list) {
            buf.clear();
            for _ in 0..col.len() {
                buf.push(col[rng.gen_range(0..col.len())]);
            }
            let s = stat(&buf);
            if s <= 0.0 {
                ok = false;
                break;
            }
            pts.push((n as f64, s));
        }
        if !ok {
            continue;
        }
        if let Ok(s) = loglog_slope(&pts) {
            slopes.push(s);
        }
    }
    if slopes.len() < 100 {
        // Resampling almost always degenerate; fall back to a point interval.
        return (estimate, estimate);
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[(slopes.len() as f64 * 0.025) as usize];
    let hi = slopes[((slopes.len() as f64 * 0.975) as usize).min(slopes.len() - 1)];
    (lo.min(estimate), hi.max(estimate))
}

/// Fluctuation-exponent campaign: per scale `n`, the sample standard
/// deviation of `log Z^{0,n}(0,0)` over fresh environments; the exponent is
/// the log-log slope with a bootstrap interval. All scales share one grid
/// (sized for the largest) and one chain per replicate. Zero variance at
/// any scale (deterministic potential) is refused.
pub fn fluctuation_exponent(
    spec: &EnvironmentSpec,
    n_list: &[i64],
    replicates: usize,
    policy: GridPolicy,
    options: TransferOptions,
) -> Result<ExponentFit> {
    validate_scales(n_list, replicates)?;
    let n_max = *n_list.last().unwrap();
    let mut half = policy.half_width(0.0, n_max);
    for _ in 0..=MAX_WIDENINGS {
        let grid = Grid::symmetric(half, policy.dx)?;
        let origin = grid.index_at(0.0)?;
        let per_rep: Vec<Result<(f64, Vec<f64>)>> = (0..replicates as u32)
            .into_par_iter()
            .map(|r| {
                let env = sample_environment(spec, grid, (0, n_max), r)?;
                let slices = forward_slices(&env, 0, n_max, 0.0, options)?;
                let last = slices[slices.len() - 1].values();
                let total = crate::lattice::logsumexp(last);
                let edge = crate::lattice::logsumexp(&[last[0], last[last.len() - 1]]);
                let frac = if total == f64::NEG_INFINITY {
                    0.0
                } else {
                    (edge - total).exp()
                };
                let logz = n_list
                    .iter()
                    .map(|&n| slices[(n - 1) as usize].value(origin))
                    .collect();
                Ok((frac, logz))
            })
            .collect();
        let mut worst_edge = 0.0f64;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); n_list.len()];
        for r in per_rep {
            let (frac, logz) = r?;
            worst_edge = worst_edge.max(frac);
            for (col, val) in samples.iter_mut().zip(logz) {
                col.push(val);
            }
        }
        if worst_edge > EDGE_MASS_LIMIT {
            half *= WIDEN_FACTOR;
            continue;
        }
        let mut rows = Vec::with_capacity(n_list.len());
        let mut pts = Vec::with_capacity(n_list.len());
        for (col, &n) in samples.iter().zip(n_list) {
            let std = sample_std(col);
            if std < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "free energy at n = {n} has zero variance (deterministic potential?); \
                     the exponent fit is undefined"
                )));
            }
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            rows.push(ScaleRow {
                n,
                statistic: std,
                mean_value: mean,
            });
            pts.push((n as f64, std));
        }
        let exponent = loglog_slope(&pts)?;
        let ci = bootstrap_slope_ci(&samples, n_list, sample_std, exponent, spec.master_seed);
        return Ok(ExponentFit { exponent, ci, rows });
    }
    Err(Error::Degenerate(
        "edge mass stayed above the limit after all window widenings".into(),
    ))
}

/// Mean absolute doubling defect `|mean(2n) - 2 mean(n)|` for every scale
/// pair `(n, 2n)` present in the fit's table (free-energy campaigns only).
pub fn doubling_residuals(fit: &ExponentFit) -> Vec<(i64, f64)> {
    let mut out = Vec::new();
    for r in &fit.rows {
        if let Some(r2) = fit.rows.iter().find(|s| s.n == 2 * r.n) {
            out.push((r.n, (r2.mean_value - 2.0 * r.mean_value).abs()));
        }
    }
    out
}

/// Transversal-exponent campaign: per scale `n`, sample paths of the
/// point-to-point polymer from `(0,0)` to `(n, vn)` and record the
/// 0.9-quantile of `max_k |γ_k - kv|` per replicate; the statistic is the
/// replicate mean and the exponent its log-log slope with bootstrap
/// interval.
#[allow(clippy::too_many_arguments)]
pub fn transversal_exponent(
    spec: &EnvironmentSpec,
    n_list: &[i64],
    replicates: usize,
    paths_per_replicate: usize,
    v: f64,
    policy: GridPolicy,
    options: TransferOptions,
) -> Result<ExponentFit> {
    validate_scales(n_list, replicates)?;
    if paths_per_replicate < 10 {
        return Err(Error::InvalidArgument(
            "quantile estimation needs at least 10 paths per replicate".into(),
        ));
    }
    let n_max = *n_list.last().unwrap();
    let grid = policy.grid_for(v.abs() * n_max as f64, n_max)?;
    let per_rep: Vec<Result<Vec<f64>>> = (0..replicates as u32)
        .into_par_iter()
        .map(|r| {
            let env = sample_environment(spec, grid, (0, n_max), r)?;
            let mut quantiles = Vec::with_capacity(n_list.len());
            for &n in n_list {
                let target = grid.node(grid.nearest_index(v * n as f64));
                let pm =
                    PolymerMeasure::new(&env, 0, n, 0.0, TerminalMeasure::Atom(target), options)?;
                let path_seed = substream(spec.master_seed, StreamPurpose::Auxiliary, r, n)
                    .gen::<u64>();
                let paths = pm.sample_paths(paths_per_replicate, path_seed)?;
                let mut devs: Vec<f64> = paths
                    .paths
                    .iter()
                    .map(|p| {
                        p.iter()
                            .enumerate()
                            .map(|(k, &g)| (g - v * k as f64).abs())
                            .fold(0.0f64, f64::max)
                    })
                    .collect();
                devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let idx = ((devs.len() as f64 * 0.9).ceil() as usize - 1).min(devs.len() - 1);
                quantiles.push(devs[idx]);
            }
            Ok(quantiles)
        })
        .collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); n_list.len()];
    for r in per_rep {
        for (col, val) in samples.iter_mut().zip(r?) {
            col.push(val);
        }
    }
    let mean = |col: &[f64]| col.iter().sum::<f64>() / col.len() as f64;
    let mut rows = Vec::with_capacity(n_list.len());
    let mut pts = Vec::with_capacity(n_list.len());
    for (col, &n) in samples.iter().zip(n_list) {
        let m = mean(col);
        if m <= 0.0 {
            return Err(Error::Degenerate(format!(
                "path deviation statistic vanished at n = {n}"
            )));
        }
        rows.push(ScaleRow {
            n,
            statistic: m,
            mean_value: m,
        });
        pts.push((n as f64, m));
    }
    let exponent = loglog_slope(&pts)?;
    let ci = bootstrap_slope_ci(&samples, n_list, mean, exponent, spec.master_seed ^ 1);
    Ok(ExponentFit { exponent, ci, rows })
}

#[derive(Debug, Clone)]
pub struct BusemannRow {
    pub depth: i64,
    /// Grid-snapped base point `vN` of the primary sequence.
    pub y: f64,
    /// Grid-snapped base point of the perturbed sequence `vN + scale·√|N|`.
    pub y_perturbed: f64,
    pub primary: f64,
    pub perturbed: f64,
}

/// Log partition ratios `log Z^{N,n1}(y_N, x1) - log Z^{N,n2}(y_N, x2)`
/// along a deepening start `y_N = vN`, together with the same ratio along
/// the perturbed sequence `vN + perturb_scale·√|N|`. Agreement of the two
/// columns at deep `N` is the numerical trace of sequence-independence of
/// the limit. Two backward chains (one per anchor) serve every depth.
pub fn busemann_estimate(
    env: &crate::env::Environment,
    a: (i64, f64),
    b: (i64, f64),
    v: f64,
    depths: &[i64],
    perturb_scale: f64,
    options: TransferOptions,
) -> Result<Vec<BusemannRow>> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("depth list is empty".into()));
    }
    let (n1, x1) = a;
    let (n2, x2) = b;
    let deepest = *depths.iter().min().unwrap();
    if depths.iter().any(|&d| d >= n1.min(n2)) {
        return Err(Error::InvalidArgument(
            "every depth must precede both anchor times".into(),
        ));
    }
    let grid = env.grid();
    let origin = grid.node(grid.nearest_index(0.0));
    let pm1 = PolymerMeasure::new(env, deepest, n1, origin, TerminalMeasure::Atom(x1), options)?;
    let pm2 = PolymerMeasure::new(env, deepest, n2, origin, TerminalMeasure::Atom(x2), options)?;
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let base = v * depth as f64;
        let pert = base + perturb_scale * (depth.abs() as f64).sqrt();
        if !grid.contains(base) || !grid.contains(pert) {
            return Err(Error::OutOfRange(format!(
                "window does not cover the start points {base} / {pert} at depth {depth}"
            )));
        }
        let iy = grid.nearest_index(base);
        let ip = grid.nearest_index(pert);
        let b1 = pm1.backward_weight(depth)?;
        let b2 = pm2.backward_weight(depth)?;
        rows.push(BusemannRow {
            depth,
            y: grid.node(iy),
            y_perturbed: grid.node(ip),
            primary: b1.value(iy) - b2.value(iy),
            perturbed: b1.value(ip) - b2.value(ip),
        });
    }
    Ok(rows)
}

/// CSV with columns `depth,y,y_perturbed,primary,perturbed`.
pub fn write_busemann_csv(path: &Path, rows: &[BusemannRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "depth,y,y_perturbed,primary,perturbed")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.depth, r.y, r.y_perturbed, r.primary, r.perturbed
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OverlapRow {
    pub depth: i64,
    pub horizon: i64,
    pub tv: f64,
}

/// Overlap curve: total-variation distance between the time-N marginals of
/// two polymer measures anchored at `(n1,x1)` and `(n2,x2)`, each realized
/// at finite horizon `M = 2N` with start `vM`. The horizon is twice the
/// readout depth so the start influence at the readout time is already
/// stabilized; decay of the curve in |N| witnesses the coupling of deep
/// measures.
pub fn overlap_curve(
    env: &crate::env::Environment,
    a: (i64, f64),
    b: (i64, f64),
    v: f64,
    depths: &[i64],
    options: TransferOptions,
) -> Result<Vec<OverlapRow>> {
    if depths.is_empty() {
        return Err(Error::InvalidArgument("depth list is empty".into()));
    }
    let (n1, x1) = a;
    let (n2, x2) = b;
    if depths.iter().any(|&d| d >= n1.min(n2) || d >= 0) {
        return Err(Error::InvalidArgument(
            "overlap depths must be negative and precede both anchors".into(),
        ));
    }
    let grid = env.grid();
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let horizon = 2 * depth;
        let start = v * horizon as f64;
        if !grid.contains(start) {
            return Err(Error::OutOfRange(format!(
                "window does not cover the start point {start} at horizon {horizon}"
            )));
        }
        let y = grid.node(grid.nearest_index(start));
        let pm1 =
            PolymerMeasure::new(env, horizon, n1, y, TerminalMeasure::Atom(x1), options)?;
        let pm2 =
            PolymerMeasure::new(env, horizon, n2, y, TerminalMeasure::Atom(x2), options)?;
        let tv = pm1
            .marginal_density(depth)?
            .tv_distance(&pm2.marginal_density(depth)?)?;
        rows.push(OverlapRow {
            depth,
            horizon,
            tv,
        });
    }
    Ok(rows)
}

/// CSV with columns `depth,horizon,tv`.
pub fn write_overlap_csv(path: &Path, rows: &[OverlapRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "depth,horizon,tv")?;
    for r in rows {
        writeln!(w, "{},{},{:.12e}", r.depth, r.horizon, r.tv)?;
    }
    w.flush()?;
    Ok(())
}

/// One-sided sign-test p-value: probability of at least `successes` heads in
/// `trials` fair coin flips.
pub fn sign_test_p_value(successes: usize, trials: usize) -> f64 {
    if trials == 0 || successes > trials {
        return 1.0;
    }
    let mut coeff = 1.0f64;
    let mut tail = 0.0f64;
    // Walk the binomial coefficients from j = 0 upward.
    let mut acc = vec![0.0f64; trials + 1];
    for (j, slot) in acc.iter_mut().enumerate() {
        *slot = coeff;
        coeff = coeff * (trials - j) as f64 / (j + 1) as f64;
    }
    for &c in acc.iter().skip(successes) {
        tail += c;
    }
    tail * 0.5f64.powi(trials as i32)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS needs nonempty samples".into()));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        // Step past every copy of the smaller value on both sides so ties
        // move the two empirical CDFs together.
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / xa.len() as f64;
        let fb = j as f64 / xb.len() as f64;
        d = d.max((fa - fb).abs());
    }
    Ok(d)
}
