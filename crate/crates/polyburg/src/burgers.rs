//! Kick-forced viscous Burgers dynamics in Hopf-Cole coordinates.
//!
//! The velocity field `u` is represented through its potential `W` (with
//! `W(0) = 0`) and the positive profile `φ = exp(-W/(2κ))`. One time step is
//! a kick by the potential slice followed by an exact heat-kernel step, which
//! is precisely the forward transfer of the lattice module; the state is
//! renormalized so `log φ(0) = 0` after every step and the divided-out
//! constants accumulate in a running log. Because the accumulator is a plain
//! sum, the constants satisfy the composition law `C_{m,n} C_{n,k} = C_{m,k}`
//! exactly, and evolving `m -> k` directly or through any intermediate time
//! performs the identical float operations.
//!
//! Velocities come out of a state in two ways: centered differences of
//! `log φ` (generic, second order), or, for polymer-backed approximants, the
//! exact identity `u(n, x) = x - mean(γ_{n-1})` under the path measure ending
//! at `(n, x)`, which needs no differencing at all.

use crate::env::Environment;
use crate::lattice::{self, Convention, Direction, Grid, LogDensity, TransferOptions};
use crate::polymer::{PolymerMeasure, TerminalMeasure};
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// A gridded velocity profile. `slope` is optional declared mean-slope
/// metadata; `depth` records the pullback depth for approximants of global
/// solutions; `one_sided_edges` marks profiles whose first and last values
/// came from one-sided differences.
#[derive(Debug, Clone)]
pub struct VelocityProfile {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub slope: Option<f64>,
    pub depth: Option<i64>,
    pub one_sided_edges: bool,
}

impl VelocityProfile {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count {
            return Err(Error::GridMismatch(format!(
                "velocity has {} values on a {}-node grid",
                values.len(),
                grid.count
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "velocity values must be finite".into(),
            ));
        }
        Ok(VelocityProfile {
            grid,
            values,
            slope: None,
            depth: None,
            one_sided_edges: false,
        })
    }

    /// Nodes whose values do not rest on one-sided differences.
    pub fn trusted_range(&self) -> std::ops::Range<usize> {
        if self.one_sided_edges && self.grid.count > 2 {
            1..self.grid.count - 1
        } else {
            0..self.grid.count
        }
    }
}

/// A velocity potential `W` with the normalization `W(0) = 0`; the
/// constructor shifts any finite input onto that gauge.
#[derive(Debug, Clone)]
pub struct PotentialProfile {
    grid: Grid,
    values: Vec<f64>,
}

impl PotentialProfile {
    pub fn new(grid: Grid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count {
            return Err(Error::GridMismatch(format!(
                "potential has {} values on a {}-node grid",
                values.len(),
                grid.count
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "potential values must be finite".into(),
            ));
        }
        let origin = grid.index_at(0.0)?;
        let w0 = values[origin];
        for v in &mut values {
            *v -= w0;
        }
        values[origin] = 0.0;
        Ok(PotentialProfile { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, (0..grid.count).map(|i| f(grid.node(i))).collect())
    }

    /// Antiderivative of a velocity profile by the trapezoid rule outward
    /// from the origin (exact for piecewise-linear velocities on the grid).
    pub fn from_velocity(grid: Grid, u: &[f64]) -> Result<Self> {
        if u.len() != grid.count {
            return Err(Error::GridMismatch(format!(
                "velocity has {} values on a {}-node grid",
                u.len(),
                grid.count
            )));
        }
        let origin = grid.index_at(0.0)?;
        let mut w = vec![0.0; grid.count];
        for i in origin..grid.count - 1 {
            w[i + 1] = w[i] + 0.5 * grid.dx * (u[i] + u[i + 1]);
        }
        for i in (0..origin).rev() {
            w[i] = w[i + 1] - 0.5 * grid.dx * (u[i] + u[i + 1]);
        }
        Self::new(grid, w)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Secant slopes `W(x_min)/x_min` and `W(x_max)/x_max`, the finite-window
    /// stand-ins for the asymptotic mean slopes.
    pub fn edge_secants(&self) -> Result<(f64, f64)> {
        let x_lo = self.grid.node(0);
        let x_hi = self.grid.x_max();
        if !(x_lo < 0.0 && x_hi > 0.0) {
            return Err(Error::InvalidArgument(
                "edge secants need the grid to straddle the origin".into(),
            ));
        }
        Ok((
            self.values[0] / x_lo,
            self.values[self.grid.count - 1] / x_hi,
        ))
    }
}

/// Hopf-Cole state: `log φ` with `log φ(0) = 0`, its time stamp, the
/// diffusion constant, and the running log of divided-out normalization
/// constants.
#[derive(Debug, Clone)]
pub struct HopfColeState {
    grid: Grid,
    time: i64,
    kappa: f64,
    log_phi: Vec<f64>,
    log_const: f64,
}

impl HopfColeState {
    /// Build a state from raw `log φ` values; the origin value must be finite
    /// (it is shifted to zero and the shift joins the accumulator), other
    /// nodes may carry `-inf` for compactly supported profiles.
    pub fn from_log_values(
        grid: Grid,
        time: i64,
        kappa: f64,
        mut log_phi: Vec<f64>,
    ) -> Result<Self> {
        if log_phi.len() != grid.count {
            return Err(Error::GridMismatch(format!(
                "state has {} values on a {}-node grid",
                log_phi.len(),
                grid.count
            )));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        if log_phi.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidArgument(
                "log phi must be below +inf and not NaN".into(),
            ));
        }
        let origin = grid.index_at(0.0)?;
        let c = log_phi[origin];
        if !c.is_finite() {
            return Err(Error::InvalidArgument(
                "log phi must be finite at the origin to fix the normalization".into(),
            ));
        }
        for v in &mut log_phi {
            *v -= c;
        }
        log_phi[origin] = 0.0;
        Ok(HopfColeState {
            grid,
            time,
            kappa,
            log_phi,
            log_const: c,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn time(&self) -> i64 {
        self.time
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn log_phi(&self) -> &[f64] {
        &self.log_phi
    }

    /// Accumulated log of the constants divided out since the state was
    /// created (including the initial gauge shift).
    pub fn log_const(&self) -> f64 {
        self.log_const
    }
}

/// `W -> φ = exp(-W/(2κ))` at a given time stamp.
pub fn hopf_cole(w: &PotentialProfile, kappa: f64, time: i64) -> Result<HopfColeState> {
    let inv = 1.0 / (2.0 * kappa);
    let log_phi = w.values().iter().map(|v| -v * inv).collect();
    HopfColeState::from_log_values(w.grid(), time, kappa, log_phi)
}

/// `φ -> W = -2κ log φ`, normalized to `W(0) = 0`. Requires a state with
/// finite values everywhere (a potential cannot encode zero mass).
pub fn inverse_hopf_cole(state: &HopfColeState) -> Result<PotentialProfile> {
    let scale = -2.0 * state.kappa;
    let values: Vec<f64> = state.log_phi.iter().map(|v| v * scale).collect();
    PotentialProfile::new(state.grid, values)
}

/// Advance the state to time `n`: for each step, kick by the potential slice
/// and apply the heat kernel, then renormalize at the origin. Errors if the
/// origin mass dies (possible only with banded transfers and compactly
/// supported states).
pub fn kick_evolve(
    env: &Environment,
    state: &HopfColeState,
    n: i64,
    options: TransferOptions,
) -> Result<HopfColeState> {
    if n <= state.time {
        return Err(Error::InvalidArgument(format!(
            "target time {n} is not after state time {}",
            state.time
        )));
    }
    if env.grid() != state.grid {
        return Err(Error::GridMismatch(
            "state and environment grids differ".into(),
        ));
    }
    if (env.kappa() - state.kappa).abs() > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "state kappa {} differs from environment kappa {}",
            state.kappa,
            env.kappa()
        )));
    }
    let origin = state.grid.index_at(0.0)?;
    let mut cur = LogDensity::new(state.grid, state.log_phi.clone())?;
    let mut log_const = state.log_const;
    for k in state.time..n {
        cur = lattice::apply_transfer(
            env.slice(k)?,
            state.kappa,
            &cur,
            Direction::Forward,
            Convention::IncludeLeft,
            options,
        )?;
        let c = cur.value(origin);
        if c == f64::NEG_INFINITY {
            return Err(Error::MassCollapse(format!(
                "profile mass at the origin vanished during the step to time {}",
                k + 1
            )));
        }
        cur = cur.add_scalar(-c);
        log_const += c;
    }
    let mut log_phi = cur.values().to_vec();
    log_phi[origin] = 0.0;
    Ok(HopfColeState {
        grid: state.grid,
        time: n,
        kappa: state.kappa,
        log_phi,
        log_const,
    })
}

/// `u = -2κ ∂_x log φ` by centered differences, one-sided at the window
/// edges (flagged on the profile).
pub fn velocity_from_state(state: &HopfColeState) -> Result<VelocityProfile> {
    let g = state.grid;
    if g.count < 3 {
        return Err(Error::InvalidArgument(
            "velocity extraction needs at least three nodes".into(),
        ));
    }
    let lp = &state.log_phi;
    if lp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "velocity is undefined where the profile has no mass".into(),
        ));
    }
    let scale = -2.0 * state.kappa;
    let mut u = vec![0.0; g.count];
    u[0] = scale * (lp[1] - lp[0]) / g.dx;
    for i in 1..g.count - 1 {
        u[i] = scale * (lp[i + 1] - lp[i - 1]) / (2.0 * g.dx);
    }
    u[g.count - 1] = scale * (lp[g.count - 1] - lp[g.count - 2]) / g.dx;
    let mut profile = VelocityProfile::new(g, u)?;
    profile.one_sided_edges = true;
    Ok(profile)
}

/// Weighted-mean sweep shared by the polymer-backed velocity extractors:
/// given the log column `c(y)` of everything in the path weight except the
/// final kernel factor, returns `u(x) = x - mean(y)` under
/// `w_x(y) ∝ exp(c(y)) g_{2κ}(x - y)` for every grid node x.
fn mean_velocity_sweep(
    column: &LogDensity,
    kappa: f64,
    options: TransferOptions,
) -> Result<Vec<f64>> {
    let g = *column.grid();
    let inv = 1.0 / (2.0 * kappa);
    let reach = match options.band_sigmas {
        Some(s) => (((s * (2.0 * kappa).sqrt()) / g.dx).ceil() as usize).min(g.count - 1),
        None => g.count - 1,
    };
    let vals = column.values();
    let mut out = vec![0.0; g.count];
    for (ix, o) in out.iter_mut().enumerate() {
        let x = g.node(ix);
        let lo = ix.saturating_sub(reach);
        let hi = (ix + reach).min(g.count - 1);
        let mut m = f64::NEG_INFINITY;
        for &v in vals.iter().take(hi + 1).skip(lo) {
            if v > m {
                m = v;
            }
        }
        if m == f64::NEG_INFINITY {
            return Err(Error::MassCollapse(format!(
                "no path mass reaches x = {x} at the final step"
            )));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in lo..=hi {
            if vals[i] == f64::NEG_INFINITY {
                continue;
            }
            let y = g.node(i);
            let d = x - y;
            let w = (vals[i] - m - d * d * inv * 0.5).exp();
            num += y * w;
            den += w;
        }
        *o = x - num / den;
    }
    Ok(out)
}

/// Depth-N approximant of the global solution with mean slope `v`:
/// `u(n, x) = x - mean(γ_{n-1})` under the path measure from `(N, vN)`
/// (snapped to the grid) to `(n, x)`. One forward chain serves every `x`.
pub fn global_solution_approx(
    env: &Environment,
    v: f64,
    n: i64,
    depth: i64,
    options: TransferOptions,
) -> Result<VelocityProfile> {
    if depth >= n - 2 {
        return Err(Error::InvalidArgument(format!(
            "global-solution approximant needs depth < n - 2, got depth={depth}, n={n}"
        )));
    }
    let window = env.window(depth, n)?;
    let grid = window.grid();
    let anchor = v * depth as f64;
    if !grid.contains(anchor) {
        return Err(Error::OutOfRange(format!(
            "anchor v*depth = {anchor} lies outside the window"
        )));
    }
    let start = grid.nearest_index(anchor);
    let mut cur = LogDensity::delta(grid, start)?;
    for k in depth..n - 1 {
        cur = lattice::apply_transfer(
            window.slice(k)?,
            window.kappa(),
            &cur,
            Direction::Forward,
            Convention::IncludeLeft,
            options,
        )?;
    }
    // Fold in the last kick; the remaining kernel factor lives in the sweep.
    let inv = 1.0 / (2.0 * window.kappa());
    let last = window.slice(n - 1)?;
    let column_vals: Vec<f64> = cur
        .values()
        .iter()
        .zip(last)
        .map(|(p, f)| p - f * inv)
        .collect();
    let column = LogDensity::new(grid, column_vals)?;
    let u = mean_velocity_sweep(&column, window.kappa(), options)?;
    let mut profile = VelocityProfile::new(grid, u)?;
    profile.slope = Some(v);
    profile.depth = Some(depth);
    Ok(profile)
}

/// Worst violation of the monotonicity of `x - u(x)` over adjacent trusted
/// nodes: `max_i ((x_i - u_i) - (x_{i+1} - u_{i+1}))`. Nonpositive values
/// certify the property; edge nodes from one-sided differences are skipped.
pub fn monotonicity_residual(u: &VelocityProfile) -> f64 {
    let r = u.trusted_range();
    let mut worst = f64::NEG_INFINITY;
    for i in r.start..r.end.saturating_sub(1) {
        let a = u.grid.node(i) - u.values[i];
        let b = u.grid.node(i + 1) - u.values[i + 1];
        if a - b > worst {
            worst = a - b;
        }
    }
    worst
}

/// Check the finite-window stand-in for the basin conditions of the global
/// solution with slope `v`, using edge secants with an additive margin.
/// Slope gauges: for `v = 0` both secants must vanish within the margin
/// allowance; for `v > 0` the left secant must equal `v` and the right
/// secant must stay above `-v` by the margin; mirrored for `v < 0`.
pub fn check_basin_condition(w: &PotentialProfile, v: f64, margin: f64) -> Result<()> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument("margin must be positive".into()));
    }
    let (s_minus, s_plus) = w.edge_secants()?;
    if v == 0.0 {
        if s_plus < -margin {
            return Err(Error::BasinCondition(format!(
                "right-edge secant {s_plus:.4} < -{margin}: velocity influx from +inf, \
                 so the no-flux condition for v = 0 fails"
            )));
        }
        if s_minus > margin {
            return Err(Error::BasinCondition(format!(
                "left-edge secant {s_minus:.4} > {margin}: velocity influx from -inf, \
                 so the no-flux condition for v = 0 fails"
            )));
        }
    } else if v > 0.0 {
        if (s_minus - v).abs() > margin {
            return Err(Error::BasinCondition(format!(
                "left-edge secant {s_minus:.4} is not within {margin} of v = {v}: \
                 the influx-from-the-left condition fails"
            )));
        }
        if s_plus <= -v + margin {
            return Err(Error::BasinCondition(format!(
                "right-edge secant {s_plus:.4} does not exceed -v + margin = {:.4}: \
                 the right flux is too strong for v = {v}",
                -v + margin
            )));
        }
    } else {
        if (s_plus - v).abs() > margin {
            return Err(Error::BasinCondition(format!(
                "right-edge secant {s_plus:.4} is not within {margin} of v = {v}: \
                 the influx-from-the-right condition fails"
            )));
        }
        if s_minus >= -v - margin {
            return Err(Error::BasinCondition(format!(
                "left-edge secant {s_minus:.4} is not below -v - margin = {:.4}: \
                 the left flux is too strong for v = {v}",
                -v - margin
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PullbackRow {
    pub initial_id: usize,
    pub depth: i64,
    pub sup_diff: f64,
}

#[derive(Debug, Clone)]
pub struct PullbackTable {
    pub v: f64,
    pub n: i64,
    pub eval: (f64, f64),
    /// Velocity at time n of the pure tilt `W = v x` started at the deepest
    /// requested depth; the stand-in for the global solution.
    pub reference: VelocityProfile,
    pub rows: Vec<PullbackRow>,
}

impl PullbackTable {
    /// Sup-differences for one initial condition, in the depth order of the
    /// table.
    pub fn column(&self, initial_id: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.initial_id == initial_id)
            .map(|r| r.sup_diff)
            .collect()
    }

    /// CSV with columns `initial_id,depth,sup_diff`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "initial_id,depth,sup_diff")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.12e}", r.initial_id, r.depth, r.sup_diff)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pullback-attraction experiment: evolve each admissible initial potential
/// from each depth up to time `n` and record the sup-difference of the
/// resulting velocity from the deepest-tilt reference over the evaluation
/// interval. Initial conditions outside the basin of `v` are refused with a
/// diagnostic naming the violated condition.
#[allow(clippy::too_many_arguments)]
pub fn pullback_experiment(
    env: &Environment,
    initials: &[PotentialProfile],
    v: f64,
    depths: &[i64],
    n: i64,
    eval: (f64, f64),
    margin: f64,
    options: TransferOptions,
) -> Result<PullbackTable> {
    if initials.is_empty() || depths.is_empty() {
        return Err(Error::InvalidArgument(
            "pullback needs at least one initial condition and one depth".into(),
        ));
    }
    if depths.iter().any(|&d| d >= n) {
        return Err(Error::InvalidArgument(format!(
            "all depths must precede the evaluation time {n}"
        )));
    }
    if !(eval.0 < eval.1) {
        return Err(Error::InvalidArgument(format!(
            "evaluation interval [{}, {}] is empty",
            eval.0, eval.1
        )));
    }
    let grid = env.grid();
    for w in initials {
        if w.grid() != grid {
            return Err(Error::GridMismatch(
                "initial potential lives on a different grid".into(),
            ));
        }
        check_basin_condition(w, v, margin)?;
    }
    let deepest = *depths.iter().min().unwrap();

    let tilt = PotentialProfile::from_fn(grid, |x| v * x)?;
    let ref_state = kick_evolve(env, &hopf_cole(&tilt, env.kappa(), deepest)?, n, options)?;
    let reference = velocity_from_state(&ref_state)?;

    let lo = grid.nearest_index(eval.0).max(1);
    let hi = grid.nearest_index(eval.1).min(grid.count - 2);
    if lo >= hi {
        return Err(Error::OutOfRange(
            "evaluation interval covers no interior nodes".into(),
        ));
    }

    let mut rows = Vec::with_capacity(initials.len() * depths.len());
    for (id, w) in initials.iter().enumerate() {
        for &depth in depths {
            let state = kick_evolve(env, &hopf_cole(w, env.kappa(), depth)?, n, options)?;
            let u = velocity_from_state(&state)?;
            let mut sup = 0.0f64;
            for i in lo..=hi {
                sup = sup.max((u.values[i] - reference.values[i]).abs());
            }
            rows.push(PullbackRow {
                initial_id: id,
                depth,
                sup_diff: sup,
            });
        }
    }
    Ok(PullbackTable {
        v,
        n,
        eval,
        reference,
        rows,
    })
}

/// Exact velocity of the evolved state at time `n`, without differencing:
/// evolve `φ` to time `n-1`, fold in the last kick, and read
/// `u(x) = x - mean(y)` under the final-step weight. This is the exact
/// spatial derivative of the grid evolution at every node (the kernel factor
/// is differentiable in `x`), so it matches measure-based extraction to
/// roundoff, while centered differences approach it at second order in `dx`.
pub fn velocity_sweep_from_state(
    env: &Environment,
    state: &HopfColeState,
    n: i64,
    options: TransferOptions,
) -> Result<VelocityProfile> {
    if n <= state.time {
        return Err(Error::InvalidArgument(format!(
            "target time {n} is not after state time {}",
            state.time
        )));
    }
    let at_last = if state.time < n - 1 {
        kick_evolve(env, state, n - 1, options)?
    } else {
        state.clone()
    };
    let inv = 1.0 / (2.0 * at_last.kappa);
    let last = env.slice(n - 1)?;
    let column_vals: Vec<f64> = at_last
        .log_phi
        .iter()
        .zip(last)
        .map(|(p, f)| p - f * inv)
        .collect();
    let column = LogDensity::new(at_last.grid, column_vals)?;
    let u = mean_velocity_sweep(&column, at_last.kappa, options)?;
    VelocityProfile::new(at_last.grid, u)
}

/// Velocity at selected nodes through the path-measure machinery: anchor the
/// point-to-line measure at `(n, x)` with free-end weight `φ` at the state's
/// time and read `x - mean(γ_{n-1})`. Slow but independent of the transfer
/// sweep; used to cross-check the fast extractors.
pub fn velocity_via_path_measure(
    env: &Environment,
    state: &HopfColeState,
    n: i64,
    x: f64,
    options: TransferOptions,
) -> Result<f64> {
    let weight = LogDensity::new(state.grid, state.log_phi.clone())?;
    let p2l =
        crate::polymer::point_to_line_measure(env, &weight, state.time, n, x, options)?;
    let (mean, _) = p2l.marginal_density(n - 1)?.mean_and_variance()?;
    Ok(x - mean)
}

/// Velocity of the point-to-point approximant at one node, through a full
/// polymer measure; cross-checks `global_solution_approx`.
pub fn approx_velocity_via_polymer(
    env: &Environment,
    v: f64,
    n: i64,
    depth: i64,
    x: f64,
    options: TransferOptions,
) -> Result<f64> {
    let grid = env.grid();
    let anchor = grid.node(grid.nearest_index(v * depth as f64));
    let pm = PolymerMeasure::new(env, depth, n, anchor, TerminalMeasure::Atom(x), options)?;
    let (mean, _) = pm.marginal_density(n - 1)?.mean_and_variance()?;
    Ok(x - mean)
}

/// CSV export of a state: columns `x,u,w,log_phi` (velocity by centered
/// differences, one-sided at the edges).
pub fn write_profile_csv(path: &Path, state: &HopfColeState) -> Result<()> {
    let u = velocity_from_state(state)?;
    let w = inverse_hopf_cole(state)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,u,w,log_phi")?;
    for i in 0..state.grid.count {
        writeln!(
            out,
            "{:.17e},{:.17e},{:.17e},{:.17e}",
            state.grid.node(i),
            u.values[i],
            w.value(i),
            state.log_phi[i]
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, EnvironmentSpec, GeneratorKind};

    fn spec(seed: u64, amplitude: f64) -> EnvironmentSpec {
        EnvironmentSpec {
            kind: GeneratorKind::MovingAverageGaussian,
            amplitude,
            correlation_range: 0.5,
            offset: 0.0,
            kappa: 0.5,
            master_seed: seed,
        }
    }

    fn zero_env(grid: Grid, range: (i64, i64)) -> Environment {
        sample_environment(&spec(0, 0.0), grid, range, 0).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() <= tol,
            "{what}: {a} vs {b} (|diff| = {:.3e} > {tol:.3e})",
            (a - b).abs()
        );
    }

    #[test]
    fn hopf_cole_round_trip_is_exact() {
        let grid = Grid::symmetric(8.0, 0.1).unwrap();
        // Deliberately un-normalized input potential; the constructor gauges
        // it to W(0) = 0.
        let w = PotentialProfile::from_fn(grid, |x| 0.3 * x * x - 0.7 * x + 2.0).unwrap();
        let origin = grid.index_at(0.0).unwrap();
        assert_eq!(w.value(origin), 0.0);
        let state = hopf_cole(&w, 0.5, 0).unwrap();
        assert_eq!(state.log_phi()[origin], 0.0);
        let back = inverse_hopf_cole(&state).unwrap();
        for i in 0..grid.count {
            assert_close(back.value(i), w.value(i), 1e-14, "round trip");
        }
        // W = x^2/2 at kappa = 1/2 gives log phi = -x^2/2.
        let w2 = PotentialProfile::from_fn(grid, |x| 0.5 * x * x).unwrap();
        let s2 = hopf_cole(&w2, 0.5, 0).unwrap();
        let i = grid.index_at(2.0).unwrap();
        assert_close(s2.log_phi()[i], -2.0, 1e-14, "quadratic transform");
        // W = 0 gives log phi = 0.
        let s3 = hopf_cole(&PotentialProfile::from_fn(grid, |_| 0.0).unwrap(), 0.5, 0).unwrap();
        assert!(s3.log_phi().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_kick_step_halves_a_unit_slope() {
        // F = 0, u_0(x) = x: the heat flow of exp(-x^2/2) gives u_1(x) = x/2.
        let grid = Grid::symmetric(20.0, 0.05).unwrap();
        let e = zero_env(grid, (0, 1));
        let u0: Vec<f64> = (0..grid.count).map(|i| grid.node(i)).collect();
        let w = PotentialProfile::from_velocity(grid, &u0).unwrap();
        let state = kick_evolve(&e, &hopf_cole(&w, 0.5, 0).unwrap(), 1, TransferOptions::default())
            .unwrap();
        let u1 = velocity_from_state(&state).unwrap();
        for i in 0..grid.count {
            let x = grid.node(i);
            if x.abs() <= 5.0 {
                assert_close(u1.values[i], 0.5 * x, 1e-6, "halved slope");
            }
        }
    }

    #[test]
    fn constant_velocity_is_a_fixed_point_without_forcing() {
        let grid = Grid::symmetric(24.0, 0.1).unwrap();
        let e = zero_env(grid, (0, 3));
        let c = 0.4;
        let w = PotentialProfile::from_fn(grid, |x| c * x).unwrap();
        let state = kick_evolve(&e, &hopf_cole(&w, 0.5, 0).unwrap(), 3, TransferOptions::default())
            .unwrap();
        let u = velocity_from_state(&state).unwrap();
        for i in 0..grid.count {
            if grid.node(i).abs() <= 10.0 {
                assert_close(u.values[i], c, 1e-8, "traveling fixed point");
            }
        }
    }

    #[test]
    fn evolution_composes_exactly() {
        let grid = Grid::symmetric(12.0, 0.1).unwrap();
        let e = sample_environment(&spec(9, 0.8), grid, (0, 5), 0).unwrap();
        let opts = TransferOptions::default();
        let w = PotentialProfile::from_fn(grid, |x| 0.2 * x.sin()).unwrap();
        let s0 = hopf_cole(&w, 0.5, 0).unwrap();
        let direct = kick_evolve(&e, &s0, 5, opts).unwrap();
        let middle = kick_evolve(&e, &s0, 2, opts).unwrap();
        let composed = kick_evolve(&e, &middle, 5, opts).unwrap();
        let max_diff = direct
            .log_phi()
            .iter()
            .zip(composed.log_phi())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "composition residual {max_diff}");
        assert_eq!(direct.log_const(), composed.log_const());
        // Normalization holds after every step.
        let origin = grid.index_at(0.0).unwrap();
        assert_eq!(direct.log_phi()[origin], 0.0);
        assert_eq!(middle.log_phi()[origin], 0.0);
    }

    #[test]
    fn velocity_extraction_is_second_order() {
        // Quadratic log phi: centered differences are exact.
        let grid = Grid::symmetric(10.0, 0.1).unwrap();
        let lp: Vec<f64> = (0..grid.count).map(|i| -0.5 * grid.node(i).powi(2)).collect();
        let s = HopfColeState::from_log_values(grid, 0, 0.5, lp).unwrap();
        let u = velocity_from_state(&s).unwrap();
        for i in u.trusted_range() {
            assert_close(u.values[i], grid.node(i), 1e-12, "quadratic velocity");
        }
        // Constant log phi gives u = 0.
        let s0 = HopfColeState::from_log_values(grid, 0, 0.5, vec![0.0; grid.count]).unwrap();
        assert!(velocity_from_state(&s0).unwrap().values.iter().all(|&v| v == 0.0));

        // Smooth non-polynomial profile: halving dx cuts the error by ~4
        // against the analytic derivative u = x - 0.3 cos x.
        let mut errs = Vec::new();
        for dx in [0.2, 0.1] {
            let g = Grid::symmetric(10.0, dx).unwrap();
            let lp: Vec<f64> = (0..g.count)
                .map(|i| {
                    let x = g.node(i);
                    -0.5 * x * x + 0.3 * x.sin()
                })
                .collect();
            let s = HopfColeState::from_log_values(g, 0, 0.5, lp).unwrap();
            let u = velocity_from_state(&s).unwrap();
            let mut worst = 0.0f64;
            for i in u.trusted_range() {
                let x = g.node(i);
                if x.abs() <= 8.0 {
                    worst = worst.max((u.values[i] - (x - 0.3 * x.cos())).abs());
                }
            }
            errs.push(worst);
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (3.0..=5.0).contains(&ratio),
            "convergence ratio {ratio} (errors {errs:?})"
        );
    }

    #[test]
    fn global_solution_without_forcing_is_the_bridge_mean() {
        let grid = Grid::symmetric(24.0, 0.1).unwrap();
        let e = zero_env(grid, (-8, 2));
        let v = 0.5;
        let u = global_solution_approx(&e, v, 2, -8, TransferOptions::default()).unwrap();
        assert_eq!(u.depth, Some(-8));
        for i in 0..grid.count {
            let x = grid.node(i);
            if x.abs() <= 5.0 {
                assert_close(u.values[i], (x + 4.0) / 10.0, 1e-6, "bridge mean");
            }
        }
    }

    #[test]
    fn global_solution_matches_polymer_measure_extraction() {
        let grid = Grid::symmetric(16.0, 0.1).unwrap();
        let e = sample_environment(&spec(77, 0.8), grid, (-6, 2), 0).unwrap();
        let opts = TransferOptions::default();
        let u = global_solution_approx(&e, 0.25, 2, -6, opts).unwrap();
        for x in [-2.0, 0.0, 1.5] {
            let direct = approx_velocity_via_polymer(&e, 0.25, 2, -6, x, opts).unwrap();
            let i = grid.index_at(x).unwrap();
            assert_close(u.values[i], direct, 1e-10, "sweep vs measure");
        }
    }

    #[test]
    fn global_solution_stabilizes_in_depth_and_tracks_the_mean() {
        let grid = Grid::symmetric(30.0, 0.1).unwrap();
        let e = sample_environment(&spec(13, 0.4), grid, (-32, 2), 0).unwrap();
        let opts = TransferOptions::banded(10.0);
        let v = 0.25;
        let deep = global_solution_approx(&e, v, 2, -32, opts).unwrap();
        let mut sups = Vec::new();
        for depth in [-4i64, -8, -16] {
            let u = global_solution_approx(&e, v, 2, depth, opts).unwrap();
            let mut sup = 0.0f64;
            for i in 0..grid.count {
                if grid.node(i).abs() <= 5.0 {
                    sup = sup.max((u.values[i] - deep.values[i]).abs());
                }
            }
            sups.push(sup);
        }
        assert!(
            sups[0] > sups[1] && sups[1] > sups[2],
            "approximants should stabilize with depth: {sups:?}"
        );
        // Spatial average over a central stretch approaches the slope.
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..grid.count {
            if grid.node(i).abs() <= 18.0 {
                sum += deep.values[i];
                count += 1;
            }
        }
        assert_close(sum / count as f64, v, 0.05, "mean velocity");
    }

    #[test]
    fn evolved_profiles_have_monotone_characteristics() {
        // x - u(x) is nondecreasing for any evolved profile; the raw profile
        // u = 2x (for which x - u = -x decreases) is the negative control.
        let grid = Grid::symmetric(14.0, 0.1).unwrap();
        for seed in [1u64, 2, 3, 4, 5] {
            let e = sample_environment(&spec(seed, 1.0), grid, (0, 2), 0).unwrap();
            let w = PotentialProfile::from_fn(grid, |x| 0.2 * (1.3 * x).cos()).unwrap();
            let s = kick_evolve(
                &e,
                &hopf_cole(&w, 0.5, 0).unwrap(),
                2,
                TransferOptions::default(),
            )
            .unwrap();
            let u = velocity_from_state(&s).unwrap();
            let r = monotonicity_residual(&u);
            assert!(r <= 1e-10, "seed {seed}: residual {r}");
        }
        let control =
            VelocityProfile::new(grid, (0..grid.count).map(|i| 2.0 * grid.node(i)).collect())
                .unwrap();
        let r = monotonicity_residual(&control);
        assert_close(r, grid.dx, 1e-12, "negative control");
        let half =
            VelocityProfile::new(grid, (0..grid.count).map(|i| 0.5 * grid.node(i)).collect())
                .unwrap();
        assert!(monotonicity_residual(&half) <= 0.0);
    }

    #[test]
    fn velocity_through_path_measure_agrees_with_kick_evolution() {
        let grid = Grid::symmetric(16.0, 0.1).unwrap();
        let e = sample_environment(&spec(19, 0.7), grid, (-5, 1), 0).unwrap();
        let opts = TransferOptions::default();
        let w = PotentialProfile::from_fn(grid, |x| 0.3 * x.sin()).unwrap();
        let s0 = hopf_cole(&w, 0.5, -5).unwrap();
        let exact = velocity_sweep_from_state(&e, &s0, 1, opts).unwrap();
        let centered = velocity_from_state(&kick_evolve(&e, &s0, 1, opts).unwrap()).unwrap();
        for x in [-1.0, 0.0, 2.0] {
            let via_measure = velocity_via_path_measure(&e, &s0, 1, x, opts).unwrap();
            let i = grid.index_at(x).unwrap();
            assert_close(exact.values[i], via_measure, 1e-8, "evolution vs measure");
            // Centered differences reach the same value at second order only.
            assert_close(centered.values[i], via_measure, 5e-3, "finite-difference gap");
        }
    }

    #[test]
    fn basin_conditions_reject_with_named_diagnostics() {
        let grid = Grid::symmetric(20.0, 0.1).unwrap();
        // v = 0 with a strong positive tilt from the left fails.
        let tilt = PotentialProfile::from_fn(grid, |x| 0.8 * x).unwrap();
        let err = check_basin_condition(&tilt, 0.0, 0.1).unwrap_err();
        assert!(err.to_string().contains("left-edge"), "got: {err}");
        // v = 0.5 with a flat potential fails on the left condition.
        let flat = PotentialProfile::from_fn(grid, |_| 0.0).unwrap();
        let err = check_basin_condition(&flat, 0.5, 0.1).unwrap_err();
        assert!(err.to_string().contains("left-edge"), "got: {err}");
        // Matching tilts pass.
        check_basin_condition(&tilt, 0.8, 0.1).unwrap();
        check_basin_condition(&flat, 0.0, 0.1).unwrap();
        let neg = PotentialProfile::from_fn(grid, |x| -0.4 * x).unwrap();
        check_basin_condition(&neg, -0.4, 0.1).unwrap();
        let err = check_basin_condition(&neg, 0.0, 0.1).unwrap_err();
        assert!(err.to_string().contains("right-edge"), "got: {err}");
        // A bounded bump sits in the basin of v = 0.
        let bump = PotentialProfile::from_fn(grid, |x| 0.4 * (1.0 - x.cos())).unwrap();
        check_basin_condition(&bump, 0.0, 0.1).unwrap();
    }

    #[test]
    fn pullback_differences_shrink_with_depth() {
        let grid = Grid::symmetric(40.0, 0.1).unwrap();
        let e = sample_environment(&spec(37, 0.6), grid, (-12, 1), 0).unwrap();
        let opts = TransferOptions::default();
        let w1 = PotentialProfile::from_fn(grid, |x| 0.3 * (1.0 - x.cos())).unwrap();
        let w2 = PotentialProfile::from_fn(grid, |x| -0.25 * (0.7 * x).sin()).unwrap();
        let table = pullback_experiment(
            &e,
            &[w1, w2],
            0.0,
            &[-2, -6, -12],
            1,
            (-5.0, 5.0),
            0.1,
            opts,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 6);
        for id in 0..2 {
            let col = table.column(id);
            assert!(
                col[0] > col[2],
                "initial {id}: deepest difference {} should undercut shallowest {}",
                col[2],
                col[0]
            );
        }
    }

    #[test]
    fn pullback_of_the_evolved_tilt_is_an_exact_fixed_point() {
        // Evolving the deepest tilt to an intermediate depth and feeding the
        // result back reproduces the reference bitwise (composition law).
        let grid = Grid::symmetric(30.0, 0.1).unwrap();
        let e = sample_environment(&spec(43, 0.7), grid, (-10, 1), 0).unwrap();
        let opts = TransferOptions::default();
        let v = 0.2;
        let tilt = PotentialProfile::from_fn(grid, |x| v * x).unwrap();
        let at_depth4 = kick_evolve(&e, &hopf_cole(&tilt, 0.5, -10).unwrap(), -4, opts).unwrap();
        let w4 = inverse_hopf_cole(&at_depth4).unwrap();
        let table =
            pullback_experiment(&e, &[w4], v, &[-10, -4], 1, (-5.0, 5.0), 0.1, opts).unwrap();
        let col = table.column(0);
        // Row at depth -4 replays the identical float operations.
        assert_eq!(col[1], 0.0, "fixed point should be exact, got {col:?}");
    }

    #[test]
    fn pullback_without_forcing_decays_like_heat_modes() {
        // F = 0, v = 0, perturbation u(x) = eps sin(x): each step damps the
        // mode by about exp(-1/2), so the sup-difference column tracks that
        // rate and the deepest entry is far below 1e-3.
        let grid = Grid::symmetric(40.0, 0.1).unwrap();
        let e = zero_env(grid, (-14, 0));
        let eps = 0.2;
        let w = PotentialProfile::from_fn(grid, |x| eps * (1.0 - x.cos())).unwrap();
        let table = pullback_experiment(
            &e,
            &[w],
            0.0,
            &[-4, -6, -8, -14],
            0,
            (-5.0, 5.0),
            0.1,
            TransferOptions::default(),
        )
        .unwrap();
        let col = table.column(0);
        let rate1 = (col[1] / col[0]).powf(0.5);
        let rate2 = (col[2] / col[1]).powf(0.5);
        let expected = (-0.5f64).exp();
        assert_close(rate1, expected, 0.1 * expected, "two-step decay rate");
        assert_close(rate2, expected, 0.1 * expected, "next decay rate");
        assert!(col[3] < 1e-3, "deepest entry {col:?}");
    }

    #[test]
    fn edge_slopes_survive_evolution() {
        // A potential with distinct edge slopes keeps them within 0.05 after
        // a couple of forced steps.
        let grid = Grid::symmetric(40.0, 0.1).unwrap();
        let e = sample_environment(&spec(57, 0.3), grid, (0, 2), 0).unwrap();
        let w = PotentialProfile::from_fn(grid, |x| -0.2 * x.min(0.0) + 0.4 * x.max(0.0)).unwrap();
        let (a0, b0) = w.edge_secants().unwrap();
        let s = kick_evolve(&e, &hopf_cole(&w, 0.5, 0).unwrap(), 2, TransferOptions::default())
            .unwrap();
        let (a1, b1) = inverse_hopf_cole(&s).unwrap().edge_secants().unwrap();
        assert_close(a1, a0, 0.05, "left slope drift");
        assert_close(b1, b0, 0.05, "right slope drift");
    }

    #[test]
    fn profile_and_table_exports_are_parseable() {
        let grid = Grid::symmetric(4.0, 0.5).unwrap();
        let e = zero_env(grid, (0, 1));
        let w = PotentialProfile::from_fn(grid, |x| 0.1 * x * x).unwrap();
        let s = kick_evolve(&e, &hopf_cole(&w, 0.5, 0).unwrap(), 1, TransferOptions::default())
            .unwrap();
        let dir = std::env::temp_dir().join(format!("polyburg-burgers-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("profile.csv");
        write_profile_csv(&file, &s).unwrap();
        let text = std::fs::read_to_string(&file).unwrap();
        assert_eq!(text.lines().count(), 1 + grid.count);
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row.len(), 4);
        row.iter().for_each(|f| {
            f.parse::<f64>().unwrap();
        });
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn evolution_rejects_mismatched_inputs() {
        let grid = Grid::symmetric(6.0, 0.1).unwrap();
        let e = zero_env(grid, (0, 2));
        let w = PotentialProfile::from_fn(grid, |_| 0.0).unwrap();
        let s = hopf_cole(&w, 0.5, 0).unwrap();
        // Target before state time.
        assert!(kick_evolve(&e, &s, 0, TransferOptions::default()).is_err());
        // Environment window too short.
        assert!(kick_evolve(&e, &s, 3, TransferOptions::default()).is_err());
        // Kappa mismatch.
        let s_bad = hopf_cole(&w, 0.25, 0).unwrap();
        assert!(kick_evolve(&e, &s_bad, 1, TransferOptions::default()).is_err());
        // Origin must be finite.
        let mut lp = vec![0.0; grid.count];
        lp[grid.index_at(0.0).unwrap()] = f64::NEG_INFINITY;
        assert!(HopfColeState::from_log_values(grid, 0, 0.5, lp).is_err());
    }
}
