//! Point-to-point partition functions.
//!
//! `Z^{m,n}(x, y)` is the total weight of paths that start at `x` at time `m`,
//! end at `y` at time `n`, pay the Gaussian kernel `g_{2κ}` for every step and
//! the potential weight `exp(-F_k(γ_k)/(2κ))` at times `k = m..n-1` (the
//! starting time is charged, the final one is not). On the grid it is the
//! entry of an `(n-m)`-fold matrix product of one-step transfer kernels, with
//! one rectangle-rule weight `dx` per integrated interior time. Everything is
//! computed by chaining [`crate::lattice::apply_transfer`] from a point mass,
//! so composition identities (Chapman-Kolmogorov, corridor monotonicity, the
//! shear change of variables) hold to floating-point roundoff by construction.

use crate::env::Environment;
use crate::lattice::{self, Convention, Direction, LogDensity, TransferOptions};
use crate::{Error, Result};
use std::io::Write;
use std::path::Path;

/// `log Z^{m,n}(x, y)` as a function of the free endpoint `y`, with the
/// anchored endpoint remembered for bookkeeping and CSV export.
#[derive(Debug, Clone)]
pub struct PartitionSlice {
    pub m: i64,
    pub n: i64,
    /// Anchored starting point (a grid node).
    pub x: f64,
    pub values: LogDensity,
}

impl PartitionSlice {
    /// Fraction of the slice's total mass sitting on the two outermost nodes.
    /// Large values mean the absorbing window is clipping the polymer and the
    /// window policy should widen the grid.
    pub fn edge_mass_fraction(&self) -> f64 {
        let vals = self.values.values();
        let total = lattice::logsumexp(vals);
        if total == f64::NEG_INFINITY {
            return 0.0;
        }
        let edge = lattice::logsumexp(&[vals[0], vals[vals.len() - 1]]);
        (edge - total).exp()
    }
}

fn check_times(m: i64, n: i64) -> Result<()> {
    if n <= m {
        return Err(Error::InvalidArgument(format!(
            "partition range needs n > m, got m={m}, n={n}"
        )));
    }
    Ok(())
}

/// All forward slices `log Z^{m,k}(x, ·)` for `k = m+1 ..= n`, in that order.
/// This is the cached ingredient shared by the polymer marginals, so it is
/// public: element `j` lives at time `m + 1 + j`.
pub fn forward_slices(
    env: &Environment,
    m: i64,
    n: i64,
    x: f64,
    options: TransferOptions,
) -> Result<Vec<LogDensity>> {
    check_times(m, n)?;
    let grid = env.grid();
    let ix = grid.index_at(x)?;
    let mut cur = LogDensity::delta(grid, ix)?;
    let mut out = Vec::with_capacity((n - m) as usize);
    for k in m..n {
        cur = lattice::apply_transfer(
            env.slice(k)?,
            env.kappa(),
            &cur,
            Direction::Forward,
            Convention::IncludeLeft,
            options,
        )?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// `log Z^{m,n}(x, ·)` as a slice over the free endpoint.
pub fn log_partition_slice(
    env: &Environment,
    m: i64,
    n: i64,
    x: f64,
    options: TransferOptions,
) -> Result<PartitionSlice> {
    let slices = forward_slices(env, m, n, x, options)?;
    Ok(PartitionSlice {
        m,
        n,
        x,
        values: slices.into_iter().last().unwrap(),
    })
}

/// `log Z^{m,n}(x, y)` for endpoints on grid nodes.
pub fn log_partition_p2p(
    env: &Environment,
    m: i64,
    n: i64,
    x: f64,
    y: f64,
    options: TransferOptions,
) -> Result<f64> {
    let slice = log_partition_slice(env, m, n, x, options)?;
    let iy = env.grid().index_at(y)?;
    Ok(slice.values.value(iy))
}

/// Per-time position constraints for a restricted partition function: the
/// path must satisfy `a_k <= γ_k <= b_k` at every interior time `k` in
/// `(m, n)`. Intervals with `a > b` are empty, which legally forces the
/// restricted partition function to zero (log value minus infinity).
#[derive(Debug, Clone)]
pub struct Corridor {
    pub m: i64,
    pub n: i64,
    /// `intervals[j]` constrains time `m + 1 + j`, for `j = 0 .. n-m-1`.
    pub intervals: Vec<(f64, f64)>,
}

impl Corridor {
    pub fn new(m: i64, n: i64, intervals: Vec<(f64, f64)>) -> Result<Self> {
        check_times(m, n)?;
        let need = (n - m - 1) as usize;
        if intervals.len() != need {
            return Err(Error::InvalidArgument(format!(
                "corridor for [{m}, {n}] needs {need} interior intervals, got {}",
                intervals.len()
            )));
        }
        Ok(Corridor { m, n, intervals })
    }

    /// A corridor that keeps every interior position inside `[-w, w]`.
    pub fn uniform(m: i64, n: i64, w: f64) -> Result<Self> {
        check_times(m, n)?;
        Ok(Corridor {
            m,
            n,
            intervals: vec![(-w, w); (n - m - 1) as usize],
        })
    }

    fn interval_at(&self, k: i64) -> (f64, f64) {
        self.intervals[(k - self.m - 1) as usize]
    }
}

fn mask_outside(density: &LogDensity, a: f64, b: f64) -> LogDensity {
    let grid = *density.grid();
    let eps = 1e-12 * grid.dx;
    let values = (0..grid.count)
        .map(|i| {
            let x = grid.node(i);
            if x >= a - eps && x <= b + eps {
                density.value(i)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    LogDensity::new(grid, values).expect("masking preserves validity")
}

/// `log Z^{m,n}(x, y)` restricted to paths inside the corridor. The endpoints
/// are fixed and not constrained by it. Result may be minus infinity when the
/// corridor cuts off all mass.
pub fn log_partition_restricted(
    env: &Environment,
    m: i64,
    n: i64,
    x: f64,
    y: f64,
    corridor: &Corridor,
    options: TransferOptions,
) -> Result<f64> {
    check_times(m, n)?;
    if corridor.m != m || corridor.n != n {
        return Err(Error::InvalidArgument(format!(
            "corridor covers [{}, {}], partition asked for [{m}, {n}]",
            corridor.m, corridor.n
        )));
    }
    let grid = env.grid();
    let ix = grid.index_at(x)?;
    let iy = grid.index_at(y)?;
    let mut cur = LogDensity::delta(grid, ix)?;
    for k in m..n {
        if k > m {
            let (a, b) = corridor.interval_at(k);
            cur = mask_outside(&cur, a, b);
        }
        cur = lattice::apply_transfer(
            env.slice(k)?,
            env.kappa(),
            &cur,
            Direction::Forward,
            Convention::IncludeLeft,
            options,
        )?;
    }
    Ok(cur.value(iy))
}

/// Window-minimized partition function: the minimum of `log Z^{m,n}(x', y')`
/// over grid nodes with `|x' - x| <= 1/2` and `|y' - y| <= 1/2`.
///
/// The window is closed rather than open so that its rectangle-rule measure
/// is at least one whenever `dx <= 1/2`; that is exactly what makes the
/// super-multiplicativity bound
/// `Z_*(n1,n3) >= Z_*(n1,n2) * Z_*(n2,n3)` carry over to the grid, since the
/// middle point is integrated over a window of quadrature measure >= 1.
/// Refuses windows that the grid cannot resolve (half-width under `2 dx`) and
/// windows clipped by the grid boundary.
pub fn log_partition_star(
    env: &Environment,
    m: i64,
    n: i64,
    x: f64,
    y: f64,
    options: TransferOptions,
) -> Result<f64> {
    check_times(m, n)?;
    let grid = env.grid();
    if grid.dx > 0.25 {
        return Err(Error::InvalidArgument(format!(
            "grid too coarse for the unit window minimum: dx = {} > 1/4",
            grid.dx
        )));
    }
    let half = 0.5;
    for &c in &[x, y] {
        if c - half < grid.x_min - 1e-9 * grid.dx || c + half > grid.x_max() + 1e-9 * grid.dx {
            return Err(Error::OutOfRange(format!(
                "unit window around {c} is clipped by the grid [{}, {}]",
                grid.x_min,
                grid.x_max()
            )));
        }
    }
    let window = |c: f64| -> Vec<usize> {
        (0..grid.count)
            .filter(|&i| (grid.node(i) - c).abs() <= half + 1e-9 * grid.dx)
            .collect()
    };
    let xs = window(x);
    let ys = window(y);
    let mut worst = f64::INFINITY;
    for &ix in &xs {
        let slice = log_partition_slice(env, m, n, grid.node(ix), options)?;
        for &iy in &ys {
            let v = slice.values.value(iy);
            if v < worst {
                worst = v;
            }
        }
    }
    Ok(worst)
}

/// Absolute difference between `log Z^{m,n}(x, z)` computed directly and via
/// rectangle-rule composition through the intermediate time `k`. Both sides
/// are the same matrix product associated differently, so the residual is
/// floating-point roundoff, not discretization error.
pub fn chapman_kolmogorov_residual(
    env: &Environment,
    m: i64,
    k: i64,
    n: i64,
    x: f64,
    z: f64,
    options: TransferOptions,
) -> Result<f64> {
    if !(m < k && k < n) {
        return Err(Error::InvalidArgument(format!(
            "need m < k < n, got {m}, {k}, {n}"
        )));
    }
    let direct = log_partition_p2p(env, m, n, x, z, options)?;
    let first = log_partition_slice(env, m, k, x, options)?;
    let grid = env.grid();
    let iz = grid.index_at(z)?;
    // Z^{k,n}(y, z) for all y in one pass: run the chain through the
    // time-reversed window with the potential on the right end of each step,
    // which is the adjoint of the forward chain.
    let rev = env.window(k, n)?.reversed();
    let mut back = LogDensity::delta(grid, iz)?;
    for j in 0..(n - k) {
        back = lattice::apply_transfer(
            rev.slice(j)?,
            rev.kappa(),
            &back,
            Direction::Forward,
            Convention::IncludeRight,
            options,
        )?;
    }
    let combined = first.values.product(&back)?;
    let composed = lattice::log_integrate(&combined);
    Ok((direct - composed).abs())
}

/// Write partition slices as CSV with columns `m,n,x,y,log_z`, one row per
/// grid node of each slice, in slice order. Log-values are printed with
/// enough digits to round-trip f64.
pub fn write_slices_csv(path: &Path, slices: &[PartitionSlice]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "m,n,x,y,log_z")?;
    for s in slices {
        let grid = *s.values.grid();
        for i in 0..grid.count {
            writeln!(
                w,
                "{},{},{:.17e},{:.17e},{:.17e}",
                s.m,
                s.n,
                s.x,
                grid.node(i),
                s.values.value(i)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, EnvironmentSpec, GeneratorKind, ShearMode};
    use crate::lattice::{log_gaussian, Grid};

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

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() <= tol,
            "{what}: {a} vs {b} (|diff| = {:.3e} > {tol:.3e})",
            (a - b).abs()
        );
    }

    /// Brute-force oracle: evaluate the path sum by explicit nested summation
    /// over all interior grid nodes, in linear space. Only usable for a few
    /// steps on a small grid, which is exactly what pins down the transfer
    /// chain including its dx bookkeeping.
    fn brute_force_log_z(env: &Environment, m: i64, n: i64, x: f64, y: f64) -> f64 {
        let grid = env.grid();
        let kappa = env.kappa();
        let variance = 2.0 * kappa;
        let inv = 1.0 / (2.0 * kappa);
        let steps = (n - m) as usize;
        // One path weight: product over k of g(x_{k+1} - x_k) exp(-F_k(x_k)/2kappa),
        // times dx per interior node.
        let mut total = 0.0f64;
        let interior = steps - 1;
        let mut idx = vec![0usize; interior];
        loop {
            let mut pos = Vec::with_capacity(steps + 1);
            pos.push(x);
            for &i in &idx {
                pos.push(grid.node(i));
            }
            pos.push(y);
            let mut logw = 0.0;
            for k in 0..steps {
                let f = env.slice(m + k as i64).unwrap()[grid.index_at(pos[k]).unwrap()];
                logw += log_gaussian(pos[k + 1] - pos[k], variance) - f * inv;
            }
            total += logw.exp();
            // Odometer over interior indices.
            let mut c = 0;
            loop {
                if c == interior {
                    break;
                }
                idx[c] += 1;
                if idx[c] < grid.count {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
            if c == interior {
                break;
            }
        }
        total.ln() + (interior as f64) * grid.dx.ln()
    }

    #[test]
    fn chain_matches_brute_force_enumeration() {
        let grid = Grid::symmetric(2.0, 0.25).unwrap();
        let e = sample_environment(&spec(12, 0.6), grid, (-1, 2), 0).unwrap();
        let opts = TransferOptions::default();
        for &(x, y) in &[(0.0, 0.0), (-0.5, 0.75), (1.0, -1.0)] {
            let direct = log_partition_p2p(&e, -1, 2, x, y, opts).unwrap();
            let oracle = brute_force_log_z(&e, -1, 2, x, y);
            assert_close(direct, oracle, 1e-12, "chain vs enumeration");
        }
    }

    #[test]
    fn single_step_is_kernel_times_potential_weight() {
        let grid = Grid::symmetric(3.0, 0.1).unwrap();
        let e = sample_environment(&spec(3, 0.8), grid, (0, 1), 0).unwrap();
        let z = log_partition_p2p(&e, 0, 1, 0.5, -0.3, TransferOptions::default()).unwrap();
        let f = e.slice(0).unwrap()[grid.index_at(0.5).unwrap()];
        let expect = log_gaussian(-0.3 - 0.5, 1.0) - f;
        assert_close(z, expect, 1e-13, "one step");
    }

    #[test]
    fn zero_potential_matches_heat_kernel_in_n_steps() {
        // F = 0: Z^{0,n}(x, y) = g_{2 kappa n}(y - x), spectrally accurate on
        // a wide enough window.
        let grid = Grid::symmetric(30.0, 0.1).unwrap();
        let e = sample_environment(
            &EnvironmentSpec { amplitude: 0.0, ..spec(0, 0.0) },
            grid,
            (0, 8),
            0,
        )
        .unwrap();
        let opts = TransferOptions::default();
        for &(n, x, y) in &[(4i64, 0.0, 0.0), (8, -1.0, 2.5), (8, 0.0, -4.0)] {
            let z = log_partition_p2p(&e, 0, n, x, y, opts).unwrap();
            assert_close(z, log_gaussian(y - x, n as f64), 1e-8, "heat kernel power");
        }
    }

    #[test]
    fn chapman_kolmogorov_residual_is_roundoff() {
        let grid = Grid::symmetric(16.0, 0.1).unwrap();
        let e = sample_environment(&spec(7, 1.0), grid, (-2, 8), 0).unwrap();
        let opts = TransferOptions::default();
        for &(m, k, n) in &[(-2i64, 0i64, 3i64), (0, 2, 6), (-1, 3, 7)] {
            let r = chapman_kolmogorov_residual(&e, m, k, n, 0.0, 1.0, opts).unwrap();
            assert!(r < 1e-10, "ck residual {r} at ({m},{k},{n})");
        }
    }

    #[test]
    fn corridor_monotone_and_wide_corridor_is_unrestricted() {
        let grid = Grid::symmetric(10.0, 0.1).unwrap();
        let e = sample_environment(&spec(21, 0.7), grid, (0, 5), 0).unwrap();
        let opts = TransferOptions::default();
        let free = log_partition_p2p(&e, 0, 5, 0.0, 0.5, opts).unwrap();
        let wide = Corridor::uniform(0, 5, 50.0).unwrap();
        let z_wide = log_partition_restricted(&e, 0, 5, 0.0, 0.5, &wide, opts).unwrap();
        assert_close(z_wide, free, 1e-12, "wide corridor");

        let narrow = Corridor::uniform(0, 5, 1.0).unwrap();
        let tighter = Corridor::uniform(0, 5, 0.5).unwrap();
        let z1 = log_partition_restricted(&e, 0, 5, 0.0, 0.5, &narrow, opts).unwrap();
        let z2 = log_partition_restricted(&e, 0, 5, 0.0, 0.5, &tighter, opts).unwrap();
        assert!(z2 <= z1 + 1e-12 && z1 <= free + 1e-12, "corridor monotonicity");
    }

    #[test]
    fn empty_corridor_gives_zero_mass() {
        let grid = Grid::symmetric(4.0, 0.1).unwrap();
        let e = sample_environment(&spec(2, 0.5), grid, (0, 3), 0).unwrap();
        let mut c = Corridor::uniform(0, 3, 2.0).unwrap();
        c.intervals[0] = (1.0, -1.0); // empty interval
        let z = log_partition_restricted(&e, 0, 3, 0.0, 0.0, &c, TransferOptions::default())
            .unwrap();
        assert_eq!(z, f64::NEG_INFINITY);
    }

    #[test]
    fn shear_change_of_variables_is_exact_pathwise() {
        // Evaluating Z(0,0) in the sheared environment equals
        // Z(0, v n) * exp(v^2 n / (4 kappa)) in the original one, path by
        // path, provided both windows contain all the relevant mass.
        let grid = Grid::symmetric(16.0, 0.1).unwrap();
        let e = sample_environment(&spec(31, 0.8), grid, (0, 6), 0).unwrap();
        let opts = TransferOptions::default();
        for &v in &[0.5, -0.4] {
            let sheared = e.shear(v, ShearMode::Strict).unwrap();
            let lhs = log_partition_p2p(&sheared, 0, 6, 0.0, 0.0, opts).unwrap();
            let rhs = log_partition_p2p(&e, 0, 6, 0.0, v * 6.0, opts).unwrap()
                + v * v * 6.0 / (4.0 * 0.5);
            assert_close(lhs, rhs, 1e-10, "shear covariance");
        }
    }

    #[test]
    fn star_is_a_lower_bound_and_supermultiplicative() {
        let grid = Grid::symmetric(8.0, 0.1).unwrap();
        let e = sample_environment(&spec(5, 0.9), grid, (0, 6), 0).unwrap();
        let opts = TransferOptions::default();
        let star = log_partition_star(&e, 0, 6, 0.0, 1.0, opts).unwrap();
        let plain = log_partition_p2p(&e, 0, 6, 0.0, 1.0, opts).unwrap();
        assert!(star <= plain + 1e-12, "min over window is a lower bound");

        // Z_*(0,6)(x,z) >= Z_*(0,3)(x,y) + Z_*(3,6)(y,z) in log space.
        let whole = log_partition_star(&e, 0, 6, 0.0, 1.0, opts).unwrap();
        for &y in &[-0.5, 0.0, 0.5, 1.5] {
            let a = log_partition_star(&e, 0, 3, 0.0, y, opts).unwrap();
            let b = log_partition_star(&e, 3, 6, y, 1.0, opts).unwrap();
            assert!(
                whole >= a + b - 1e-10,
                "supermultiplicativity via y={y}: {whole} < {a} + {b}"
            );
        }
    }

    #[test]
    fn star_rejects_coarse_grids_and_clipped_windows() {
        let coarse = Grid::symmetric(4.0, 0.5).unwrap();
        let e = sample_environment(&spec(1, 0.5), coarse, (0, 2), 0).unwrap();
        assert!(log_partition_star(&e, 0, 2, 0.0, 0.0, TransferOptions::default()).is_err());

        let fine = Grid::symmetric(2.0, 0.1).unwrap();
        let e2 = sample_environment(&spec(1, 0.5), fine, (0, 2), 0).unwrap();
        assert!(log_partition_star(&e2, 0, 2, 1.8, 0.0, TransferOptions::default()).is_err());
    }

    #[test]
    fn expectation_matches_annealed_kernel() {
        // E Z^{0,n}(x, y) = lambda^n g_n(y - x) at kappa = 1/2; Monte Carlo
        // over realizations against the Gaussian closed form for lambda.
        let grid = Grid::symmetric(12.0, 0.2).unwrap();
        let s = spec(40, 0.6);
        let lambda = (0.6_f64 * 0.6 / 2.0).exp();
        let n = 3i64;
        let reps = 3000u32;
        let opts = TransferOptions::default();
        let mut vals = Vec::with_capacity(reps as usize);
        for r in 0..reps {
            let e = sample_environment(&s, grid, (0, n), r).unwrap();
            vals.push(log_partition_p2p(&e, 0, n, 0.0, 1.0, opts).unwrap().exp());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len() as f64 - 1.0);
        let se = (var / vals.len() as f64).sqrt();
        let expect = lambda.powi(n as i32) * log_gaussian(1.0, n as f64).exp();
        assert!(
            (mean - expect).abs() <= 3.0 * se,
            "E Z = {mean} +- {se} vs {expect}"
        );
    }

    #[test]
    fn edge_mass_reports_clipping() {
        let tight = Grid::symmetric(2.0, 0.1).unwrap();
        let wide = Grid::symmetric(20.0, 0.1).unwrap();
        let s = EnvironmentSpec { amplitude: 0.0, ..spec(0, 0.0) };
        let opts = TransferOptions::default();
        let e1 = sample_environment(&s, tight, (0, 6), 0).unwrap();
        let e2 = sample_environment(&s, wide, (0, 6), 0).unwrap();
        let clipped = log_partition_slice(&e1, 0, 6, 0.0, opts).unwrap();
        let roomy = log_partition_slice(&e2, 0, 6, 0.0, opts).unwrap();
        assert!(clipped.edge_mass_fraction() > 1e-8);
        assert!(roomy.edge_mass_fraction() < 1e-12);
    }

    #[test]
    fn csv_export_round_trips_values() {
        let grid = Grid::symmetric(1.0, 0.25).unwrap();
        let e = sample_environment(&spec(9, 0.4), grid, (0, 2), 0).unwrap();
        let slice = log_partition_slice(&e, 0, 2, 0.0, TransferOptions::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("polyburg-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("slice.csv");
        write_slices_csv(&path, std::slice::from_ref(&slice)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "m,n,x,y,log_z");
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 5);
            assert_eq!(cols[0].parse::<i64>().unwrap(), 0);
            assert_eq!(cols[1].parse::<i64>().unwrap(), 2);
            let y: f64 = cols[3].parse().unwrap();
            let z: f64 = cols[4].parse().unwrap();
            assert_eq!(y, grid.node(i));
            assert_eq!(z, slice.values.value(i));
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
