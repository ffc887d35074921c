//! Campaign runners behind the CLI. Each experiment composes library
//! operations, writes its tables into the output directory, and returns an
//! [`ExperimentReport`] whose ledger records the invariant checks that ran.
//! Config validation happens before anything is written, so a bad config
//! leaves no artifacts; a campaign whose statistics fail still emits the
//! completed tables plus FAIL ledger lines.

use crate::burgers::{
    check_basin_condition, hopf_cole, kick_evolve, monotonicity_residual, pullback_experiment,
    velocity_from_state, velocity_sweep_from_state, velocity_via_path_measure, PotentialProfile,
    VelocityProfile,
};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::env::{
    estimate_lambda, sample_environment, substream, EnvironmentSpec, GeneratorKind, ShearMode,
    StreamPurpose,
};
use crate::lattice::{
    heat_kernel_logrow, log_gaussian, logsumexp, Grid, TransferOptions,
};
use crate::partition::{
    chapman_kolmogorov_residual, forward_slices, log_partition_p2p,
};
use crate::polymer::{dominance_residual, PolymerMeasure, TerminalMeasure};
use crate::report::ExperimentReport;
use crate::stats::{
    busemann_estimate, fluctuation_exponent, overlap_curve, quadratic_shape_fit, shape_estimate,
    transversal_exponent, write_busemann_csv, write_overlap_csv,
};
use crate::{Error, Result};
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Run the campaign named by the config. The config is validated in full
/// before the output directory is created.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = config.output_dir();
    std::fs::create_dir_all(&dir)?;
    let mut report = ExperimentReport::new(config)?;
    match config.kind {
        ExperimentKind::Validate => run_validate(config, &mut report)?,
        ExperimentKind::Shape => run_shape(config, &dir, &mut report)?,
        ExperimentKind::Exponents => run_exponents(config, &dir, &mut report)?,
        ExperimentKind::Busemann => run_busemann(config, &dir, &mut report)?,
        ExperimentKind::Overlap => run_overlap(config, &dir, &mut report)?,
        ExperimentKind::BurgersPullback => run_pullback(config, &dir, &mut report)?,
        ExperimentKind::SamplePaths => run_sample_paths(config, &dir, &mut report)?,
    }
    report.write(&dir)?;
    Ok(report)
}

fn run_shape(cfg: &ExperimentConfig, dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let p = &cfg.params;
    let table = match shape_estimate(
        &cfg.environment,
        p.n.unwrap(),
        p.v_list.as_ref().unwrap(),
        p.replicates.unwrap(),
        cfg.grid_policy(),
        cfg.transfer_options(),
    ) {
        Ok(t) => t,
        Err(e) => {
            report.check("shape-table", false, format!("error: {e}"));
            return Ok(());
        }
    };
    table.write_csv(&dir.join("shape.csv"))?;
    report.attach_file(dir, "shape.csv")?;
    report.check(
        "shape-table",
        true,
        format!(
            "{} slopes x {} replicates at n = {}, window half-width {:.2}, {} widenings",
            table.rows.len(),
            p.replicates.unwrap(),
            table.n,
            -table.grid.x_min,
            table.widened
        ),
    );
    match quadratic_shape_fit(&table) {
        Ok(fit) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("shape_fit.csv"))?);
            writeln!(f, "alpha0,curvature,rms_residual")?;
            writeln!(
                f,
                "{:.17e},{:.17e},{:.17e}",
                fit.alpha0, fit.curvature, fit.rms_residual
            )?;
            f.flush()?;
            drop(f);
            report.attach_file(dir, "shape_fit.csv")?;
            report.check(
                "quadratic-fit",
                fit.curvature.is_finite() && fit.rms_residual.is_finite(),
                format!(
                    "intercept {:.6e}, curvature {:.6e}, rms {:.3e}",
                    fit.alpha0, fit.curvature, fit.rms_residual
                ),
            );
        }
        Err(e) => report.check("quadratic-fit", false, format!("error: {e}")),
    }
    Ok(())
}

fn run_exponents(cfg: &ExperimentConfig, dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let p = &cfg.params;
    let n_list = p.n_list.as_ref().unwrap();
    let reps = p.replicates.unwrap();
    match fluctuation_exponent(
        &cfg.environment,
        n_list,
        reps,
        cfg.grid_policy(),
        cfg.transfer_options(),
    ) {
        Ok(fit) => {
            fit.write_csv(&dir.join("fluctuation.csv"))?;
            report.attach_file(dir, "fluctuation.csv")?;
            report.check(
                "fluctuation-fit",
                fit.exponent.is_finite(),
                format!(
                    "exponent {:.4}, bootstrap CI [{:.4}, {:.4}]",
                    fit.exponent, fit.ci.0, fit.ci.1
                ),
            );
        }
        Err(e) => report.check("fluctuation-fit", false, format!("error: {e}")),
    }
    match transversal_exponent(
        &cfg.environment,
        n_list,
        reps,
        p.paths.unwrap(),
        p.v.unwrap_or(0.0),
        cfg.grid_policy(),
        cfg.transfer_options(),
    ) {
        Ok(fit) => {
            fit.write_csv(&dir.join("transversal.csv"))?;
            report.attach_file(dir, "transversal.csv")?;
            report.check(
                "transversal-fit",
                fit.exponent.is_finite(),
                format!(
                    "exponent {:.4}, bootstrap CI [{:.4}, {:.4}]",
                    fit.exponent, fit.ci.0, fit.ci.1
                ),
            );
        }
        Err(e) => report.check("transversal-fit", false, format!("error: {e}")),
    }
    Ok(())
}

fn run_busemann(cfg: &ExperimentConfig, dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let p = &cfg.params;
    let (n1, x1) = (p.n1.unwrap(), p.x1.unwrap());
    let (n2, x2) = (p.n2.unwrap(), p.x2.unwrap());
    let v = p.v.unwrap();
    let depths = p.depths.as_ref().unwrap();
    let scale = p.perturb_scale.unwrap_or(1.0);
    let deepest = *depths.iter().min().unwrap();
    let hi = n1.max(n2);
    let reach = depths
        .iter()
        .map(|&d| (v * d as f64).abs() + scale.abs() * (d.abs() as f64).sqrt())
        .fold(x1.abs().max(x2.abs()), f64::max);
    let grid = cfg.grid_policy().grid_for(reach, hi - deepest)?;
    let env = sample_environment(&cfg.environment, grid, (deepest, hi.max(deepest + 1)), 0)?;
    match busemann_estimate(&env, (n1, x1), (n2, x2), v, depths, scale, cfg.transfer_options()) {
        Ok(rows) => {
            write_busemann_csv(&dir.join("busemann.csv"), &rows)?;
            report.attach_file(dir, "busemann.csv")?;
            let gap = |d: i64| {
                rows.iter()
                    .find(|r| r.depth == d)
                    .map(|r| (r.primary - r.perturbed).abs())
                    .unwrap_or(f64::NAN)
            };
            let shallowest = *depths.iter().max().unwrap();
            let (gd, gs) = (gap(deepest), gap(shallowest));
            report.check(
                "sequence-gap-shrinks",
                gd <= gs,
                format!(
                    "|primary - perturbed| is {:.3e} at depth {deepest} vs {:.3e} at depth {shallowest}",
                    gd, gs
                ),
            );
        }
        Err(e) => report.check("sequence-gap-shrinks", false, format!("error: {e}")),
    }
    Ok(())
}

fn run_overlap(cfg: &ExperimentConfig, dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let p = &cfg.params;
    let (n1, x1) = (p.n1.unwrap(), p.x1.unwrap());
    let (n2, x2) = (p.n2.unwrap(), p.x2.unwrap());
    let v = p.v.unwrap();
    let depths = p.depths.as_ref().unwrap();
    let deepest = *depths.iter().min().unwrap();
    let hi = n1.max(n2);
    let lo = 2 * deepest;
    let reach = depths
        .iter()
        .map(|&d| (v * 2.0 * d as f64).abs())
        .fold(x1.abs().max(x2.abs()), f64::max);
    let grid = cfg.grid_policy().grid_for(reach, hi - lo)?;
    let env = sample_environment(&cfg.environment, grid, (lo, hi.max(lo + 1)), 0)?;
    match overlap_curve(&env, (n1, x1), (n2, x2), v, depths, cfg.transfer_options()) {
        Ok(rows) => {
            write_overlap_csv(&dir.join("overlap.csv"), &rows)?;
            report.attach_file(dir, "overlap.csv")?;
            let tv = |d: i64| {
                rows.iter()
                    .find(|r| r.depth == d)
                    .map(|r| r.tv)
                    .unwrap_or(f64::NAN)
            };
            let shallowest = *depths.iter().max().unwrap();
            let (td, ts) = (tv(deepest), tv(shallowest));
            report.check(
                "overlap-decays",
                td <= ts,
                format!(
                    "total variation {:.3e} at depth {deepest} vs {:.3e} at depth {shallowest}",
                    td, ts
                ),
            );
        }
        Err(e) => report.check("overlap-decays", false, format!("error: {e}")),
    }
    Ok(())
}

fn run_pullback(cfg: &ExperimentConfig, dir: &Path, report: &mut ExperimentReport) -> Result<()> {
    let p = &cfg.params;
    let n = p.n.unwrap();
    let v = p.v.unwrap();
    let depths = p.depths.as_ref().unwrap();
    let margin = p.margin.unwrap_or(0.1);
    let deepest = *depths.iter().min().unwrap();
    let reach = (v * deepest as f64).abs().max((v * n as f64).abs());
    let grid = cfg.grid_policy().grid_for(reach, n - deepest)?;
    let env = sample_environment(&cfg.environment, grid, (deepest, n), 0)?;
    // Two admissible initial conditions with the same mean slope: the pure
    // tilt and the tilt plus a localized hill.
    let initials = vec![
        PotentialProfile::from_fn(grid, |x| v * x)?,
        PotentialProfile::from_fn(grid, |x| v * x + 0.6 * (-x * x / 18.0).exp())?,
    ];
    match pullback_experiment(
        &env,
        &initials,
        v,
        depths,
        n,
        (-5.0, 5.0),
        margin,
        cfg.transfer_options(),
    ) {
        Ok(table) => {
            table.write_csv(&dir.join("pullback.csv"))?;
            report.attach_file(dir, "pullback.csv")?;
            let shallowest = *depths.iter().max().unwrap();
            for id in 0..initials.len() {
                let at = |d: i64| {
                    table
                        .rows
                        .iter()
                        .find(|r| r.initial_id == id && r.depth == d)
                        .map(|r| r.sup_diff)
                        .unwrap_or(f64::NAN)
                };
                let (sd, ss) = (at(deepest), at(shallowest));
                report.check(
                    &format!("pullback-column-{id}-shrinks"),
                    sd <= ss,
                    format!(
                        "sup difference {:.3e} from depth {deepest} vs {:.3e} from depth {shallowest}",
                        sd, ss
                    ),
                );
            }
        }
        Err(e) => report.check("pullback-table", false, format!("error: {e}")),
    }
    Ok(())
}

fn run_sample_paths(
    cfg: &ExperimentConfig,
    dir: &Path,
    report: &mut ExperimentReport,
) -> Result<()> {
    let p = &cfg.params;
    let n = p.n.unwrap();
    let v = p.v.unwrap();
    let count = p.paths.unwrap();
    let grid = cfg.grid_policy().grid_for(v.abs() * n as f64, n)?;
    let env = sample_environment(&cfg.environment, grid, (0, n), 0)?;
    let target = grid.node(grid.nearest_index(v * n as f64));
    let pm = PolymerMeasure::new(
        &env,
        0,
        n,
        0.0,
        TerminalMeasure::Atom(target),
        cfg.transfer_options(),
    )?;
    let paths = pm.sample_paths(count, cfg.environment.master_seed)?;
    paths.write_csv(&dir.join("paths.csv"))?;
    report.attach_file(dir, "paths.csv")?;
    let pinned = paths
        .paths
        .iter()
        .all(|p| p[0] == 0.0 && p[p.len() - 1] == target);
    report.check(
        "endpoints-pinned",
        pinned,
        format!("{count} paths from (0, 0) to ({n}, {target})"),
    );
    Ok(())
}

fn fmt(x: f64) -> String {
    format!("{x:.3e}")
}

/// The consolidated cross-module property suite. Everything derives from the
/// config's master seed; reruns are byte-identical, independent of the rayon
/// pool size. Failures become FAIL ledger lines, never panics.
fn run_validate(cfg: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let spec = &cfg.environment;
    let seed = spec.master_seed;
    let opts = TransferOptions::default();
    let kappa = spec.kappa;

    // Shift stability of the log-sum-exp reduction.
    {
        let vals = [-3.0, -1.5, 0.0, 2.5, -700.0];
        let mut worst = 0.0f64;
        for shift in [1e3, -1e3, 250.0] {
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            worst = worst.max((logsumexp(&shifted) - (logsumexp(&vals) + shift)).abs());
        }
        report.check(
            "lse-shift-stability",
            worst < 1e-14,
            format!("max shift residual {}", fmt(worst)),
        );
    }

    // Rectangle-rule heat kernel mass on a window wide enough to hold it.
    {
        let grid = Grid::symmetric(10.0, 0.1)?;
        let row = heat_kernel_logrow(grid, 0.3, 2.0 * kappa)?;
        let resid = row.log_mass().abs();
        report.check(
            "heat-kernel-mass",
            resid < 1e-12,
            format!("log mass residual {}", fmt(resid)),
        );
    }

    // Chapman-Kolmogorov across generators, amplitudes and split times.
    {
        let grid = Grid::symmetric(10.0, 0.1)?;
        let kinds = [
            GeneratorKind::MovingAverageGaussian,
            GeneratorKind::SmoothedShotNoise,
            GeneratorKind::IidCellBump,
        ];
        let mut worst = 0.0f64;
        let mut failure: Option<String> = None;
        for s in 0..50u32 {
            let sub = EnvironmentSpec {
                kind: kinds[(s % 3) as usize],
                amplitude: 0.4 + 0.02 * s as f64,
                correlation_range: 0.5,
                offset: 0.0,
                kappa,
                master_seed: seed ^ 0xc5 ^ u64::from(s),
            };
            let run = (|| -> Result<f64> {
                let env = sample_environment(&sub, grid, (0, 6), s)?;
                let k = 2 + (s % 3) as i64;
                let z = 0.5 * ((s % 5) as f64 - 2.0);
                chapman_kolmogorov_residual(&env, 0, k, 6, 0.0, z, opts)
            })();
            match run {
                Ok(r) => worst = worst.max(r),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        match failure {
            None => report.check(
                "chapman-kolmogorov-sweep",
                worst < 1e-10,
                format!("max residual {} over 50 configurations", fmt(worst)),
            ),
            Some(e) => report.check("chapman-kolmogorov-sweep", false, format!("error: {e}")),
        }
    }

    let flat = EnvironmentSpec {
        amplitude: 0.0,
        offset: 0.0,
        ..spec.clone()
    };

    // Zero-potential partition values against the Gaussian closed form.
    report.check_result(
        "zero-potential-point-values",
        (|| {
            let grid = Grid::symmetric(14.0, 0.1)?;
            let env = sample_environment(&flat, grid, (0, 5), 0)?;
            let mut worst = 0.0f64;
            for &y in &[0.0, 0.8, -1.6] {
                let got = log_partition_p2p(&env, 0, 5, 0.0, y, opts)?;
                worst = worst.max((got - log_gaussian(y, 2.0 * kappa * 5.0)).abs());
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-8, format!("max deviation {}", fmt(*w))),
    );

    // Zero-potential midpoint marginal against the Brownian-bridge moments.
    report.check_result(
        "zero-potential-bridge-moments",
        (|| {
            let grid = Grid::symmetric(14.0, 0.1)?;
            let env = sample_environment(&flat, grid, (0, 6), 0)?;
            let pm = PolymerMeasure::new(&env, 0, 6, 0.0, TerminalMeasure::Atom(1.0), opts)?;
            let (mean, var) = pm.marginal_density(3)?.mean_and_variance()?;
            let dm = (mean - 0.5).abs();
            let dv = (var - 2.0 * kappa * 3.0 * 3.0 / 6.0).abs();
            Ok(dm.max(dv))
        })(),
        |w| (*w < 1e-6, format!("max moment deviation {}", fmt(*w))),
    );

    // One unforced kick step maps u(x) = x to u(x) = x/2.
    report.check_result(
        "kick-step-closed-form",
        (|| {
            let grid = Grid::symmetric(16.0, 0.05)?;
            let env = sample_environment(&flat, grid, (0, 1), 0)?;
            let w = PotentialProfile::from_fn(grid, |x| x * x / 2.0)?;
            let state = kick_evolve(&env, &hopf_cole(&w, kappa, 0)?, 1, opts)?;
            let u = velocity_from_state(&state)?;
            let mut worst = 0.0f64;
            for i in 0..grid.count {
                let x = grid.node(i);
                if x.abs() <= 4.0 {
                    worst = worst.max((u.values[i] - x / 2.0).abs());
                }
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-6, format!("max deviation {}", fmt(*w))),
    );

    // Hopf-Cole round trip on a rough seeded potential.
    report.check_result(
        "hopf-cole-round-trip",
        (|| {
            let grid = Grid::symmetric(6.0, 0.1)?;
            let mut rng = substream(seed, StreamPurpose::Auxiliary, 0, -1);
            let mut vals: Vec<f64> = (0..grid.count).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let origin = grid.index_at(0.0)?;
            let pin = vals[origin];
            for v in &mut vals {
                *v -= pin;
            }
            let w = PotentialProfile::new(grid, vals.clone())?;
            let back = crate::burgers::inverse_hopf_cole(&hopf_cole(&w, kappa, 0)?)?;
            let worst = back
                .values()
                .iter()
                .zip(w.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            Ok(worst)
        })(),
        |w| (*w < 1e-14, format!("max round-trip error {}", fmt(*w))),
    );

    // Evolution composes: m -> k directly equals m -> n -> k.
    report.check_result(
        "cocycle-composition",
        (|| {
            let grid = Grid::symmetric(14.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 6), 1)?;
            let w = PotentialProfile::from_fn(grid, |x| 0.3 * x)?;
            let start = hopf_cole(&w, kappa, 0)?;
            let direct = kick_evolve(&env, &start, 6, opts)?;
            let mid = kick_evolve(&env, &start, 2, opts)?;
            let via = kick_evolve(&env, &mid, 6, opts)?;
            let mut worst = (direct.log_const() - via.log_const()).abs();
            for (a, b) in direct.log_phi().iter().zip(via.log_phi()) {
                worst = worst.max((a - b).abs());
            }
            let origin = grid.index_at(0.0)?;
            let pinned = direct.log_phi()[origin] == 0.0 && via.log_phi()[origin] == 0.0;
            Ok((worst, pinned))
        })(),
        |(w, pinned)| {
            (
                *w < 1e-10 && *pinned,
                format!("max composition residual {}, origin pinned: {pinned}", fmt(*w)),
            )
        },
    );

    // The Gaussian generator has a closed-form normalization constant.
    if spec.kind == GeneratorKind::MovingAverageGaussian {
        report.check_result(
            "lambda-closed-form",
            estimate_lambda(spec, 4000),
            |est| {
                let exact = (spec.amplitude * spec.amplitude / (8.0 * kappa * kappa)).exp();
                let z = if est.stderr > 0.0 {
                    (est.mean - exact).abs() / est.stderr
                } else if (est.mean - exact).abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                (z < 3.0, format!("estimate {:.6}, exact {:.6}, z = {:.2}", est.mean, exact, z))
            },
        );
    }

    // Monte Carlo mean of the partition function against lambda^n times the
    // zero-potential value, pointwise on the grid.
    report.check_result(
        "partition-mean-identity",
        (|| {
            let n = 3i64;
            let grid = cfg.grid_policy().grid_for(0.0, n)?;
            let flat_env = sample_environment(&flat, grid, (0, n), 0)?;
            let base = forward_slices(&flat_env, 0, n, 0.0, opts)?;
            let base_last = &base[base.len() - 1];
            let lam = estimate_lambda(spec, 4000)?;
            let reps = 400u32;
            let ys = [0.0, 0.5, -1.0];
            let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(reps as usize); ys.len()];
            for r in 0..reps {
                let env = sample_environment(spec, grid, (0, n), r)?;
                let slices = forward_slices(&env, 0, n, 0.0, opts)?;
                let last = &slices[slices.len() - 1];
                for (col, &y) in ratios.iter_mut().zip(&ys) {
                    let i = grid.nearest_index(y);
                    col.push((last.value(i) - base_last.value(i)).exp());
                }
            }
            let target = lam.mean.powi(n as i32);
            let target_se = n as f64 * lam.mean.powi(n as i32 - 1) * lam.stderr;
            let mut worst_z = 0.0f64;
            let mut degenerate = true;
            for col in &ratios {
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|c| (c - m).powi(2)).sum::<f64>()
                    / (col.len() as f64 - 1.0);
                let se = (var / col.len() as f64).sqrt();
                let total_se = (se * se + target_se * target_se).sqrt();
                if total_se > 0.0 {
                    degenerate = false;
                    worst_z = worst_z.max((m - target).abs() / total_se);
                } else {
                    worst_z = worst_z.max(if (m - target).abs() < 1e-12 {
                        0.0
                    } else {
                        f64::INFINITY
                    });
                }
            }
            Ok((worst_z, degenerate))
        })(),
        |(z, degenerate)| {
            let note = if *degenerate {
                " (degenerate: deterministic environment, exact match)"
            } else {
                ""
            };
            (*z < 3.0, format!("worst z-score {:.2}{note}", z))
        },
    );

    // Shearing the environment changes the partition function by the exact
    // quadratic factor, path by path.
    report.check_result(
        "shear-pathwise-identity",
        (|| {
            let grid = Grid::symmetric(16.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 6), 2)?;
            let mut worst = 0.0f64;
            for &v in &[0.5, -0.4] {
                let sheared = env.shear(v, ShearMode::Strict)?;
                let lhs = log_partition_p2p(&sheared, 0, 6, 0.0, 0.0, opts)?;
                let rhs = log_partition_p2p(&env, 0, 6, 0.0, v * 6.0, opts)?
                    + v * v * 6.0 / (4.0 * kappa);
                worst = worst.max((lhs - rhs).abs());
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-10, format!("max identity residual {}", fmt(*w))),
    );

    // Path measures are stochastically monotone in both endpoints.
    report.check_result(
        "endpoint-dominance",
        (|| {
            let grid = Grid::symmetric(10.0, 0.1)?;
            let mut worst = f64::NEG_INFINITY;
            for r in 0..3u32 {
                let env = sample_environment(spec, grid, (0, 4), 10 + r)?;
                let low = PolymerMeasure::new(&env, 0, 4, -0.5, TerminalMeasure::Atom(0.5), opts)?;
                let high = PolymerMeasure::new(&env, 0, 4, 0.5, TerminalMeasure::Atom(0.5), opts)?;
                worst = worst.max(dominance_residual(&low, &high, 2)?);
                let tlow = PolymerMeasure::new(&env, 0, 4, 0.0, TerminalMeasure::Atom(-0.5), opts)?;
                let thigh = PolymerMeasure::new(&env, 0, 4, 0.0, TerminalMeasure::Atom(0.5), opts)?;
                worst = worst.max(dominance_residual(&tlow, &thigh, 2)?);
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-10, format!("max CDF crossing {}", fmt(*w))),
    );

    // Restricting a long polymer to early times equals the short polymer
    // whose terminal weight is the partition-to-go.
    report.check_result(
        "projection-consistency",
        (|| {
            let grid = Grid::symmetric(12.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 6), 3)?;
            let long = PolymerMeasure::new(&env, 0, 6, 0.0, TerminalMeasure::Atom(0.5), opts)?;
            let to_go = long.backward_weight(3)?.normalized()?;
            let short =
                PolymerMeasure::new(&env, 0, 3, 0.0, TerminalMeasure::Density(to_go), opts)?;
            let mut worst = 0.0f64;
            for k in 1..=2i64 {
                worst = worst.max(
                    long.marginal_density(k)?
                        .tv_distance(&short.marginal_density(k)?)?,
                );
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-10, format!("max total variation {}", fmt(*w))),
    );

    // Path sampling is a pure function of the seed.
    report.check_result(
        "sampler-determinism",
        (|| {
            let grid = Grid::symmetric(10.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 5), 4)?;
            let pm = PolymerMeasure::new(&env, 0, 5, 0.0, TerminalMeasure::Atom(0.5), opts)?;
            let a = pm.sample_paths(16, seed ^ 7)?;
            let b = pm.sample_paths(16, seed ^ 7)?;
            let c = pm.sample_paths(16, seed ^ 8)?;
            Ok((a.paths == b.paths, a.paths != c.paths))
        })(),
        |(same, differs)| {
            (
                *same && *differs,
                format!("repeat identical: {same}, reseed differs: {differs}"),
            )
        },
    );

    // x - u(x) is nondecreasing for every evolved profile.
    report.check_result(
        "x-minus-u-monotonicity",
        (|| {
            let grid = Grid::symmetric(14.0, 0.1)?;
            let mut worst = f64::NEG_INFINITY;
            for r in 0..5u32 {
                let env = sample_environment(spec, grid, (0, 2), 20 + r)?;
                let w = PotentialProfile::from_fn(grid, |x| {
                    0.5 * (x + r as f64).sin() + 0.2 * (2.0 * x).cos()
                })?;
                let state = kick_evolve(&env, &hopf_cole(&w, kappa, 0)?, 2, opts)?;
                worst = worst.max(monotonicity_residual(&velocity_from_state(&state)?));
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-8, format!("max residual {} over 5 evolved profiles", fmt(*w))),
    );

    // The same residual flags an un-evolved profile that bends the wrong way.
    report.check_result(
        "monotonicity-negative-control",
        (|| {
            let grid = Grid::symmetric(6.0, 0.1)?;
            let raw = VelocityProfile::new(grid, (0..grid.count).map(|i| 2.0 * grid.node(i)).collect())?;
            Ok(monotonicity_residual(&raw))
        })(),
        |w| (*w > 0.0, format!("un-evolved control residual {}", fmt(*w))),
    );

    // The derivative of the evolved state computed by a mean sweep equals
    // the velocity read through the backward path measure.
    report.check_result(
        "velocity-extraction-consistency",
        (|| {
            let grid = Grid::symmetric(14.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 4), 5)?;
            let w = PotentialProfile::from_fn(grid, |x| 0.3 * x)?;
            let state = hopf_cole(&w, kappa, 0)?;
            let exact = velocity_sweep_from_state(&env, &state, 4, opts)?;
            let mut worst = 0.0f64;
            for &x in &[-1.0, 0.0, 1.0] {
                let via = velocity_via_path_measure(&env, &state, 4, x, opts)?;
                worst = worst.max((exact.values[grid.index_at(x)?] - via).abs());
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-8, format!("max machinery gap {}", fmt(*w))),
    );

    // A 12-sigma banded kernel reproduces the dense chain in the bulk.
    report.check_result(
        "banded-transfer-agreement",
        (|| {
            let grid = Grid::symmetric(12.0, 0.1)?;
            let env = sample_environment(spec, grid, (0, 4), 6)?;
            let mut worst = 0.0f64;
            for &y in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                let dense = log_partition_p2p(&env, 0, 4, 0.0, y, TransferOptions::default())?;
                let banded = log_partition_p2p(&env, 0, 4, 0.0, y, TransferOptions::banded(12.0))?;
                worst = worst.max((dense - banded).abs());
            }
            Ok(worst)
        })(),
        |w| (*w < 1e-10, format!("max bulk deviation {}", fmt(*w))),
    );

    // Partition log-ratios without potential reduce to Gaussian ratios.
    report.check_result(
        "busemann-closed-form",
        (|| {
            let grid = Grid::symmetric(20.0, 0.1)?;
            let env = sample_environment(&flat, grid, (-8, 2), 0)?;
            let rows = busemann_estimate(&env, (1, 0.5), (2, -0.5), 0.25, &[-8], 1.0, opts)?;
            let r = &rows[0];
            let expect = log_gaussian(0.5 - r.y, 2.0 * kappa * 9.0)
                - log_gaussian(-0.5 - r.y, 2.0 * kappa * 10.0);
            Ok((r.primary - expect).abs())
        })(),
        |w| (*w < 1e-8, format!("closed-form deviation {}", fmt(*w))),
    );

    // Identical anchors give exactly zero ratios and zero overlap distance.
    report.check_result(
        "busemann-identical-anchors",
        (|| {
            let grid = Grid::symmetric(16.0, 0.1)?;
            let env = sample_environment(spec, grid, (-8, 1), 7)?;
            let rows = busemann_estimate(&env, (0, 0.5), (0, 0.5), 0.0, &[-4, -8], 1.0, opts)?;
            Ok(rows.iter().all(|r| r.primary == 0.0 && r.perturbed == 0.0))
        })(),
        |zero| (*zero, format!("all ratios exactly zero: {zero}")),
    );

    report.check_result(
        "overlap-identical-anchors",
        (|| {
            let grid = Grid::symmetric(16.0, 0.1)?;
            let env = sample_environment(spec, grid, (-8, 1), 8)?;
            let rows = overlap_curve(&env, (0, 0.5), (0, 0.5), 0.0, &[-4], opts)?;
            Ok(rows[0].tv)
        })(),
        |tv| (*tv == 0.0, format!("total variation {}", fmt(*tv))),
    );

    // The deepest tilt is its own pullback reference, bit for bit.
    report.check_result(
        "pullback-fixed-point",
        (|| {
            let v = 0.3;
            let grid = cfg.grid_policy().grid_for(1.8, 7)?;
            let env = sample_environment(spec, grid, (-6, 1), 9)?;
            let tilt = PotentialProfile::from_fn(grid, |x| v * x)?;
            check_basin_condition(&tilt, v, 0.1)?;
            let table = pullback_experiment(
                &env,
                std::slice::from_ref(&tilt),
                v,
                &[-6, -3],
                1,
                (-4.0, 4.0),
                0.1,
                opts,
            )?;
            let deepest = table
                .rows
                .iter()
                .find(|r| r.depth == -6)
                .map(|r| r.sup_diff)
                .unwrap_or(f64::NAN);
            let shallow = table
                .rows
                .iter()
                .find(|r| r.depth == -3)
                .map(|r| r.sup_diff)
                .unwrap_or(f64::NAN);
            Ok((deepest, shallow))
        })(),
        |(deep, shallow)| {
            (
                *deep == 0.0 && shallow.is_finite(),
                format!("sup difference {} at the reference depth, {} shallower", fmt(*deep), fmt(*shallow)),
            )
        },
    );

    // Degenerate amplitude-zero branches: the shape table collapses to the
    // closed form and the fluctuation fit refuses the zero-variance input.
    report.check_result(
        "degenerate-amplitude-zero",
        (|| {
            let table = shape_estimate(
                &flat,
                6,
                &[0.0, 0.5],
                8,
                cfg.grid_policy(),
                opts,
            )?;
            let mut worst = 0.0f64;
            for row in &table.rows {
                let expect = -row.v * row.v / 2.0
                    - (2.0 * std::f64::consts::PI * 6.0).ln() / 12.0;
                worst = worst.max((row.mean - expect).abs());
            }
            let refused = match fluctuation_exponent(
                &flat,
                &[2, 4],
                32,
                cfg.grid_policy(),
                opts,
            ) {
                Err(Error::Degenerate(_)) => true,
                _ => false,
            };
            Ok((worst, refused))
        })(),
        |(w, refused)| {
            (
                *w < 1e-9 && *refused,
                format!(
                    "degenerate branches exercised: closed-form deviation {}, zero-variance refusal: {refused}",
                    fmt(*w)
                ),
            )
        },
    );

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("polyburg-exp-{tag}-{}", std::process::id()));
        std::fs::remove_dir_all(&d).ok();
        d
    }

    #[test]
    fn shape_campaign_reports_the_flat_curvature() {
        let dir = tmpdir("shape");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Shape, 5);
        cfg.environment.amplitude = 0.0;
        cfg.params.n = Some(8);
        cfg.params.v_list = Some(vec![0.0, 0.25, -0.25, 0.5, -0.5]);
        cfg.params.replicates = Some(8);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());

        let fit = std::fs::read_to_string(dir.join("shape_fit.csv")).unwrap();
        let row = fit.lines().nth(1).unwrap();
        let curvature: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(
            (curvature + 0.5).abs() < 1e-6,
            "curvature {curvature} should be -1/2 without potential"
        );
        let names: Vec<&str> = report
            .manifest
            .files
            .iter()
            .map(|f| f.name.as_str())
            .collect();
        assert_eq!(names, vec!["ledger.txt", "shape.csv", "shape_fit.csv"]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_configs_write_nothing() {
        let dir = tmpdir("badcfg");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Shape, 5);
        cfg.params.dx = Some(-0.1);
        cfg.output_dir = Some(dir.clone());
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("params.dx"), "got: {err}");
        assert!(!dir.exists(), "no artifacts on config failure");
    }

    #[test]
    fn validate_passes_and_reruns_byte_identically() {
        let dir = tmpdir("validate");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Validate, 7);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger:\n{}", report.ledger_text());
        assert!(report.ledger.len() >= 20, "suite should be comprehensive");
        let first_ledger = std::fs::read(dir.join("ledger.txt")).unwrap();
        let first_manifest = std::fs::read(dir.join("manifest.json")).unwrap();

        let report2 = run_experiment(&cfg).unwrap();
        assert!(report2.all_passed());
        assert_eq!(first_ledger, std::fs::read(dir.join("ledger.txt")).unwrap());
        assert_eq!(
            first_manifest,
            std::fs::read(dir.join("manifest.json")).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validate_annotates_degenerate_generators() {
        let dir = tmpdir("validate-flat");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Validate, 7);
        cfg.environment.amplitude = 0.0;
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger:\n{}", report.ledger_text());
        let text = report.ledger_text();
        assert!(text.contains("degenerate"), "ledger:\n{text}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sample_paths_campaign_writes_every_step() {
        let dir = tmpdir("paths");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::SamplePaths, 3);
        cfg.params.n = Some(6);
        cfg.params.paths = Some(10);
        cfg.params.v = Some(0.5);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());
        let text = std::fs::read_to_string(dir.join("paths.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 10 * 7, "header plus 10 paths of 7 nodes");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn busemann_and_overlap_campaigns_run_their_checks() {
        let dir = tmpdir("buse");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Busemann, 5);
        cfg.environment.amplitude = 0.6;
        cfg.params.depths = Some(vec![-2, -8]);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());
        assert!(dir.join("busemann.csv").exists());
        std::fs::remove_dir_all(&dir).ok();

        let dir = tmpdir("over");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Overlap, 5);
        cfg.environment.amplitude = 0.6;
        cfg.params.depths = Some(vec![-2, -8]);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());
        assert!(dir.join("overlap.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pullback_campaign_columns_shrink() {
        let dir = tmpdir("pull");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::BurgersPullback, 9);
        cfg.environment.amplitude = 0.5;
        cfg.params.n = Some(1);
        // Well-separated depths: the shallow probe still carries most of the
        // initial-condition difference, the deep one has forgotten it.
        cfg.params.depths = Some(vec![-3, -12]);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());
        assert!(dir.join("pullback.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn exponents_campaign_emits_both_tables() {
        let dir = tmpdir("expo");
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Exponents, 13);
        cfg.environment.amplitude = 0.9;
        cfg.params.n_list = Some(vec![2, 4]);
        cfg.params.replicates = Some(32);
        cfg.params.paths = Some(12);
        cfg.params.dx = Some(0.25);
        cfg.params.band_sigmas = Some(8.0);
        cfg.output_dir = Some(dir.clone());
        let report = run_experiment(&cfg).unwrap();
        assert!(report.all_passed(), "ledger: {}", report.ledger_text());
        assert!(dir.join("fluctuation.csv").exists());
        assert!(dir.join("transversal.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
