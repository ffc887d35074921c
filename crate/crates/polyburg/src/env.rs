//! Random potential environments.
//!
//! An environment is a family `F_k(x)` of potential slices, one per integer
//! time `k`, sampled on a spatial grid. Slices are independent across time and
//! statistically stationary in space; every generator draws each slice from
//! its own counter-derived RNG stream, so the slice at time `k` of realization
//! `r` is a pure function of `(master_seed, r, k, grid)` no matter which time
//! window was requested or in what order slices are materialized. That is what
//! makes every experiment in this crate replayable across thread counts.
//!
//! Three generator families are provided:
//!
//! * moving-average Gaussian: white node noise convolved with a raised-cosine
//!   tap profile of half-width `correlation_range`, normalized so the marginal
//!   standard deviation equals `amplitude`. Unbounded but with Gaussian tails,
//!   so all exponential moments are finite.
//! * smoothed shot noise: a Poisson cloud of `cos^2` bumps of half-width
//!   `correlation_range` with uniform amplitudes in `[-amplitude, amplitude]`.
//! * iid cell bumps: one `sin^2` bump per cell of width `correlation_range`,
//!   with iid uniform coefficients and a uniform random phase per slice so the
//!   field is stationary under all shifts, not just cell-width multiples.
//!
//! All three vanish at `amplitude = 0` and admit a deterministic constant
//! `offset`, which is how the exactly-solvable zero-potential cases are
//! expressed.

use crate::lattice::Grid;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Disjoint RNG stream families. Everything that consumes randomness in this
/// crate goes through [`substream`] with one of these tags, so no two
/// consumers can ever collide even when they share a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    EnvironmentNoise,
    PathSampling,
    Bootstrap,
    LambdaSampling,
    Auxiliary,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::EnvironmentNoise => 1,
            StreamPurpose::PathSampling => 2,
            StreamPurpose::Bootstrap => 3,
            StreamPurpose::LambdaSampling => 4,
            StreamPurpose::Auxiliary => 5,
        }
    }
}

/// Counter-derived RNG stream keyed by `(master_seed, purpose, realization,
/// time)`. The key is packed into the ChaCha stream id: 4 bits of purpose, 28
/// bits of realization index, 32 bits of zigzag-coded time. Realization
/// indices must stay below 2^28 and times within +-2^31, far beyond anything
/// a desk-scale run touches.
pub fn substream(master_seed: u64, purpose: StreamPurpose, realization: u32, time: i64) -> ChaCha8Rng {
    assert!(realization < (1 << 28), "realization index too large for stream packing");
    let zigzag = ((time << 1) ^ (time >> 63)) as u64 & 0xFFFF_FFFF;
    let stream = (purpose.tag() << 60) | (u64::from(realization) << 32) | zigzag;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Which family of random potentials to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    MovingAverageGaussian,
    SmoothedShotNoise,
    IidCellBump,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::MovingAverageGaussian => "moving-average-gaussian",
            GeneratorKind::SmoothedShotNoise => "smoothed-shot-noise",
            GeneratorKind::IidCellBump => "iid-cell-bump",
        }
    }
}

/// Full description of an environment distribution. Two specs with equal
/// fields generate identical environments on identical grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: GeneratorKind,
    /// Scale of the potential. Marginal standard deviation for the Gaussian
    /// generator, bump coefficient bound for the other two. Zero is legal and
    /// gives the deterministic field `F = offset`.
    pub amplitude: f64,
    /// Spatial correlation scale. Tap half-width, bump half-width or cell
    /// width depending on the generator. The autocovariance of every
    /// generator vanishes beyond twice this value.
    pub correlation_range: f64,
    /// Deterministic constant added to every slice.
    #[serde(default)]
    pub offset: f64,
    /// Viscosity of the associated Burgers flow; the diffusion step has
    /// variance `2 * kappa` and potential weights are `exp(-F / (2 kappa))`.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub master_seed: u64,
}

fn default_kappa() -> f64 {
    0.5
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "amplitude must be finite and >= 0, got {}",
                self.amplitude
            )));
        }
        if !(self.correlation_range >= 0.0) || !self.correlation_range.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "correlation_range must be finite and >= 0, got {}",
                self.correlation_range
            )));
        }
        if self.kind == GeneratorKind::IidCellBump && !(self.correlation_range > 0.0) {
            return Err(Error::InvalidArgument(
                "iid-cell-bump needs a positive correlation_range (the cell width)".into(),
            ));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kappa must be finite and > 0, got {}",
                self.kappa
            )));
        }
        if !self.offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "offset must be finite, got {}",
                self.offset
            )));
        }
        Ok(())
    }
}

/// A realized environment: potential slices for every integer time in
/// `[time_lo, time_hi)`, each sampled on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    spec: EnvironmentSpec,
    grid: Grid,
    time_lo: i64,
    slices: Vec<Vec<f64>>,
    realization: u32,
    /// Human-readable provenance, updated by transforms so snapshots record
    /// how a derived environment was produced.
    label: String,
}

/// Draw one potential slice at absolute `time` for the given realization.
fn sample_slice(spec: &EnvironmentSpec, grid: Grid, realization: u32, time: i64) -> Vec<f64> {
    let mut rng = substream(spec.master_seed, StreamPurpose::EnvironmentNoise, realization, time);
    let mut values = match spec.kind {
        GeneratorKind::MovingAverageGaussian => moving_average_slice(spec, grid, &mut rng),
        GeneratorKind::SmoothedShotNoise => shot_noise_slice(spec, grid, &mut rng),
        GeneratorKind::IidCellBump => cell_bump_slice(spec, grid, &mut rng),
    };
    if spec.offset != 0.0 {
        for v in &mut values {
            *v += spec.offset;
        }
    }
    values
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws; fixed draw count per call keeps the
    // stream layout independent of the values produced.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn moving_average_slice(spec: &EnvironmentSpec, grid: Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Raised-cosine taps over |u| <= range, normalized to unit l2 norm so the
    // marginal variance is amplitude^2 exactly. Range below dx degenerates to
    // a single tap, i.e. iid Gaussians per node.
    let h = (spec.correlation_range / grid.dx).floor() as usize;
    let mut taps: Vec<f64> = (0..=h)
        .map(|d| {
            let u = d as f64 * grid.dx;
            1.0 + (std::f64::consts::PI * u / spec.correlation_range.max(grid.dx)).cos()
        })
        .collect();
    let norm: f64 = taps[0] * taps[0] + 2.0 * taps[1..].iter().map(|t| t * t).sum::<f64>();
    let norm = norm.sqrt();
    for t in &mut taps {
        *t /= norm;
    }
    // White noise on the grid padded by the tap half-width on each side.
    let padded = grid.count + 2 * h;
    let noise: Vec<f64> = (0..padded).map(|_| standard_normal(rng)).collect();
    (0..grid.count)
        .map(|i| {
            let c = i + h;
            let mut acc = taps[0] * noise[c];
            for d in 1..=h {
                acc += taps[d] * (noise[c - d] + noise[c + d]);
            }
            spec.amplitude * acc
        })
        .collect()
}

fn shot_noise_slice(spec: &EnvironmentSpec, grid: Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Poisson cloud of cos^2 bumps, intensity 1/range so about two bumps
    // overlap any given point. Points are drawn on the grid padded by one
    // bump half-width, which keeps the field stationary across the whole
    // analysis window.
    let r = spec.correlation_range.max(grid.dx);
    let lo = grid.x_min - r;
    let hi = grid.x_max() + r;
    let mean = (hi - lo) / r;
    let count = sample_poisson(rng, mean);
    let mut values = vec![0.0; grid.count];
    for _ in 0..count {
        let p: f64 = rng.gen_range(lo..hi);
        let a: f64 = rng.gen_range(-spec.amplitude..=spec.amplitude);
        // cos^2 bump supported on [p - r, p + r].
        let i_lo = grid.nearest_index(p - r);
        let i_hi = grid.nearest_index(p + r);
        for i in i_lo..=i_hi {
            let u = (grid.node(i) - p) / r;
            if u.abs() < 1.0 {
                let c = (0.5 * std::f64::consts::PI * u).cos();
                values[i] += a * c * c;
            }
        }
    }
    values
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    // Counts here are small (window length over correlation range); for the
    // larger means a normal approximation is fine and keeps draws cheap.
    if mean <= 0.0 {
        return 0;
    }
    if mean < 64.0 {
        let limit = (-mean).exp();
        let mut n = 0usize;
        let mut prod: f64 = rng.gen_range(0.0..1.0);
        while prod > limit {
            n += 1;
            prod *= rng.gen_range(0.0..1.0_f64);
        }
        n
    } else {
        let g = standard_normal(rng);
        (mean + mean.sqrt() * g).round().max(0.0) as usize
    }
}

fn cell_bump_slice(spec: &EnvironmentSpec, grid: Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // One sin^2 bump per cell of width c, iid coefficients, one uniform phase
    // per slice. sin^2 vanishes with zero slope at cell boundaries, so the
    // field is C^1 across cells and bounded by |amplitude|.
    let c = spec.correlation_range;
    let phase: f64 = rng.gen_range(0.0..c);
    let j_lo = ((grid.x_min - phase) / c).floor() as i64 - 1;
    let j_hi = ((grid.x_max() - phase) / c).floor() as i64 + 1;
    let coeffs: Vec<f64> = (j_lo..=j_hi)
        .map(|_| rng.gen_range(-spec.amplitude..=spec.amplitude))
        .collect();
    (0..grid.count)
        .map(|i| {
            let t = (grid.node(i) - phase) / c;
            let j = t.floor();
            let frac = t - j;
            let idx = (j as i64 - j_lo) as usize;
            let s = (std::f64::consts::PI * frac).sin();
            coeffs[idx] * s * s
        })
        .collect()
}

/// Sample an environment over the inclusive path-time range `[m, n]`, which
/// materializes potential slices for times `m..n-1` (a path touching times
/// `m..=n` is only ever charged at `m..n-1`).
pub fn sample_environment(
    spec: &EnvironmentSpec,
    grid: Grid,
    time_range: (i64, i64),
    realization: u32,
) -> Result<Environment> {
    spec.validate()?;
    let (m, n) = time_range;
    if n <= m {
        return Err(Error::InvalidArgument(format!(
            "time range needs n > m, got [{m}, {n}]"
        )));
    }
    let extent = grid.x_max() - grid.x_min;
    if spec.correlation_range > 0.5 * extent {
        return Err(Error::InvalidArgument(format!(
            "correlation_range {} exceeds half the grid extent {}",
            spec.correlation_range,
            0.5 * extent
        )));
    }
    let slices = (m..n)
        .map(|t| sample_slice(spec, grid, realization, t))
        .collect();
    Ok(Environment {
        spec: spec.clone(),
        grid,
        time_lo: m,
        slices,
        realization,
        label: format!("{} r{realization}", spec.kind.name()),
    })
}

/// How the shear transform treats per-slice offsets that do not land on grid
/// nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShearMode {
    /// Every per-slice offset `v * k` must be a grid multiple; anything else
    /// is an error. Shear identities are exact in this mode.
    Strict,
    /// Linear interpolation between neighboring nodes.
    Interpolate,
}

impl Environment {
    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kappa(&self) -> f64 {
        self.spec.kappa
    }

    /// First time whose potential slice is stored.
    pub fn time_lo(&self) -> i64 {
        self.time_lo
    }

    /// One past the last stored slice time.
    pub fn time_hi(&self) -> i64 {
        self.time_lo + self.slices.len() as i64
    }

    pub fn realization(&self) -> u32 {
        self.realization
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn slice(&self, time: i64) -> Result<&[f64]> {
        if time < self.time_lo || time >= self.time_hi() {
            return Err(Error::OutOfRange(format!(
                "no potential slice at time {time}; environment covers [{}, {})",
                self.time_lo,
                self.time_hi()
            )));
        }
        Ok(&self.slices[(time - self.time_lo) as usize])
    }

    /// Copy of the sub-environment covering path times `[m, n]`, i.e. slices
    /// `m..n-1`.
    pub fn window(&self, m: i64, n: i64) -> Result<Environment> {
        if n <= m {
            return Err(Error::InvalidArgument(format!(
                "window needs n > m, got [{m}, {n}]"
            )));
        }
        // Slices m..=n-1 must exist (a path over [m, n] is charged at those times).
        if m < self.time_lo || n > self.time_hi() {
            return Err(Error::OutOfRange(format!(
                "window [{m}, {n}] outside environment slices [{}, {})",
                self.time_lo,
                self.time_hi()
            )));
        }
        let a = (m - self.time_lo) as usize;
        let b = (n - self.time_lo) as usize;
        Ok(Environment {
            spec: self.spec.clone(),
            grid: self.grid,
            time_lo: m,
            slices: self.slices[a..b].to_vec(),
            realization: self.realization,
            label: self.label.clone(),
        })
    }

    /// Time-space shift: the result has slices `G_m = F_{n_shift + m}`
    /// evaluated at `x_shift + y`. The spatial offset is snapped to the
    /// nearest grid multiple (exact when it is one); the spatial window
    /// shrinks by the offset, and shrinking below two nodes is an error.
    pub fn shift(&self, n_shift: i64, x_shift: f64) -> Result<Environment> {
        let j = (x_shift / self.grid.dx).round() as i64;
        let snapped = j as f64 * self.grid.dx;
        if (snapped - x_shift).abs() > 1e-9 * self.grid.dx {
            return Err(Error::InvalidArgument(format!(
                "spatial shift {x_shift} is not a grid multiple (nearest {snapped})"
            )));
        }
        let count = self.grid.count as i64 - j.abs();
        if count < 2 {
            return Err(Error::OutOfRange(format!(
                "spatial shift {x_shift} leaves fewer than 2 grid nodes"
            )));
        }
        let start = j.max(0) as usize; // first source index read
        let new_x_min = if j >= 0 {
            self.grid.x_min
        } else {
            self.grid.node((-j) as usize)
        };
        let grid = Grid::new(new_x_min, self.grid.dx, count as usize)?;
        let slices: Vec<Vec<f64>> = self
            .slices
            .iter()
            .map(|s| {
                if j >= 0 {
                    s[start..start + count as usize].to_vec()
                } else {
                    s[0..count as usize].to_vec()
                }
            })
            .collect();
        Ok(Environment {
            spec: self.spec.clone(),
            grid,
            time_lo: self.time_lo - n_shift,
            slices,
            realization: self.realization,
            label: format!("{} shifted by ({n_shift}, {x_shift})", self.label),
        })
    }

    /// Shear: slice at time `k` is shifted in space by `v * k`, making paths
    /// of slope `v` in the original environment correspond to flat paths in
    /// the result. The common spatial window shrinks by the largest per-slice
    /// offset.
    pub fn shear(&self, v: f64, mode: ShearMode) -> Result<Environment> {
        let dx = self.grid.dx;
        let times: Vec<i64> = (self.time_lo..self.time_hi()).collect();
        let offsets: Vec<f64> = times.iter().map(|&t| v * t as f64 / dx).collect();
        if mode == ShearMode::Strict {
            for (&t, &s) in times.iter().zip(&offsets) {
                if (s - s.round()).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "shear offset v*k = {} at time {t} is not a grid multiple",
                        v * t as f64
                    )));
                }
            }
        }
        let smax = offsets.iter().cloned().fold(0.0_f64, f64::max);
        let smin = offsets.iter().cloned().fold(0.0_f64, f64::min);
        let left_trim = (-smin).max(0.0).ceil() as usize;
        let right_trim = smax.max(0.0).ceil() as usize;
        if left_trim + right_trim + 2 > self.grid.count {
            return Err(Error::OutOfRange(format!(
                "shear by v = {v} over times [{}, {}) leaves fewer than 2 grid nodes",
                self.time_lo,
                self.time_hi()
            )));
        }
        let count = self.grid.count - left_trim - right_trim;
        let grid = Grid::new(self.grid.node(left_trim), dx, count)?;
        let slices: Vec<Vec<f64>> = self
            .slices
            .iter()
            .zip(&offsets)
            .map(|(s, &off)| {
                (0..count)
                    .map(|i| {
                        let pos = left_trim as f64 + i as f64 + off;
                        if mode == ShearMode::Strict {
                            s[pos.round() as usize]
                        } else {
                            let f = pos.floor();
                            let lo = f as usize;
                            let w = pos - f;
                            if w == 0.0 || lo + 1 >= s.len() {
                                s[lo.min(s.len() - 1)]
                            } else {
                                (1.0 - w) * s[lo] + w * s[lo + 1]
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Environment {
            spec: self.spec.clone(),
            grid,
            time_lo: self.time_lo,
            slices,
            realization: self.realization,
            label: format!("{} sheared by v = {v}", self.label),
        })
    }

    /// Add a deterministic constant to every slice.
    pub fn with_offset(&self, c: f64) -> Environment {
        let mut out = self.clone();
        for s in &mut out.slices {
            for v in s.iter_mut() {
                *v += c;
            }
        }
        out.spec.offset += c;
        out.label = format!("{} offset by {c}", out.label);
        out
    }

    /// Time reversal for the backward polymer engine: the result's slice at
    /// time `k` is this environment's slice at `time_hi() - 1 - k`, so a
    /// forward chain through the result visits the original slices from the
    /// far end inward. Combined with the include-right convention this
    /// reproduces the original asymmetric energy exactly.
    pub fn reversed(&self) -> Environment {
        let mut slices = self.slices.clone();
        slices.reverse();
        Environment {
            spec: self.spec.clone(),
            grid: self.grid,
            time_lo: 0,
            slices,
            realization: self.realization,
            label: format!("{} reversed", self.label),
        }
    }
}

/// Monte Carlo estimate of `lambda = E exp(-F/(2 kappa))` at a fixed
/// space-time point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Estimate the normalization constant `lambda` by sampling `count`
/// independent realizations of the potential at one point. Deterministic
/// fields (amplitude zero) return the exact value with zero standard error.
pub fn estimate_lambda(spec: &EnvironmentSpec, count: usize) -> Result<LambdaEstimate> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("lambda estimate needs at least one sample".into()));
    }
    // A minimal grid that still satisfies the correlation-range precondition:
    // extent at least twice the range, center node at the evaluation point.
    let r = spec.correlation_range.max(0.25);
    let grid = Grid::new(-2.0 * r, r / 2.0, 9)?;
    let center = grid.nearest_index(0.0);
    let inv = 1.0 / (2.0 * spec.kappa);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for i in 0..count {
        let mut rng = substream(spec.master_seed, StreamPurpose::LambdaSampling, i as u32, 0);
        let slice = match spec.kind {
            GeneratorKind::MovingAverageGaussian => moving_average_slice(spec, grid, &mut rng),
            GeneratorKind::SmoothedShotNoise => shot_noise_slice(spec, grid, &mut rng),
            GeneratorKind::IidCellBump => cell_bump_slice(spec, grid, &mut rng),
        };
        let w = (-(slice[center] + spec.offset) * inv).exp();
        sum += w;
        sumsq += w * w;
    }
    let n = count as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let stderr = if count > 1 { (var / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(LambdaEstimate { mean, stderr, samples: count })
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"PBENVSNP";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    spec: EnvironmentSpec,
    grid: Grid,
    time_lo: i64,
    time_hi: i64,
    realization: u32,
    label: String,
}

impl Environment {
    /// Write the environment to a self-describing binary snapshot:
    /// magic `PBENVSNP`, u32 LE version, u32 LE header length, a JSON header
    /// (spec, grid, time range, realization, label), then one array of
    /// little-endian f64 per slice in time order. Values round-trip bitwise.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            spec: self.spec.clone(),
            grid: self.grid,
            time_lo: self.time_lo,
            time_hi: self.time_hi(),
            realization: self.realization,
            label: self.label.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("snapshot header: {e}")))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for slice in &self.slices {
            for v in slice {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Environment> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Config("not an environment snapshot (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!(
                "unsupported snapshot version {version} (expected {SNAPSHOT_VERSION})"
            )));
        }
        r.read_exact(&mut word)?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: SnapshotHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Config(format!("snapshot header: {e}")))?;
        let slice_count = (header.time_hi - header.time_lo) as usize;
        let mut slices = Vec::with_capacity(slice_count);
        let mut buf = [0u8; 8];
        for _ in 0..slice_count {
            let mut slice = Vec::with_capacity(header.grid.count);
            for _ in 0..header.grid.count {
                r.read_exact(&mut buf)?;
                slice.push(f64::from_le_bytes(buf));
            }
            slices.push(slice);
        }
        Ok(Environment {
            spec: header.spec,
            grid: header.grid,
            time_lo: header.time_lo,
            slices,
            realization: header.realization,
            label: header.label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss_spec(seed: u64) -> EnvironmentSpec {
        EnvironmentSpec {
            kind: GeneratorKind::MovingAverageGaussian,
            amplitude: 1.0,
            correlation_range: 1.0,
            offset: 0.0,
            kappa: 0.5,
            master_seed: seed,
        }
    }

    fn all_kinds(seed: u64) -> Vec<EnvironmentSpec> {
        [
            GeneratorKind::MovingAverageGaussian,
            GeneratorKind::SmoothedShotNoise,
            GeneratorKind::IidCellBump,
        ]
        .into_iter()
        .map(|kind| EnvironmentSpec {
            kind,
            amplitude: 0.8,
            correlation_range: 0.7,
            offset: 0.0,
            kappa: 0.5,
            master_seed: seed,
        })
        .collect()
    }

    #[test]
    fn slices_are_deterministic_and_window_independent() {
        let grid = Grid::symmetric(6.0, 0.1).unwrap();
        for spec in all_kinds(42) {
            let wide = sample_environment(&spec, grid, (-3, 9), 7).unwrap();
            let narrow = sample_environment(&spec, grid, (2, 6), 7).unwrap();
            for t in 2..5 {
                assert_eq!(wide.slice(t).unwrap(), narrow.slice(t).unwrap(), "{:?} t={t}", spec.kind);
            }
            // Same arguments, same bytes.
            let again = sample_environment(&spec, grid, (-3, 9), 7).unwrap();
            assert_eq!(wide, again);
        }
    }

    #[test]
    fn different_realizations_and_times_differ() {
        let grid = Grid::symmetric(4.0, 0.1).unwrap();
        for spec in all_kinds(1) {
            let e = sample_environment(&spec, grid, (0, 3), 0).unwrap();
            let f = sample_environment(&spec, grid, (0, 3), 1).unwrap();
            assert_ne!(e.slice(0).unwrap(), f.slice(0).unwrap());
            assert_ne!(e.slice(0).unwrap(), e.slice(1).unwrap());
        }
    }

    #[test]
    fn amplitude_zero_gives_the_constant_field() {
        let grid = Grid::symmetric(3.0, 0.25).unwrap();
        for mut spec in all_kinds(9) {
            spec.amplitude = 0.0;
            spec.offset = -0.375;
            let e = sample_environment(&spec, grid, (0, 4), 0).unwrap();
            for t in 0..4 {
                assert!(e.slice(t).unwrap().iter().all(|&v| v == -0.375));
            }
        }
    }

    #[test]
    fn fields_are_bounded_or_have_the_right_marginal_scale() {
        let grid = Grid::symmetric(5.0, 0.05).unwrap();
        // Bump generators are bounded by amplitude (cell) or a small multiple
        // of it (overlapping shot bumps).
        for kind in [GeneratorKind::IidCellBump, GeneratorKind::SmoothedShotNoise] {
            let spec = EnvironmentSpec {
                kind,
                amplitude: 0.5,
                correlation_range: 0.8,
                offset: 0.0,
                kappa: 0.5,
                master_seed: 3,
            };
            let e = sample_environment(&spec, grid, (0, 20), 0).unwrap();
            let bound = if kind == GeneratorKind::IidCellBump { 0.5 + 1e-12 } else { 6.0 };
            for t in 0..20 {
                assert!(e.slice(t).unwrap().iter().all(|v| v.abs() <= bound));
            }
        }
        // Gaussian generator: empirical marginal variance over many slices
        // should match amplitude^2.
        let spec = gauss_spec(11);
        let e = sample_environment(&spec, grid, (0, 2000), 0).unwrap();
        let mid = grid.count / 2;
        let vals: Vec<f64> = (0..2000).map(|t| e.slice(t).unwrap()[mid]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.0).abs() < 0.1, "marginal variance {var} far from 1");
    }

    #[test]
    fn gaussian_autocovariance_vanishes_beyond_twice_the_range() {
        let grid = Grid::symmetric(6.0, 0.1).unwrap();
        let spec = gauss_spec(5);
        let n = 10_000;
        let e = sample_environment(&spec, grid, (0, n), 0).unwrap();
        let i = grid.index_at(-3.0).unwrap();
        // Lags beyond 2 * correlation_range = 2.0.
        for lag in [2.3_f64, 3.1, 4.0] {
            let j = grid.index_at(-3.0 + lag).unwrap();
            let mut prods = Vec::with_capacity(n as usize);
            for t in 0..n {
                let s = e.slice(t).unwrap();
                prods.push(s[i] * s[j]);
            }
            let mean = prods.iter().sum::<f64>() / prods.len() as f64;
            let var = prods.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
                / (prods.len() as f64 - 1.0);
            let se = (var / prods.len() as f64).sqrt();
            assert!(
                mean.abs() <= 3.0 * se,
                "autocovariance at lag {lag}: {mean} with se {se}"
            );
        }
        // Within the range it should be clearly positive.
        let j = grid.index_at(-3.0 + 0.2).unwrap();
        let mut acc = 0.0;
        for t in 0..n {
            let s = e.slice(t).unwrap();
            acc += s[i] * s[j];
        }
        assert!(acc / n as f64 > 0.5);
    }

    #[test]
    fn slices_are_independent_across_time() {
        let grid = Grid::symmetric(3.0, 0.25).unwrap();
        for spec in all_kinds(17) {
            let reps = 4000u32;
            let mid = grid.count / 2;
            let mut prods = Vec::with_capacity(reps as usize);
            for r in 0..reps {
                let e = sample_environment(&spec, grid, (0, 2), r).unwrap();
                prods.push(e.slice(0).unwrap()[mid] * e.slice(1).unwrap()[mid]);
            }
            let mean = prods.iter().sum::<f64>() / prods.len() as f64;
            let var = prods.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
                / (prods.len() as f64 - 1.0);
            let se = (var / prods.len() as f64).sqrt().max(1e-12);
            assert!(
                mean.abs() <= 4.0 * se,
                "{:?}: temporal correlation {mean} with se {se}",
                spec.kind
            );
        }
    }

    #[test]
    fn correlation_range_larger_than_half_window_is_rejected() {
        let grid = Grid::symmetric(1.0, 0.1).unwrap();
        let mut spec = gauss_spec(0);
        spec.correlation_range = 1.5;
        assert!(sample_environment(&spec, grid, (0, 2), 0).is_err());
    }

    #[test]
    fn lambda_constant_field_is_exact() {
        let mut spec = gauss_spec(2);
        spec.amplitude = 0.0;
        spec.offset = 0.6;
        let est = estimate_lambda(&spec, 64).unwrap();
        // F = c deterministic: lambda = exp(-c / (2 kappa)) with zero spread.
        assert!((est.mean - (-0.6_f64).exp()).abs() < 1e-15);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn lambda_gaussian_matches_closed_form() {
        // Centered Gaussian marginal, variance sigma^2, kappa = 1/2:
        // E exp(-F) = exp(sigma^2 / 2).
        let spec = EnvironmentSpec {
            kind: GeneratorKind::MovingAverageGaussian,
            amplitude: 0.8,
            correlation_range: 0.5,
            offset: 0.0,
            kappa: 0.5,
            master_seed: 77,
        };
        let est = estimate_lambda(&spec, 200_000).unwrap();
        let expect = (0.8_f64 * 0.8 / 2.0).exp();
        assert!(
            (est.mean - expect).abs() <= 3.0 * est.stderr,
            "lambda {} +- {} vs {}",
            est.mean,
            est.stderr,
            expect
        );
    }

    #[test]
    fn shift_recenters_time_and_space() {
        let grid = Grid::symmetric(4.0, 0.25).unwrap();
        let spec = gauss_spec(23);
        let e = sample_environment(&spec, grid, (-2, 6), 0).unwrap();
        let s = e.shift(3, 0.5).unwrap();
        assert_eq!(s.time_lo(), -5);
        // (theta F)_m(y) = F_{3+m}(0.5 + y) on the shrunken window.
        let j = 2; // 0.5 / 0.25
        for m in -5..0 {
            let orig = e.slice(m + 3).unwrap();
            let got = s.slice(m).unwrap();
            for i in 0..s.grid().count {
                assert_eq!(got[i], orig[i + j]);
            }
        }
        // Forward then backward time shift restores the original exactly.
        let back = e.shift(1, 0.0).unwrap().shift(-1, 0.0).unwrap();
        for t in -2..6 {
            assert_eq!(back.slice(t).unwrap(), e.slice(t).unwrap());
        }
    }

    #[test]
    fn shift_rejects_non_grid_offsets_and_excessive_loss() {
        let grid = Grid::symmetric(2.0, 0.25).unwrap();
        let e = sample_environment(&gauss_spec(4), grid, (0, 2), 0).unwrap();
        assert!(e.shift(0, 0.3).is_err());
        assert!(e.shift(0, 4.0).is_err());
    }

    #[test]
    fn strict_shear_shifts_each_slice_by_v_times_k() {
        let grid = Grid::symmetric(6.0, 0.25).unwrap();
        let spec = gauss_spec(31);
        let e = sample_environment(&spec, grid, (0, 4), 0).unwrap();
        let v = 0.5; // v * k / dx = 2k, always integral
        let sh = e.shear(v, ShearMode::Strict).unwrap();
        for t in 0..4i64 {
            let offset = ((v * t as f64) / 0.25) as usize;
            let orig = e.slice(t).unwrap();
            let got = sh.slice(t).unwrap();
            let base = ((sh.grid().x_min - e.grid().x_min) / 0.25).round() as usize;
            for i in 0..sh.grid().count {
                assert_eq!(got[i], orig[base + i + offset], "t={t} i={i}");
            }
        }
        // Non-multiple offsets are rejected in strict mode.
        assert!(e.shear(0.3, ShearMode::Strict).is_err());
        // ... but interpolated shear accepts them.
        assert!(e.shear(0.3, ShearMode::Interpolate).is_ok());
    }

    #[test]
    fn interpolated_shear_agrees_with_strict_on_grid_multiples() {
        let grid = Grid::symmetric(5.0, 0.25).unwrap();
        let e = sample_environment(&gauss_spec(8), grid, (-2, 3), 0).unwrap();
        let a = e.shear(0.25, ShearMode::Strict).unwrap();
        let b = e.shear(0.25, ShearMode::Interpolate).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reversal_flips_slice_order() {
        let grid = Grid::symmetric(2.0, 0.5).unwrap();
        let e = sample_environment(&gauss_spec(13), grid, (-1, 4), 0).unwrap();
        let r = e.reversed();
        assert_eq!(r.time_lo(), 0);
        assert_eq!(r.time_hi(), 5);
        for k in 0..5i64 {
            assert_eq!(r.slice(k).unwrap(), e.slice(3 - 1 - k + 1).unwrap());
        }
    }

    #[test]
    fn window_extracts_the_sub_range() {
        let grid = Grid::symmetric(2.0, 0.5).unwrap();
        let e = sample_environment(&gauss_spec(19), grid, (-4, 8), 0).unwrap();
        let w = e.window(-1, 5).unwrap();
        assert_eq!(w.time_lo(), -1);
        assert_eq!(w.time_hi(), 5);
        for t in -1..5 {
            assert_eq!(w.slice(t).unwrap(), e.slice(t).unwrap());
        }
        assert!(e.window(-5, 2).is_err());
        assert!(e.window(0, 9).is_err());
    }

    #[test]
    fn snapshot_round_trips_bitwise() {
        let dir = std::env::temp_dir().join(format!("polyburg-snap-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let grid = Grid::symmetric(3.0, 0.1).unwrap();
        for (i, spec) in all_kinds(99).into_iter().enumerate() {
            let e = sample_environment(&spec, grid, (-2, 5), 3).unwrap();
            let path = dir.join(format!("env-{i}.snap"));
            e.write_snapshot(&path).unwrap();
            let back = Environment::read_snapshot(&path).unwrap();
            assert_eq!(e, back);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn substreams_do_not_collide() {
        use rand::RngCore;
        let mut seen = std::collections::HashSet::new();
        for purpose in [StreamPurpose::EnvironmentNoise, StreamPurpose::PathSampling] {
            for r in 0..4u32 {
                for t in -3..3i64 {
                    let mut rng = substream(123, purpose, r, t);
                    let first = (rng.next_u64(), rng.next_u64());
                    assert!(seen.insert(first), "stream collision at {purpose:?} r={r} t={t}");
                }
            }
        }
    }

    #[test]
    fn offset_field_shifts_every_value() {
        let grid = Grid::symmetric(2.0, 0.25).unwrap();
        let e = sample_environment(&gauss_spec(6), grid, (0, 3), 0).unwrap();
        let shifted = e.with_offset(1.25);
        for t in 0..3 {
            for (a, b) in e.slice(t).unwrap().iter().zip(shifted.slice(t).unwrap()) {
                assert_eq!(*b, *a + 1.25);
            }
        }
    }
}
