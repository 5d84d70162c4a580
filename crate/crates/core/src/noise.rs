//! Time grid and seeded Brownian increments.
//!
//! Path `p` draws from its own ChaCha stream selected by `(seed, p)`, so a
//! bundle does not depend on how paths are scheduled across workers.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Uniform grid on [−δ, T] with t_i = i·Δt, i = −k..N.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub delta: f64,
    /// N
    pub steps: usize,
    /// k, with k·Δt = δ
    pub lag: usize,
    pub dt: f64,
}

const ALIGN_TOL: f64 = 1e-9;

impl TimeGrid {
    pub fn new(horizon: f64, delta: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("grid needs at least one step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::range("horizon", format!("T = {horizon}")));
        }
        if !(delta > 0.0 && delta < horizon) {
            return Err(Error::range(
                "delta",
                format!("delta out of range: δ = {delta} must lie in (0, {horizon})"),
            ));
        }
        let dt = horizon / steps as f64;
        let ratio = delta / dt;
        let lag = ratio.round();
        if lag < 1.0 || (ratio - lag).abs() > ALIGN_TOL * ratio.max(1.0) {
            return Err(Error::Alignment(format!(
                "δ = {delta} is not an integer multiple of Δt = {dt}"
            )));
        }
        Ok(TimeGrid {
            horizon,
            delta,
            steps,
            lag: lag as usize,
            dt,
        })
    }

    pub fn time(&self, i: isize) -> f64 {
        i as f64 * self.dt
    }

    /// Grid index of a time in [0, T]; errors if `t` is off-grid.
    pub fn node(&self, t: f64) -> Result<usize> {
        let r = t / self.dt;
        let i = r.round();
        if i < 0.0 || i > self.steps as f64 || (r - i).abs() > ALIGN_TOL * r.abs().max(1.0) {
            return Err(Error::Alignment(format!(
                "t = {t} is not a grid node (Δt = {})",
                self.dt
            )));
        }
        Ok(i as usize)
    }

    /// Number of whole steps in a duration; errors if it is not grid-aligned.
    pub fn steps_in(&self, dur: f64) -> Result<usize> {
        let r = dur / self.dt;
        let i = r.round();
        if i < 0.0 || (r - i).abs() > ALIGN_TOL * r.abs().max(1.0) {
            return Err(Error::Alignment(format!(
                "duration {dur} is not a multiple of Δt = {}",
                self.dt
            )));
        }
        Ok(i as usize)
    }
}

/// Seeded batch of d-dimensional increments ΔW_i ~ N(0, Δt), i = 0..N−1.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianBundle {
    seed: u64,
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    antithetic: bool,
    increments: Vec<f64>,
}

/// Increments of a single path; a pure function of `(seed, path)`.
pub fn path_increments(seed: u64, grid: &TimeGrid, path: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let sd = grid.dt.sqrt();
    (0..grid.steps * dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate(seed: u64, grid: &TimeGrid, paths: usize, dim: usize) -> Result<BrownianBundle> {
    if paths == 0 {
        return Err(Error::Parameter("path count M must be at least 1".into()));
    }
    if dim == 0 {
        return Err(Error::Parameter("Brownian dimension d must be at least 1".into()));
    }
    let chunks: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| path_increments(seed, grid, p, dim))
        .collect();
    Ok(BrownianBundle {
        seed,
        grid: *grid,
        paths,
        dim,
        antithetic: false,
        increments: chunks.concat(),
    })
}

/// `pairs` antithetic pairs: path 2k is path k of [`generate`], path 2k+1 its negation.
pub fn generate_antithetic(seed: u64, grid: &TimeGrid, pairs: usize, dim: usize) -> Result<BrownianBundle> {
    let base = generate(seed, grid, pairs, dim)?;
    let len = grid.steps * dim;
    let mut increments = Vec::with_capacity(2 * base.increments.len());
    for k in 0..pairs {
        let w = base.path(k);
        increments.extend_from_slice(w);
        increments.extend(w.iter().map(|v| -v));
    }
    debug_assert_eq!(increments.len(), 2 * pairs * len);
    Ok(BrownianBundle {
        paths: 2 * pairs,
        antithetic: true,
        increments,
        ..base
    })
}

impl BrownianBundle {
    /// Wraps externally supplied increments (path, step, component order).
    pub fn from_raw(seed: u64, grid: &TimeGrid, paths: usize, dim: usize, increments: Vec<f64>) -> Result<Self> {
        if paths == 0 || dim == 0 {
            return Err(Error::Parameter("bundle needs M ≥ 1 and d ≥ 1".into()));
        }
        let expected = paths * grid.steps * dim;
        if increments.len() != expected {
            return Err(Error::dim("increments", expected, increments.len()));
        }
        Ok(BrownianBundle {
            seed,
            grid: *grid,
            paths,
            dim,
            antithetic: false,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_antithetic(&self) -> bool {
        self.antithetic
    }

    /// Mean and standard error of per-path samples; antithetic pairs are
    /// averaged first so the error reflects the independent units.
    pub fn mean_stderr(&self, xs: &[f64]) -> (f64, f64) {
        if self.antithetic && xs.len() == self.paths {
            let pairs: Vec<f64> = xs.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
            crate::forward::mean_stderr(&pairs)
        } else {
            crate::forward::mean_stderr(xs)
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// All increments of one path, step-major.
    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.grid.steps * self.dim;
        &self.increments[p * len..(p + 1) * len]
    }

    pub fn increment(&self, p: usize, step: usize) -> &[f64] {
        let off = (p * self.grid.steps + step) * self.dim;
        &self.increments[off..off + self.dim]
    }

    /// Identity of the bundle used to enforce common random numbers.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        self.paths.hash(&mut h);
        self.dim.hash(&mut h);
        self.antithetic.hash(&mut h);
        self.grid.steps.hash(&mut h);
        self.grid.dt.to_bits().hash(&mut h);
        let stride = (self.increments.len() / 64).max(1);
        for v in self.increments.iter().step_by(stride) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Checks that the bundle fits a grid and a Brownian dimension.
    pub fn check_against(&self, grid: &TimeGrid, dim: usize) -> Result<()> {
        if self.grid.steps != grid.steps || (self.grid.dt - grid.dt).abs() > 1e-15 {
            return Err(Error::dim("bundle steps", grid.steps, self.grid.steps));
        }
        if self.dim != dim {
            return Err(Error::dim("bundle Brownian dimension", dim, self.dim));
        }
        Ok(())
    }

    /// Little-endian f64 dump in (path, step, component) order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut buf = Vec::with_capacity(self.increments.len() * 8);
        for v in &self.increments {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn dump(&self, path: &Path) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_binary(io::BufWriter::new(f))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    /// z-score of the sample mean per (step, component).
    pub mean_z: Vec<f64>,
    /// z-score of the sample variance; `None` when M = 1.
    pub var_z: Option<Vec<f64>>,
    pub max_abs_mean_z: f64,
    pub max_abs_var_z: Option<f64>,
    pub variance_skipped: bool,
    pub passed: bool,
}

pub fn empirical_moment_check(bundle: &BrownianBundle) -> MomentReport {
    const LIMIT: f64 = 4.0;
    let m = bundle.paths as f64;
    let dt = bundle.grid.dt;
    let cells = bundle.grid.steps * bundle.dim;
    let mut sum = vec![0.0; cells];
    let mut sum2 = vec![0.0; cells];
    for p in 0..bundle.paths {
        for (c, v) in bundle.path(p).iter().enumerate() {
            sum[c] += v;
            sum2[c] += v * v;
        }
    }
    let mean_z: Vec<f64> = sum.iter().map(|s| (s / m) / (dt / m).sqrt()).collect();
    let max_abs_mean_z = mean_z.iter().fold(0.0_f64, |a, z| a.max(z.abs()));
    let (var_z, max_abs_var_z) = if bundle.paths > 1 {
        let z: Vec<f64> = (0..cells)
            .map(|c| {
                let mean = sum[c] / m;
                let var = (sum2[c] - m * mean * mean) / (m - 1.0);
                (var - dt) / (dt * (2.0 / (m - 1.0)).sqrt())
            })
            .collect();
        let mx = z.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        (Some(z), Some(mx))
    } else {
        (None, None)
    };
    let passed = max_abs_mean_z <= LIMIT && max_abs_var_z.is_none_or(|v| v <= LIMIT);
    MomentReport {
        mean_z,
        variance_skipped: var_z.is_none(),
        var_z,
        max_abs_mean_z,
        max_abs_var_z,
        passed,
    }
}
