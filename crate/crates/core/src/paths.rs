//! Time grids, counter-based Brownian increments and path storage.
//!
//! Increments are keyed by `(seed, path, step, component)`: each path reads a
//! ChaCha8 stream selected by its index, positioned at a fixed word offset per
//! step. Any increment can be regenerated in isolation and the values never
//! depend on scheduling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, log, sin, sqrt};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{arg, Result};

/// Uniform grid `t_start + kΔ`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return arg("time grid needs finite t_start < t_end");
        }
        if steps == 0 {
            return arg("time grid needs at least one step");
        }
        Ok(Self {
            t_start,
            t_end,
            steps,
        })
    }

    /// Grid with step as close as possible to `dt` (rounded to a whole count).
    pub fn with_step(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return arg("time step must be positive");
        }
        let steps = libm::round((t_end - t_start) / dt).max(1.0) as usize;
        Self::new(t_start, t_end, steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return arg("refinement factor must be positive");
        }
        Self::new(self.t_start, self.t_end, self.steps * factor)
    }
}

/// Anything that can hand out the increments of path `i` on a grid.
pub trait NoiseSource: Sync {
    fn n_paths(&self) -> usize;
    fn dim(&self) -> usize;
    fn grid(&self) -> TimeGrid;
    /// Writes `steps * dim` increments of path `i`, step-major.
    fn fill_path(&self, i: usize, out: &mut [f64]);
    fn seed(&self) -> Option<u64> {
        None
    }

    fn path_increments(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.grid().steps() * self.dim()];
        self.fill_path(i, &mut v);
        v
    }
}

/// Seeded, lazily generated Brownian increments `ΔW ~ N(0, Δ I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    seed: u64,
    n_paths: usize,
    dim: usize,
    grid: TimeGrid,
    /// Fine steps summed into each reported step (1 unless coarsened).
    substeps: usize,
}

/// Draws a pair of independent standard normals from two 64-bit words.
#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = sqrt(-2.0 * log(u1));
    let th = 2.0 * core::f64::consts::PI * u2;
    (r * cos(th), r * sin(th))
}

impl BrownianEnsemble {
    pub fn generate(seed: u64, n_paths: usize, dim: usize, grid: TimeGrid) -> Result<Self> {
        if n_paths == 0 {
            return arg("ensemble needs at least one path");
        }
        if dim == 0 {
            return arg("Brownian motion needs dimension >= 1");
        }
        Ok(Self {
            seed,
            n_paths,
            dim,
            grid,
            substeps: 1,
        })
    }

    /// The same Brownian paths observed on a grid `factor` times coarser;
    /// each increment is the sum of `factor` consecutive fine increments.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.grid.steps.is_multiple_of(factor) {
            return arg("coarsening factor must divide the step count");
        }
        Ok(Self {
            grid: TimeGrid::new(self.grid.t_start, self.grid.t_end, self.grid.steps / factor)?,
            substeps: self.substeps * factor,
            ..self.clone()
        })
    }

    /// First `n` paths of this ensemble (same increments).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_paths {
            return arg("truncation must keep between 1 and n_paths paths");
        }
        Ok(Self {
            n_paths: n,
            ..self.clone()
        })
    }

    fn pairs(&self) -> usize {
        self.dim.div_ceil(2)
    }

    fn rng_for(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }

    #[inline]
    fn draw_fine(&self, rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64], add: bool) {
        let d = self.dim;
        for p in 0..self.pairs() {
            let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
            let c = 2 * p;
            if add {
                out[c] += scale * z0;
            } else {
                out[c] = scale * z0;
            }
            if c + 1 < d {
                if add {
                    out[c + 1] += scale * z1;
                } else {
                    out[c + 1] = scale * z1;
                }
            }
        }
    }

    /// Increment `k` of path `i`, generated independently of all others.
    pub fn increment(&self, i: usize, k: usize, out: &mut [f64]) {
        let mut rng = self.rng_for(i);
        let words_per_fine = (self.pairs() * 4) as u128;
        rng.set_word_pos(k as u128 * self.substeps as u128 * words_per_fine);
        let scale = sqrt(self.fine_dt());
        for s in 0..self.substeps {
            self.draw_fine(&mut rng, scale, &mut out[..self.dim], s > 0);
        }
    }

    fn fine_dt(&self) -> f64 {
        self.grid.dt() / self.substeps as f64
    }

    /// All increments, path-major (`n_paths * steps * dim`).
    pub fn materialize(&self) -> Vec<f64> {
        let chunk = self.grid.steps * self.dim;
        let mut out = vec![0.0; self.n_paths * chunk];
        crate::par::fill_chunks(&mut out, chunk, |i, c| self.fill_path(i, c));
        out
    }
}

impl NoiseSource for BrownianEnsemble {
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn fill_path(&self, i: usize, out: &mut [f64]) {
        let mut rng = self.rng_for(i);
        let scale = sqrt(self.fine_dt());
        let d = self.dim;
        for k in 0..self.grid.steps {
            let o = &mut out[k * d..(k + 1) * d];
            for s in 0..self.substeps {
                self.draw_fine(&mut rng, scale, o, s > 0);
            }
        }
    }
}

/// Increments held in memory, e.g. replayed from a persisted blob.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredIncrements {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: Option<u64>,
    data: Vec<f64>,
}

impl StoredIncrements {
    pub fn new(
        grid: TimeGrid,
        n_paths: usize,
        dim: usize,
        seed: Option<u64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n_paths * grid.steps() * dim {
            return arg("stored increments do not match n_paths x steps x dim");
        }
        Ok(Self {
            grid,
            n_paths,
            dim,
            seed,
            data,
        })
    }

    pub fn from_noise(noise: &dyn NoiseSource) -> Self {
        let chunk = noise.grid().steps() * noise.dim();
        let mut data = vec![0.0; noise.n_paths() * chunk];
        crate::par::fill_chunks(&mut data, chunk, |i, c| noise.fill_path(i, c));
        Self {
            grid: noise.grid(),
            n_paths: noise.n_paths(),
            dim: noise.dim(),
            seed: noise.seed(),
            data,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl NoiseSource for StoredIncrements {
    fn n_paths(&self) -> usize {
        self.n_paths
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn grid(&self) -> TimeGrid {
        self.grid
    }
    fn seed(&self) -> Option<u64> {
        self.seed
    }
    fn fill_path(&self, i: usize, out: &mut [f64]) {
        let chunk = self.grid.steps() * self.dim;
        out[..chunk].copy_from_slice(&self.data[i * chunk..(i + 1) * chunk]);
    }
}

/// Which grid nodes a [`PathEnsemble`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Full,
    Terminal,
    /// Every `n`-th node plus the terminal node.
    Strided(usize),
}

impl Storage {
    pub fn stored_steps(&self, steps: usize) -> Vec<usize> {
        match *self {
            Storage::Full => (0..=steps).collect(),
            Storage::Terminal => vec![0, steps],
            Storage::Strided(s) => {
                let s = s.max(1);
                let mut v: Vec<usize> = (0..=steps).step_by(s).collect();
                if *v.last().unwrap() != steps {
                    v.push(steps);
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStatus {
    Ok,
    /// Left the blow-up radius at this step; frozen afterwards.
    Exited {
        step: usize,
    },
    /// Produced a non-finite state at this step; frozen at the last finite one.
    NonFinite {
        step: usize,
    },
}

impl PathStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, PathStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub drift: String,
    pub diffusion: String,
    pub seed: Option<u64>,
    pub grid: TimeGrid,
}

/// Simulated states `X[i][k]` at the stored nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub(crate) dim: usize,
    pub(crate) n_paths: usize,
    pub(crate) stored_steps: Vec<usize>,
    /// `n_paths * stored_steps.len() * dim`.
    pub(crate) states: Vec<f64>,
    pub(crate) status: Vec<PathStatus>,
    pub(crate) provenance: Provenance,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn stored_steps(&self) -> &[usize] {
        &self.stored_steps
    }
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
    pub fn status(&self) -> &[PathStatus] {
        &self.status
    }
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn flagged(&self) -> usize {
        self.status.iter().filter(|s| !s.is_ok()).count()
    }

    /// State of path `i` at the `j`-th stored node.
    pub fn state(&self, i: usize, j: usize) -> &[f64] {
        let per = self.stored_steps.len() * self.dim;
        let o = i * per + j * self.dim;
        &self.states[o..o + self.dim]
    }

    /// State of path `i` at grid step `k`, if that node was stored.
    pub fn state_at_step(&self, i: usize, k: usize) -> Option<&[f64]> {
        let j = self.stored_steps.binary_search(&k).ok()?;
        Some(self.state(i, j))
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        self.state(i, self.stored_steps.len() - 1)
    }

    /// Terminal states of all paths, row-major.
    pub fn terminal_states(&self) -> Vec<f64> {
        (0..self.n_paths)
            .flat_map(|i| self.terminal(i).to_vec())
            .collect()
    }
}
