//! Stochastic-Lagrangian Navier-Stokes on the periodic box.
//!
//! The backward system runs particles `X_{t,s}(x)` forward from a start level
//! `t = T + kΔ` to `s = 0` with drift `u` and noise `√(2ν) W`; the velocity
//! at `t` is `P E[∇X_{t,0}ᵀ φ(X_{t,0})]`. Iterating that map from the
//! heat-decayed initial data gives the fixed point. The noise is drawn once
//! and reused by every iterate.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{exp, pow, sqrt};

use crate::defaults::{BLOB_SPACINGS, NON_CONTRACTION_STREAK, NSE_MAX_ITER, NSE_NORM_P, NSE_TOL};
use crate::error::{arg, Error, Result};
use crate::linalg;
use crate::par;
use crate::paths::{BrownianEnsemble, NoiseSource, TimeGrid};
use crate::spectral::{GridField, PeriodicGrid};

/// `K₃(x) h = x × h / (4π |x|³)`.
pub fn k3(x: [f64; 3], h: [f64; 3]) -> [f64; 3] {
    let r = sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
    let c = 1.0 / (4.0 * PI * r * r * r);
    [
        c * (x[1] * h[2] - x[2] * h[1]),
        c * (x[2] * h[0] - x[0] * h[2]),
        c * (x[0] * h[1] - x[1] * h[0]),
    ]
}

/// Planar kernel `K₂(x) = (-x₂, x₁) / (2π |x|²)`.
pub fn k2(x: [f64; 2]) -> [f64; 2] {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let c = 1.0 / (2.0 * PI * r2);
    [-c * x[1], c * x[0]]
}

/// Desingularised free-space Biot-Savart sum over vortex blobs.
///
/// In 2-D each blob carries a scalar circulation and the kernel is
/// `K₂(x)(1 - e^{-|x|²/δ²})`; in 3-D a vector strength and
/// `K₃(x)(1 - e^{-|x|³/δ³})`.
#[derive(Debug, Clone, PartialEq)]
pub struct VortexBlobs {
    dim: usize,
    positions: Vec<f64>,
    strengths: Vec<f64>,
    delta: f64,
}

impl VortexBlobs {
    pub fn new(dim: usize, positions: Vec<f64>, strengths: Vec<f64>, delta: f64) -> Result<Self> {
        let width = match dim {
            2 => 1,
            3 => 3,
            _ => return arg("vortex blobs live in 2-D or 3-D"),
        };
        if !positions.len().is_multiple_of(dim) || strengths.len() != positions.len() / dim * width
        {
            return arg("blob positions and strengths disagree");
        }
        if !(delta > 0.0) {
            return arg("blob radius must be positive");
        }
        Ok(Self {
            dim,
            positions,
            strengths,
            delta,
        })
    }

    /// Blobs at the nodes of a lattice, strength `ω h^d`, radius
    /// [`BLOB_SPACINGS`] spacings. `values` is node-major.
    pub fn from_lattice(
        lower: &[f64],
        spacing: f64,
        shape: &[usize],
        values: &[f64],
    ) -> Result<Self> {
        let d = lower.len();
        if shape.len() != d {
            return arg("lattice shape does not match its origin");
        }
        let n: usize = shape.iter().product();
        let width = if d == 2 { 1 } else { 3 };
        if values.len() != n * width {
            return arg("lattice values do not match its shape");
        }
        let vol = pow(spacing, d as f64);
        let mut positions = Vec::with_capacity(n * d);
        for idx in 0..n {
            let mut rest = idx;
            let mut p = vec![0.0; d];
            for a in (0..d).rev() {
                p[a] = lower[a] + (rest % shape[a]) as f64 * spacing;
                rest /= shape[a];
            }
            positions.extend(p);
        }
        let strengths = values.iter().map(|w| w * vol).collect();
        Self::new(d, positions, strengths, BLOB_SPACINGS * spacing)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn velocity(&self, x: &[f64], out: &mut [f64]) {
        out[..self.dim].iter_mut().for_each(|v| *v = 0.0);
        let n = self.positions.len() / self.dim;
        for b in 0..n {
            let p = &self.positions[b * self.dim..(b + 1) * self.dim];
            if self.dim == 2 {
                let r = [x[0] - p[0], x[1] - p[1]];
                let r2 = r[0] * r[0] + r[1] * r[1];
                if r2 == 0.0 {
                    continue;
                }
                let k = k2(r);
                let s = self.strengths[b] * (1.0 - exp(-r2 / (self.delta * self.delta)));
                out[0] += s * k[0];
                out[1] += s * k[1];
            } else {
                let r = [x[0] - p[0], x[1] - p[1], x[2] - p[2]];
                let rn = sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
                if rn == 0.0 {
                    continue;
                }
                let h = &self.strengths[3 * b..3 * b + 3];
                let k = k3(r, [h[0], h[1], h[2]]);
                let s = 1.0 - exp(-pow(rn / self.delta, 3.0));
                for a in 0..3 {
                    out[a] += s * k[a];
                }
            }
        }
    }
}

/// `‖φ‖_p + ‖∇φ‖_p` on the grid.
pub fn w1p_norm(phi: &GridField, p: f64) -> f64 {
    phi.norm_lp(p) + phi.gradient().norm_lp(p)
}

/// Taylor-Green vortex `(sin x cos y, -cos x sin y)` on `grid`.
pub fn taylor_green(grid: &PeriodicGrid) -> Result<GridField> {
    if grid.dim() != 2 {
        return arg("Taylor-Green data is 2-D");
    }
    Ok(GridField::from_fn(grid, 2, |x, o| {
        o[0] = libm::sin(x[0]) * libm::cos(x[1]);
        o[1] = -libm::cos(x[0]) * libm::sin(x[1]);
    }))
}

/// Monte Carlo controls shared by every evaluation of the operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleParams {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Velocity at the time levels `t_k = T + kΔ`, `k = 0..=M`, with `t_M = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityHistory {
    time: TimeGrid,
    levels: Vec<GridField>,
}

impl VelocityHistory {
    pub fn new(time: TimeGrid, levels: Vec<GridField>) -> Result<Self> {
        if levels.len() != time.steps() + 1 {
            return arg("one velocity field per time level is required");
        }
        let g = levels[0].grid();
        let d = g.dim();
        if levels.iter().any(|f| f.grid() != g || f.components() != d) {
            return arg("velocity levels must share one grid and have d components");
        }
        Ok(Self { time, levels })
    }

    /// `e^{ν|t_k|Δ} φ` at every level.
    pub fn heat_decayed(phi: &GridField, nu: f64, time: TimeGrid) -> Result<Self> {
        let levels = (0..=time.steps())
            .map(|k| phi.heat_decay(nu, time.node(k).abs()))
            .collect();
        Self::new(time, levels)
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }
    pub fn levels(&self) -> &[GridField] {
        &self.levels
    }
    pub fn level(&self, k: usize) -> &GridField {
        &self.levels[k]
    }
    pub fn grid(&self) -> &PeriodicGrid {
        self.levels[0].grid()
    }

    /// `sup_k ‖a_k - b_k‖_p`.
    pub fn distance(&self, other: &VelocityHistory, p: f64) -> Result<f64> {
        if self.levels.len() != other.levels.len() {
            return arg("histories have different time grids");
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.levels.iter().zip(&other.levels) {
            worst = worst.max(a.sub(b)?.norm_lp(p));
        }
        Ok(worst)
    }

    /// Largest spectral divergence over all levels.
    pub fn max_divergence(&self) -> f64 {
        self.levels
            .iter()
            .map(|f| f.max_divergence().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Node-major `[u, ∇u]` per level, the layout the particle loop reads.
    fn packed(&self) -> Vec<Vec<f64>> {
        par::map_indexed(self.levels.len(), |k| {
            let u = &self.levels[k];
            let g = u.gradient();
            let d = u.components();
            let n = u.grid().len();
            let w = d + d * d;
            let mut out = vec![0.0; n * w];
            for idx in 0..n {
                for c in 0..d {
                    out[idx * w + c] = u.component(c)[idx];
                }
                for c in 0..d * d {
                    out[idx * w + d + c] = g.component(c)[idx];
                }
            }
            out
        })
    }
}

/// Particle integrator over a packed velocity history.
struct Tracer<'a> {
    grid: &'a PeriodicGrid,
    packed: Vec<Vec<f64>>,
    noise: &'a [f64],
    steps: usize,
    dt: f64,
    scale: f64,
    inv_h: [f64; 3],
    mask: [usize; 3],
    shape: [usize; 3],
    origin: [f64; 3],
}

impl<'a> Tracer<'a> {
    fn new(b: &'a VelocityHistory, noise: &'a [f64], nu: f64) -> Self {
        let grid = b.grid();
        let mut inv_h = [0.0; 3];
        let mut mask = [0usize; 3];
        let mut shape = [1usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..grid.dim() {
            inv_h[a] = 1.0 / grid.spacing(a);
            shape[a] = grid.shape()[a];
            mask[a] = shape[a] - 1;
            origin[a] = grid.origin()[a];
        }
        Self {
            grid,
            packed: b.packed(),
            noise,
            steps: b.time().steps(),
            dt: b.time().dt(),
            scale: sqrt(2.0 * nu),
            inv_h,
            mask,
            shape,
            origin,
        }
    }

    /// Multilinear interpolation of the packed level `k` at `x`. Grid sizes
    /// are powers of two, so periodic wrapping is a mask.
    #[inline(always)]
    fn sample<const D: usize>(&self, k: usize, x: &[f64; 3], out: &mut [f64; 12]) {
        let w = D + D * D;
        let data = &self.packed[k];
        let shape = &self.shape;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..D {
            let s = (x[a] - self.origin[a]) * self.inv_h[a];
            let mut i = s as i64;
            if (i as f64) > s {
                i -= 1;
            }
            base[a] = (i as usize) & self.mask[a];
            frac[a] = s - i as f64;
        }
        *out = [0.0; 12];
        for corner in 0..(1usize << D) {
            let mut wt = 1.0;
            let mut idx = 0;
            for a in 0..D {
                let bit = (corner >> a) & 1;
                wt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * shape[a] + ((base[a] + bit) & self.mask[a]);
            }
            let row = &data[idx * w..(idx + 1) * w];
            for c in 0..w {
                out[c] += wt * row[c];
            }
        }
    }

    #[inline(always)]
    fn trace_dim<const D: usize>(
        &self,
        k0: usize,
        i: usize,
        jac: bool,
        x: &mut [f64; 3],
        j: &mut [f64; 9],
    ) {
        let incs = &self.noise[i * self.steps * D..(i + 1) * self.steps * D];
        let mut s = [0.0; 12];
        let mut jn = [0.0; 9];
        for k in k0..self.steps {
            self.sample::<D>(k, x, &mut s);
            if jac {
                for r in 0..D {
                    for c in 0..D {
                        let mut acc = 0.0;
                        for m in 0..D {
                            acc += s[D + r * D + m] * j[m * D + c];
                        }
                        jn[r * D + c] = j[r * D + c] + acc * self.dt;
                    }
                }
                j[..D * D].copy_from_slice(&jn[..D * D]);
            }
            for r in 0..D {
                x[r] += s[r] * self.dt + self.scale * incs[k * D + r];
            }
        }
    }

    /// Hand-unrolled 2-D version of [`Self::trace_dim`] advancing `LANES`
    /// consecutive paths together. The step is latency-bound, so independent
    /// lanes keep the pipeline busy. This is the hot loop of the solver.
    fn trace_planar<const LANES: usize>(
        &self,
        k0: usize,
        first: usize,
        jac: bool,
        x: &mut [[f64; 3]; LANES],
        j: &mut [[f64; 9]; LANES],
    ) {
        let stride = self.steps * 2;
        let ny = self.shape[1];
        let (mx, my) = (self.mask[0], self.mask[1]);
        let (dt, sc) = (self.dt, self.scale);
        for k in k0..self.steps {
            let data = &self.packed[k];
            for l in 0..LANES {
                let s0 = (x[l][0] - self.origin[0]) * self.inv_h[0];
                let s1 = (x[l][1] - self.origin[1]) * self.inv_h[1];
                let mut i0 = s0 as i64;
                if (i0 as f64) > s0 {
                    i0 -= 1;
                }
                let mut i1 = s1 as i64;
                if (i1 as f64) > s1 {
                    i1 -= 1;
                }
                let f0 = s0 - i0 as f64;
                let f1 = s1 - i1 as f64;
                let a0 = (i0 as usize) & mx;
                let a1 = (i1 as usize) & my;
                let b0 = (a0 + 1) & mx;
                let b1 = (a1 + 1) & my;
                let w = [
                    (1.0 - f0) * (1.0 - f1),
                    (1.0 - f0) * f1,
                    f0 * (1.0 - f1),
                    f0 * f1,
                ];
                let rows = [a0 * ny + a1, a0 * ny + b1, b0 * ny + a1, b0 * ny + b1];
                let mut v = [0.0; 6];
                for c in 0..4 {
                    let r = &data[rows[c] * 6..rows[c] * 6 + 6];
                    for m in 0..6 {
                        v[m] += w[c] * r[m];
                    }
                }
                if jac {
                    let q = &mut j[l];
                    let n00 = q[0] + (v[2] * q[0] + v[3] * q[2]) * dt;
                    let n01 = q[1] + (v[2] * q[1] + v[3] * q[3]) * dt;
                    let n10 = q[2] + (v[4] * q[0] + v[5] * q[2]) * dt;
                    let n11 = q[3] + (v[4] * q[1] + v[5] * q[3]) * dt;
                    q[..4].copy_from_slice(&[n00, n01, n10, n11]);
                }
                let dw = (first + l) * stride + 2 * k;
                x[l][0] += v[0] * dt + sc * self.noise[dw];
                x[l][1] += v[1] * dt + sc * self.noise[dw + 1];
            }
        }
    }

    /// Traces paths `first..first + LANES` from `x0` at level `k0`; see
    /// [`Self::trace`].
    fn trace_lanes<const LANES: usize>(
        &self,
        k0: usize,
        x0: &[f64],
        first: usize,
        jac: bool,
        x: &mut [[f64; 3]; LANES],
        j: &mut [[f64; 9]; LANES],
    ) {
        let d = self.grid.dim();
        for l in 0..LANES {
            x[l][..d].copy_from_slice(x0);
            j[l] = [0.0; 9];
            for a in 0..d {
                j[l][a * d + a] = 1.0;
            }
        }
        if d == 2 {
            self.trace_planar::<LANES>(k0, first, jac, x, j);
        } else {
            for l in 0..LANES {
                self.trace_dim::<3>(k0, first + l, jac, &mut x[l], &mut j[l]);
            }
        }
    }

    /// Runs every path from `x0` at level `k0` to time 0 and hands
    /// `(X_{t,0}, ∇X_{t,0})` of each, in path order, to `visit`.
    fn for_each_path(
        &self,
        k0: usize,
        x0: &[f64],
        n_paths: usize,
        jac: bool,
        mut visit: impl FnMut(&[f64; 3], &[f64; 9]),
    ) {
        const LANES: usize = 4;
        let mut x = [[0.0; 3]; LANES];
        let mut j = [[0.0; 9]; LANES];
        let full = n_paths / LANES * LANES;
        for first in (0..full).step_by(LANES) {
            self.trace_lanes::<LANES>(k0, x0, first, jac, &mut x, &mut j);
            for l in 0..LANES {
                visit(&x[l], &j[l]);
            }
        }
        let mut x1 = [[0.0; 3]; 1];
        let mut j1 = [[0.0; 9]; 1];
        for i in full..n_paths {
            self.trace_lanes::<1>(k0, x0, i, jac, &mut x1, &mut j1);
            visit(&x1[0], &j1[0]);
        }
    }
}

fn check_noise(history: &VelocityHistory, noise: &dyn NoiseSource) -> Result<()> {
    let g = noise.grid();
    let t = history.time();
    let d = history.grid().dim();
    if noise.dim() != d
        || g.steps() != t.steps()
        || (g.dt() - t.dt()).abs() > 1e-12 * t.dt().max(1.0)
    {
        return arg("noise grid or dimension does not match the velocity history");
    }
    Ok(())
}

fn check_phi(history: &VelocityHistory, phi: &GridField) -> Result<()> {
    if phi.grid() != history.grid() || phi.components() != history.grid().dim() {
        return arg("initial data must live on the velocity grid");
    }
    Ok(())
}

/// Unprojected `E[∇X_{t_k,0}ᵀ φ(X_{t_k,0})]` at every node of level `k`.
fn raw_pushforward(tracer: &Tracer<'_>, phi: &GridField, k: usize, n_paths: usize) -> GridField {
    let grid = tracer.grid;
    let d = grid.dim();
    let n = grid.len();
    let sums: Vec<[f64; 3]> = par::map_indexed(n, |idx| {
        let mut x0 = [0.0; 3];
        grid.position(idx, &mut x0);
        let mut f = [0.0; 3];
        let mut acc = [0.0; 3];
        tracer.for_each_path(k, &x0[..d], n_paths, true, |x, j| {
            phi.interpolate_cubic(&x[..d], &mut f);
            for c in 0..d {
                acc[c] += (0..d).map(|r| j[r * d + c] * f[r]).sum::<f64>();
            }
        });
        acc
    });
    let mut values = vec![0.0; d * n];
    for (idx, s) in sums.iter().enumerate() {
        for c in 0..d {
            values[c * n + idx] = s[c] / n_paths as f64;
        }
    }
    GridField::new(grid.clone(), d, values).expect("shape is consistent")
}

/// `𝕋(b)_{t_k}`: the projected pushforward of `φ` at level `k`.
pub fn pushforward_velocity(
    b: &VelocityHistory,
    phi: &GridField,
    nu: f64,
    k: usize,
    noise: &dyn NoiseSource,
) -> Result<GridField> {
    check_phi(b, phi)?;
    check_noise(b, noise)?;
    if k > b.time().steps() {
        return arg("time level out of range");
    }
    let data = materialize(noise);
    let tracer = Tracer::new(b, &data, nu);
    raw_pushforward(&tracer, phi, k, noise.n_paths()).leray_project()
}

fn materialize(noise: &dyn NoiseSource) -> Vec<f64> {
    let chunk = noise.grid().steps() * noise.dim();
    let mut out = vec![0.0; noise.n_paths() * chunk];
    par::fill_chunks(&mut out, chunk, |i, c| noise.fill_path(i, c));
    out
}

/// `𝕋(b)` at every level, on pre-materialised noise.
fn apply_operator(
    b: &VelocityHistory,
    phi: &GridField,
    nu: f64,
    data: &[f64],
    n_paths: usize,
) -> Result<VelocityHistory> {
    let tracer = Tracer::new(b, data, nu);
    let m = b.time().steps();
    let mut levels = Vec::with_capacity(m + 1);
    for k in 0..m {
        levels.push(raw_pushforward(&tracer, phi, k, n_paths).leray_project()?);
    }
    levels.push(phi.leray_project()?);
    VelocityHistory::new(*b.time(), levels)
}

/// Stopping rule of [`fixed_point_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsOptions {
    /// Stop once the distance falls below `tol * ‖φ‖_p`.
    pub tol: f64,
    pub max_iter: usize,
    /// Exponent of the distance and of the recorded `W^{1,p}` norm.
    pub p: f64,
}

impl Default for NsOptions {
    fn default() -> Self {
        Self {
            tol: NSE_TOL,
            max_iter: NSE_MAX_ITER,
            p: NSE_NORM_P,
        }
    }
}

/// Fixed point of the velocity operator and its iteration record.
#[derive(Debug, Clone)]
pub struct NsState {
    pub velocity: VelocityHistory,
    /// `u^{(0)}, u^{(1)}, …` including the returned one.
    pub iterates: Vec<VelocityHistory>,
    /// `sup_t ‖u^{(m+1)} - u^{(m)}‖_p`.
    pub distances: Vec<f64>,
    pub phi: GridField,
    pub phi_w1p: f64,
    pub nu: f64,
    pub params: EnsembleParams,
    pub converged: bool,
}

impl NsState {
    pub fn horizon(&self) -> f64 {
        self.velocity.time().t_start()
    }
    /// Ratios of successive distances.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.distances.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Iterates `u ← 𝕋(u)` on `[horizon, 0]` from the heat-decayed data, with one
/// Brownian ensemble shared by every iterate.
pub fn fixed_point_solve(
    phi: &GridField,
    nu: f64,
    horizon: f64,
    params: EnsembleParams,
    opts: NsOptions,
) -> Result<NsState> {
    let d = phi.grid().dim();
    if !(2..=3).contains(&d) || phi.components() != d {
        return arg("initial data must be a 2-D or 3-D vector field");
    }
    if !(horizon < 0.0) {
        return arg("the horizon T must be negative");
    }
    if !(nu > 0.0) {
        return arg("viscosity must be positive");
    }
    if params.n_paths == 0 {
        return arg("ensemble needs at least one path");
    }
    if phi.max_divergence()? > 1e-6 * phi.max_abs().max(1.0) {
        return arg("initial data must be divergence-free");
    }
    let time = TimeGrid::with_step(horizon, 0.0, params.dt)?;
    let noise = BrownianEnsemble::generate(params.seed, params.n_paths, d, time)?;
    let data = materialize(&noise);
    let scale = phi.norm_lp(opts.p);

    let mut u = VelocityHistory::heat_decayed(phi, nu, time)?;
    let mut iterates = vec![u.clone()];
    let mut distances: Vec<f64> = Vec::new();
    let mut stalled = 0;
    let mut converged = false;
    for it in 0..opts.max_iter {
        let next = apply_operator(&u, phi, nu, &data, params.n_paths)?;
        let dist = next.distance(&u, opts.p)?;
        if let Some(&prev) = distances.last() {
            stalled = if dist >= prev { stalled + 1 } else { 0 };
        }
        distances.push(dist);
        u = next;
        iterates.push(u.clone());
        if dist <= opts.tol * scale {
            converged = true;
            break;
        }
        if stalled >= NON_CONTRACTION_STREAK {
            return Err(Error::HorizonTooLong {
                horizon,
                suggested: 0.5 * horizon,
                iteration: it + 1,
            });
        }
    }
    Ok(NsState {
        velocity: u,
        iterates,
        distances,
        phi_w1p: w1p_norm(phi, opts.p),
        phi: phi.clone(),
        nu,
        params,
        converged,
    })
}

/// Vorticity at level `k` from the label map `X_{t_k,0}`.
///
/// 2-D: `E[ω₀(X_{t,0}(x))]` for scalar `ω₀`. 3-D: `E[(∇X_{t,0})^{-1} ω₀(X_{t,0})]`,
/// which inverts a matrix per path and is meant for small grids.
pub fn vorticity_representation(
    b: &VelocityHistory,
    omega0: &GridField,
    nu: f64,
    k: usize,
    noise: &dyn NoiseSource,
) -> Result<GridField> {
    check_noise(b, noise)?;
    let grid = b.grid();
    let d = grid.dim();
    let width = if d == 2 { 1 } else { 3 };
    if omega0.grid() != grid || omega0.components() != width {
        return arg("ω₀ must be scalar in 2-D or a 3-vector in 3-D, on the velocity grid");
    }
    if k > b.time().steps() {
        return arg("time level out of range");
    }
    let data = materialize(noise);
    let tracer = Tracer::new(b, &data, nu);
    let n = grid.len();
    let n_paths = noise.n_paths();
    let sums: Vec<[f64; 3]> = par::map_indexed(n, |idx| {
        let mut x0 = [0.0; 3];
        grid.position(idx, &mut x0);
        let mut w = [0.0; 3];
        let mut acc = [0.0; 3];
        tracer.for_each_path(k, &x0[..d], n_paths, d == 3, |x, j| {
            omega0.interpolate_cubic(&x[..d], &mut w);
            if d == 2 {
                acc[0] += w[0];
            } else {
                let inv = linalg::inverse(&j[..9], 3).unwrap_or_else(|| vec![f64::NAN; 9]);
                for r in 0..3 {
                    acc[r] += (0..3).map(|c| inv[r * 3 + c] * w[c]).sum::<f64>();
                }
            }
        });
        acc
    });
    let mut values = vec![0.0; width * n];
    for (idx, s) in sums.iter().enumerate() {
        for c in 0..width {
            values[c * n + idx] = s[c] / n_paths as f64;
        }
    }
    GridField::new(grid.clone(), width, values)
}
