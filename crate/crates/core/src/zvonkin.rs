//! Zvonkin transform for constant-in-space diffusion.
//!
//! The corrector `u` solves the backward system
//! `∂_t u + ½ σσ^T : ∇²u + b·∇u + b = 0`, `u(s₀) = 0` on a periodic box,
//! by Picard iteration on its Duhamel form. Heat propagation is a Gaussian
//! filter applied mode by mode, so the only discretisation in time is the
//! trapezoid rule of the Duhamel integral.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, floor, sqrt};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::defaults::{NON_CONTRACTION_STREAK, PICARD_MAX_ITER, PICARD_TOL};
use crate::error::{arg, Error, Result};
use crate::fields::{DiffusionSpec, DriftSpec};
use crate::linalg;
use crate::par;
use crate::paths::NoiseSource;
use crate::solver::{check_system, StartPoints};
use crate::spectral::{GridField, PeriodicGrid};

/// Gaussian convolution `𝒯_{t,s} f` with covariance `∫_t^s σσ^T dr`.
pub fn heat_propagate(f: &GridField, t: f64, s: f64, sigma: &DiffusionSpec) -> Result<GridField> {
    if !(s > t) {
        return arg("heat propagation needs s > t");
    }
    if sigma.dim() != f.grid().dim() {
        return arg("diffusion and grid dimensions differ");
    }
    let cov = sigma.covariance_integral(t, s)?;
    f.gaussian_filter(&cov)
}

/// Space-time discretisation of the corrector problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorGrid {
    pub space: PeriodicGrid,
    pub time_steps: usize,
}

/// Picard controls; defaults follow [`crate::defaults`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: PICARD_TOL,
            max_iter: PICARD_MAX_ITER,
        }
    }
}

/// Corrector `u` on `[t₀, s₀]` and the map `Φ_t(x) = x + u(t, x)`.
#[derive(Clone)]
pub struct ZvonkinSolution {
    grid: PeriodicGrid,
    times: Vec<f64>,
    corrector: Vec<GridField>,
    jacobian: Vec<GridField>,
    drift: DriftSpec,
    diffusion: DiffusionSpec,
    iterations: usize,
    gaps: Vec<f64>,
    converged: bool,
    residual: f64,
    lipschitz: f64,
}

impl core::fmt::Debug for ZvonkinSolution {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ZvonkinSolution")
            .field("interval", &self.interval())
            .field("iterations", &self.iterations)
            .field("converged", &self.converged)
            .field("residual", &self.residual)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl ZvonkinSolution {
    pub fn interval(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }
    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    /// Corrector at time node `j`.
    pub fn corrector(&self, j: usize) -> &GridField {
        &self.corrector[j]
    }
    /// `∇u` at time node `j`; component `i*d + m` is `∂_m u_i`.
    pub fn corrector_gradient(&self, j: usize) -> &GridField {
        &self.jacobian[j]
    }
    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }
    pub fn diffusion(&self) -> &DiffusionSpec {
        &self.diffusion
    }
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    /// Sup-norm gap between successive Picard iterates.
    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }
    pub fn converged(&self) -> bool {
        self.converged
    }
    /// Sup over interior nodes of the finite-difference PDE residual.
    pub fn residual(&self) -> f64 {
        self.residual
    }
    /// `sup_t sup_x ‖∇u(t, x)‖`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Whether `x` lies in the (unwrapped) box of the PDE grid.
    pub fn contains(&self, x: &[f64]) -> bool {
        let o = self.grid.origin();
        let l = self.grid.length();
        x.iter().zip(o).all(|(&xi, &oi)| xi >= oi && xi < oi + l)
    }

    fn blend(&self, t: f64, fields: &[GridField], x: &[f64], out: &mut [f64]) {
        let (t0, s0) = self.interval();
        let nt = self.times.len() - 1;
        let h = (s0 - t0) / nt as f64;
        let s = ((t - t0) / h).clamp(0.0, nt as f64);
        let j = (floor(s) as usize).min(nt - 1);
        let w = s - j as f64;
        let c = fields[0].components();
        let mut a = [0.0; 9];
        let mut b = [0.0; 9];
        fields[j].interpolate_cubic(x, &mut a);
        fields[j + 1].interpolate_cubic(x, &mut b);
        for i in 0..c {
            out[i] = (1.0 - w) * a[i] + w * b[i];
        }
    }

    /// `u(t, x)`: cubic in space, linear in time.
    pub fn u(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.blend(t, &self.corrector, x, out);
    }

    /// `Φ_t(x) = x + u(t, x)`.
    pub fn phi(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.u(t, x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    }

    /// `∇Φ_t(x) = I + ∇u(t, x)`, row-major.
    pub fn phi_gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        self.blend(t, &self.jacobian, x, out);
        for i in 0..d {
            out[i * d + i] += 1.0;
        }
    }
}

fn sup_gap(a: &[GridField], b: &[GridField]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Solves the corrector on `[t0, s0]` by Picard iteration.
///
/// Fails with [`Error::IntervalTooLong`] when the gap grows three times in a
/// row and with [`Error::LipschitzTooLarge`] when `sup ‖∇u‖ > 1/2`.
pub fn solve_corrector(
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    t0: f64,
    s0: f64,
    grid: &CorrectorGrid,
    opts: PicardOptions,
) -> Result<ZvonkinSolution> {
    let space = &grid.space;
    let d = space.dim();
    if b.dim() != d || sigma.dim() != d {
        return arg("drift, diffusion and grid dimensions differ");
    }
    if !sigma.constant_in_x() {
        return arg("the corrector solver needs σ constant in x");
    }
    if !(s0 > t0) {
        return arg("corrector interval needs s0 > t0");
    }
    if grid.time_steps < 2 {
        return arg("corrector needs at least two time steps");
    }
    let nt = grid.time_steps;
    let h = (s0 - t0) / nt as f64;
    let times: Vec<f64> = (0..=nt)
        .map(|j| if j == nt { s0 } else { t0 + j as f64 * h })
        .collect();
    let n = space.len();

    let drift: Vec<GridField> = times
        .iter()
        .map(|&t| GridField::from_fn(space, d, |x, o| b.eval(t, x, o)))
        .collect();
    for (j, f) in drift.iter().enumerate() {
        if f.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: b.label().into(),
                t: times[j],
            });
        }
    }

    // q[j][k] = kᵀ A(t0, t_j) k so that A(t_j, t_l) = A(t0, t_l) - A(t0, t_j)
    let mut q = vec![vec![0.0; n]; nt + 1];
    for j in 1..=nt {
        let cov = sigma.covariance_integral(t0, times[j])?;
        space.for_each_mode(|idx, k, _| {
            let mut s = 0.0;
            for a in 0..d {
                for c in 0..d {
                    s += k[a] * cov[a * d + c] * k[c];
                }
            }
            q[j][idx] = s;
        });
    }

    let mut u: Vec<GridField> = (0..=nt).map(|_| GridField::zeros(space, d)).collect();
    let mut gaps = Vec::new();
    let mut converged = false;
    let mut growing = 0;
    for it in 0..opts.max_iter {
        let sources: Vec<Vec<Vec<Complex64>>> = par::map_indexed(nt + 1, |l| {
            let grad = u[l].gradient();
            let bl = &drift[l];
            let mut g = bl.clone();
            let gv = g.values_mut();
            for i in 0..d {
                for m in 0..d {
                    let gu = grad.component(i * d + m);
                    let bm = bl.component(m);
                    for idx in 0..n {
                        gv[i * n + idx] += bm[idx] * gu[idx];
                    }
                }
            }
            g.spectra()
        });
        let next: Vec<GridField> = par::map_indexed(nt + 1, |j| {
            let mut acc = vec![vec![Complex64::new(0.0, 0.0); n]; d];
            for l in (j..=nt).filter(|_| j < nt) {
                let w = if l == j || l == nt { 0.5 * h } else { h };
                for idx in 0..n {
                    let m = w * exp(-0.5 * (q[l][idx] - q[j][idx]));
                    for c in 0..d {
                        acc[c][idx] += sources[l][c][idx] * m;
                    }
                }
            }
            GridField::from_spectra(space, acc)
        });
        let gap = sup_gap(&next, &u);
        u = next;
        if let Some(&prev) = gaps.last() {
            growing = if gap > prev { growing + 1 } else { 0 };
        }
        gaps.push(gap);
        if gap < opts.tol {
            converged = true;
            break;
        }
        if growing >= NON_CONTRACTION_STREAK {
            return Err(Error::IntervalTooLong {
                start: t0,
                end: s0,
                iterations: it + 1,
                last_gap: gap,
            });
        }
    }

    let jacobian: Vec<GridField> = par::map_indexed(nt + 1, |j| u[j].gradient());
    let mut lipschitz: f64 = 0.0;
    let mut m = vec![0.0; d * d];
    for g in &jacobian {
        for idx in 0..n {
            g.node(idx, &mut m);
            lipschitz = lipschitz.max(linalg::spectral_norm(&m, d));
        }
    }
    if lipschitz > 0.5 {
        return Err(Error::LipschitzTooLarge {
            start: t0,
            end: s0,
            lipschitz,
        });
    }
    let residual = pde_residual(&u, &drift, sigma, &times)?;
    Ok(ZvonkinSolution {
        grid: space.clone(),
        times,
        corrector: u,
        jacobian,
        drift: b.clone(),
        diffusion: sigma.clone(),
        iterations: gaps.len(),
        gaps,
        converged,
        residual,
        lipschitz,
    })
}

/// Retries on `[s0 - (s0 - t0)/2^k, s0]` until the iteration contracts and
/// the Lipschitz bound holds, for at most `max_halvings` halvings.
pub fn solve_corrector_adaptive(
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    t0: f64,
    s0: f64,
    grid: &CorrectorGrid,
    opts: PicardOptions,
    max_halvings: usize,
) -> Result<ZvonkinSolution> {
    let mut start = t0;
    let mut tries = 0;
    loop {
        match solve_corrector(b, sigma, start, s0, grid, opts) {
            Err(Error::IntervalTooLong { .. }) | Err(Error::LipschitzTooLarge { .. })
                if tries < max_halvings =>
            {
                start = s0 - 0.5 * (s0 - start);
                tries += 1;
            }
            other => return other,
        }
    }
}

/// Fourth-order periodic central differences along `axis`.
fn axis_derivatives(f: &[f64], grid: &PeriodicGrid, axis: usize, idx: usize) -> (f64, f64) {
    let shape = grid.shape();
    let stride: usize = shape[axis + 1..].iter().product();
    let n = shape[axis] as i64;
    let pos = ((idx / stride) % shape[axis]) as i64;
    let at = |o: i64| {
        let p = (pos + o).rem_euclid(n);
        f[(idx as i64 + (p - pos) * stride as i64) as usize]
    };
    let hx = grid.spacing(axis);
    let d1 = (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * hx);
    let d2 = (-at(-2) + 16.0 * at(-1) - 30.0 * at(0) + 16.0 * at(1) - at(2)) / (12.0 * hx * hx);
    (d1, d2)
}

fn mixed_derivative(f: &[f64], grid: &PeriodicGrid, a: usize, c: usize, idx: usize) -> f64 {
    let shape = grid.shape();
    let mut mi = [0usize; 3];
    grid.multi_index(idx, &mut mi);
    let flat = |da: i64, dc: i64| {
        let mut m = mi;
        m[a] = (m[a] as i64 + da).rem_euclid(shape[a] as i64) as usize;
        m[c] = (m[c] as i64 + dc).rem_euclid(shape[c] as i64) as usize;
        let mut k = 0;
        for (ax, &s) in shape.iter().enumerate() {
            k = k * s + m[ax];
        }
        f[k]
    };
    (flat(1, 1) - flat(1, -1) - flat(-1, 1) + flat(-1, -1))
        / (4.0 * grid.spacing(a) * grid.spacing(c))
}

/// Sup over interior time nodes of the finite-difference PDE residual.
fn pde_residual(
    u: &[GridField],
    drift: &[GridField],
    sigma: &DiffusionSpec,
    times: &[f64],
) -> Result<f64> {
    let nt = times.len() - 1;
    let grid = u[0].grid();
    let d = grid.dim();
    let n = grid.len();
    let zero = vec![0.0; d];
    let per_time = par::map_indexed(nt.saturating_sub(1), |jj| {
        let j = jj + 1;
        let mut s = vec![0.0; d * d];
        sigma.eval(times[j], &zero, &mut s);
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            for c in 0..d {
                cov[a * d + c] = (0..d).map(|l| s[a * d + l] * s[c * d + l]).sum();
            }
        }
        let dt = times[j + 1] - times[j - 1];
        let mut worst: f64 = 0.0;
        for i in 0..d {
            let cur = u[j].component(i);
            let up = u[j + 1].component(i);
            let down = u[j - 1].component(i);
            for idx in 0..n {
                let mut r = (up[idx] - down[idx]) / dt + drift[j].component(i)[idx];
                for a in 0..d {
                    let (d1, d2) = axis_derivatives(cur, grid, a, idx);
                    r += drift[j].component(a)[idx] * d1 + 0.5 * cov[a * d + a] * d2;
                    for c in 0..d {
                        if c != a {
                            r += 0.5 * cov[a * d + c] * mixed_derivative(cur, grid, a, c, idx);
                        }
                    }
                }
                worst = worst.max(r.abs());
            }
        }
        worst
    });
    Ok(per_time.into_iter().fold(0.0, f64::max))
}

/// One pair `(t, x, y)` for [`bilipschitz_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Extremes of `|Φ_t(x) - Φ_t(y)| / |x - y|` over the samples.
pub fn bilipschitz_check(sol: &ZvonkinSolution, pairs: &[PairSample]) -> (f64, f64) {
    let d = sol.grid.dim();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut px = vec![0.0; d];
    let mut py = vec![0.0; d];
    for p in pairs {
        let dx = linalg::norm(&p.x.iter().zip(&p.y).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dx == 0.0 {
            continue;
        }
        sol.phi(p.t, &p.x, &mut px);
        sol.phi(p.t, &p.y, &mut py);
        let dp = linalg::norm(&px.iter().zip(&py).map(|(a, b)| a - b).collect::<Vec<_>>());
        lo = lo.min(dp / dx);
        hi = hi.max(dp / dx);
    }
    (lo, hi)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seeded pairs in the middle half of the box, separations log-uniform
/// between `1e-3` and a quarter of the box.
pub fn sample_pairs(sol: &ZvonkinSolution, n: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sol.grid.dim();
    let (t0, s0) = sol.interval();
    let l = sol.grid.length();
    let o = sol.grid.origin().to_vec();
    (0..n)
        .map(|_| {
            let t = t0 + (s0 - t0) * uniform(&mut rng);
            let x: Vec<f64> = (0..d)
                .map(|a| o[a] + l * (0.25 + 0.5 * uniform(&mut rng)))
                .collect();
            let r = 1e-3 * exp(uniform(&mut rng) * libm::log(0.25 * l / 1e-3));
            let mut dir: Vec<f64> = (0..d).map(|_| uniform(&mut rng) - 0.5).collect();
            let norm = linalg::norm(&dir).max(1e-12);
            dir.iter_mut().for_each(|v| *v *= r / norm);
            let y = x.iter().zip(&dir).map(|(a, b)| a + b).collect();
            PairSample { t, x, y }
        })
        .collect()
}

/// Binning for [`drift_removal_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRemovalOptions {
    /// Bins per axis.
    pub bins: usize,
    /// Bins with fewer samples are ignored.
    pub min_count: usize,
    /// Binned region; defaults to the PDE box.
    pub region: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for DriftRemovalOptions {
    fn default() -> Self {
        Self {
            bins: crate::defaults::DRIFT_BINS,
            min_count: crate::defaults::DRIFT_MIN_COUNT,
            region: None,
        }
    }
}

/// Sup-bin empirical drifts of `X` and `Y = Φ(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftRemoval {
    pub drift_x: f64,
    pub drift_x_se: f64,
    pub drift_y: f64,
    pub drift_y_se: f64,
    /// `drift_y / drift_x`.
    pub reduction: f64,
    pub n_flagged: usize,
    pub bins_used: usize,
}

#[derive(Clone)]
struct Bin {
    count: f64,
    x: [f64; 3],
    x2: [f64; 3],
    y: [f64; 3],
    y2: [f64; 3],
}

impl Bin {
    const EMPTY: Bin = Bin {
        count: 0.0,
        x: [0.0; 3],
        x2: [0.0; 3],
        y: [0.0; 3],
        y2: [0.0; 3],
    };

    fn merge(&mut self, o: &Bin) {
        self.count += o.count;
        for c in 0..3 {
            self.x[c] += o.x[c];
            self.x2[c] += o.x2[c];
            self.y[c] += o.y[c];
            self.y2[c] += o.y2[c];
        }
    }

    fn magnitude(&self, s: &[f64; 3], s2: &[f64; 3], d: usize) -> (f64, f64) {
        let n = self.count;
        let mut m2 = 0.0;
        let mut v = 0.0;
        for c in 0..d {
            let m = s[c] / n;
            m2 += m * m;
            v += ((s2[c] / n - m * m).max(0.0)) * n / (n - 1.0) / n;
        }
        (sqrt(m2), sqrt(v))
    }
}

/// Simulates `X` under the solution's drift and diffusion on `noise`, then
/// bins per-step drift estimates of `X` and of `Y = Φ(X)` over state space.
///
/// The drift of `Y` is estimated as `(ΔY - ∇Φ(X_k) σ ΔW_k) / Δ`, which
/// removes the martingale part exactly and leaves the drift plus a small
/// second-order term. Paths leaving the PDE box are excluded.
pub fn drift_removal_check(
    sol: &ZvonkinSolution,
    start: StartPoints<'_>,
    noise: &dyn NoiseSource,
    opts: &DriftRemovalOptions,
) -> Result<DriftRemoval> {
    let b = &sol.drift;
    let sigma = &sol.diffusion;
    let d = check_system(b, sigma, noise)?;
    if d > 3 {
        return arg("drift removal is limited to d <= 3");
    }
    let tg = noise.grid();
    let (t0, s0) = sol.interval();
    let eps = 1e-9 * (s0 - t0).abs().max(1.0);
    if tg.t_start() < t0 - eps || tg.t_end() > s0 + eps {
        return arg("noise grid must lie inside the corrector interval");
    }
    if opts.bins == 0 {
        return arg("bins must be positive");
    }
    let (lo, hi) = match &opts.region {
        Some((l, h)) if l.len() == d && h.len() == d => (l.clone(), h.clone()),
        Some(_) => return arg("bin region dimension mismatch"),
        None => {
            let o = sol.grid.origin().to_vec();
            let h = o.iter().map(|v| v + sol.grid.length()).collect();
            (o, h)
        }
    };
    let n_paths = noise.n_paths();
    match start {
        StartPoints::Shared(x) if x.len() == d => {}
        StartPoints::PerPath(x) if x.len() == n_paths * d => {}
        _ => return arg("start point dimension mismatch"),
    }
    let nb = opts.bins.pow(d as u32);
    let dt = tg.dt();
    let mut sm = vec![0.0; d * d];
    sigma.eval(tg.t_start(), &vec![0.0; d], &mut sm);

    let per_path: Vec<Option<Vec<Bin>>> = par::map_indexed(n_paths, |i| {
        let incs = noise.path_increments(i);
        let mut bins = vec![Bin::EMPTY; nb];
        let mut x = [0.0; 3];
        x[..d].copy_from_slice(start.point(i, d));
        let mut bv = [0.0; 3];
        let mut y = [0.0; 3];
        let mut yn = [0.0; 3];
        let mut xn = [0.0; 3];
        let mut grad = [0.0; 9];
        let mut sdw = [0.0; 3];
        sol.phi(tg.node(0), &x[..d], &mut y[..d]);
        for k in 0..tg.steps() {
            if !sol.contains(&x[..d]) {
                return None;
            }
            let t = tg.node(k);
            let dw = &incs[k * d..(k + 1) * d];
            b.eval(t, &x[..d], &mut bv[..d]);
            for r in 0..d {
                sdw[r] = (0..d).map(|c| sm[r * d + c] * dw[c]).sum();
                xn[r] = x[r] + bv[r] * dt + sdw[r];
            }
            if !sol.contains(&xn[..d]) {
                return None;
            }
            sol.phi_gradient(t, &x[..d], &mut grad[..d * d]);
            sol.phi(tg.node(k + 1), &xn[..d], &mut yn[..d]);
            let mut cell = 0;
            let mut inside = true;
            for a in 0..d {
                let s = (x[a] - lo[a]) / (hi[a] - lo[a]);
                if !(0.0..1.0).contains(&s) {
                    inside = false;
                }
                cell = cell * opts.bins + ((s * opts.bins as f64) as usize).min(opts.bins - 1);
            }
            if inside {
                let bin = &mut bins[cell];
                bin.count += 1.0;
                for r in 0..d {
                    let dx = (xn[r] - x[r] - sdw[r]) / dt;
                    let mart: f64 = (0..d).map(|c| grad[r * d + c] * sdw[c]).sum();
                    let dy = (yn[r] - y[r] - mart) / dt;
                    bin.x[r] += dx;
                    bin.x2[r] += dx * dx;
                    bin.y[r] += dy;
                    bin.y2[r] += dy * dy;
                }
            }
            x = xn;
            y = yn;
        }
        Some(bins)
    });

    let mut total = vec![Bin::EMPTY; nb];
    let mut n_flagged = 0;
    for p in &per_path {
        match p {
            Some(bins) => total.iter_mut().zip(bins).for_each(|(t, b)| t.merge(b)),
            None => n_flagged += 1,
        }
    }
    let mut out = DriftRemoval {
        drift_x: 0.0,
        drift_x_se: 0.0,
        drift_y: 0.0,
        drift_y_se: 0.0,
        reduction: 0.0,
        n_flagged,
        bins_used: 0,
    };
    for bin in total
        .iter()
        .filter(|b| b.count >= opts.min_count.max(2) as f64)
    {
        out.bins_used += 1;
        let (mx, sx) = bin.magnitude(&bin.x, &bin.x2, d);
        let (my, sy) = bin.magnitude(&bin.y, &bin.y2, d);
        if mx > out.drift_x {
            out.drift_x = mx;
            out.drift_x_se = sx;
        }
        if my > out.drift_y {
            out.drift_y = my;
            out.drift_y_se = sy;
        }
    }
    if out.bins_used == 0 {
        return arg("no bin reached the minimum sample count");
    }
    out.reduction = if out.drift_x > 0.0 {
        out.drift_y / out.drift_x
    } else {
        0.0
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{BrownianEnsemble, TimeGrid};
    use libm::{cos, sin};

    fn line(n: usize) -> CorrectorGrid {
        CorrectorGrid {
            space: PeriodicGrid::new(vec![-8.0], 16.0, vec![n]).unwrap(),
            time_steps: 50,
        }
    }

    #[test]
    fn heat_propagation_limits() {
        let g = PeriodicGrid::new(vec![-8.0], 16.0, vec![256]).unwrap();
        let f = GridField::from_fn(&g, 1, |x, o| {
            o[0] = exp(-0.5 * x[0] * x[0]) * cos(0.3 * x[0])
        });
        let s = DiffusionSpec::identity(1);
        let near = heat_propagate(&f, 0.0, 1e-6, &s).unwrap();
        assert!(near.sub(&f).unwrap().max_abs() < 1e-6);
        let far = heat_propagate(&f, 0.0, 0.7, &s).unwrap();
        assert!((far.integral(0) - f.integral(0)).abs() < 1e-8);
        assert!(heat_propagate(&f, 1.0, 1.0, &s).is_err());
    }

    #[test]
    fn zero_drift_gives_identity_map() {
        let sol = solve_corrector(
            &DriftSpec::zero(1),
            &DiffusionSpec::identity(1),
            0.0,
            0.1,
            &line(64),
            PicardOptions::default(),
        )
        .unwrap();
        assert!(sol.converged());
        let mut y = [0.0];
        sol.phi(0.05, &[1.234], &mut y);
        assert_eq!(y[0], 1.234);
        let pairs = sample_pairs(&sol, 50, 3);
        assert_eq!(bilipschitz_check(&sol, &pairs), (1.0, 1.0));
    }

    #[test]
    fn terminal_condition_and_residual() {
        let b = DriftSpec::closed(1, "bump", |_, x, o| o[0] = 0.5 * exp(-x[0] * x[0]));
        let s = DiffusionSpec::scaled_identity(1, sqrt(2.0)).unwrap();
        let sol = solve_corrector(&b, &s, 0.0, 0.1, &line(256), PicardOptions::default()).unwrap();
        assert!(sol.converged());
        assert!(sol.corrector(50).max_abs() == 0.0);
        assert!(sol.residual() < 1e-3, "residual {}", sol.residual());
        assert!(sol.lipschitz() < 0.5);
    }

    #[test]
    fn two_dimensional_rotation_drift() {
        let grid = CorrectorGrid {
            space: PeriodicGrid::new(vec![-4.0, -4.0], 8.0, vec![32, 32]).unwrap(),
            time_steps: 20,
        };
        let b = DriftSpec::closed(2, "swirl", |_, x, o| {
            let e = exp(-(x[0] * x[0] + x[1] * x[1]));
            o[0] = -x[1] * e;
            o[1] = x[0] * e + 0.1 * sin(x[0]) * e;
        });
        let s = DiffusionSpec::identity(2);
        let sol = solve_corrector(&b, &s, 0.0, 0.05, &grid, PicardOptions::default()).unwrap();
        assert!(sol.residual() < 1e-2);
    }

    #[test]
    fn drift_removal_with_zero_drift() {
        let sol = solve_corrector(
            &DriftSpec::zero(1),
            &DiffusionSpec::identity(1),
            0.0,
            0.1,
            &line(64),
            PicardOptions::default(),
        )
        .unwrap();
        let noise =
            BrownianEnsemble::generate(1, 200, 1, TimeGrid::new(0.0, 0.1, 50).unwrap()).unwrap();
        let r = drift_removal_check(
            &sol,
            StartPoints::Shared(&[0.0]),
            &noise,
            &DriftRemovalOptions {
                min_count: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.drift_x < 1e-12);
        assert!(r.drift_y.abs() < 1e-12);
    }
}
