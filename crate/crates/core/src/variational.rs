//! Jacobian flow `J = ∇X`, Malliavin directional derivatives `D_h X`, the
//! Malliavin covariance and the Bismut-Elworthy-Li gradient estimator.
//!
//! All three are integrated jointly with `X` on the same increments. With
//! `A_k = ∇b(t_k, X_k) Δ + ∇(σ(t_k, X_k) ΔW_k)` the recursions are
//!
//! ```text
//! J_{k+1}   = J_k + A_k J_k
//! DhX_{k+1} = DhX_k + A_k DhX_k + σ(t_k, X_k) ḣ_k Δ
//! ```

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use libm::pow;

use crate::error::{arg, Error, Result};
use crate::fields::{DiffusionSpec, DriftSpec};
use crate::linalg;
use crate::par;
use crate::paths::{NoiseSource, PathEnsemble, PathStatus, Provenance, Storage, TimeGrid};
use crate::solver::{check_system, StartPoints};
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientPolicy {
    /// Fall back to central differences when no exact gradient exists.
    AllowFiniteDifference,
    /// Refuse coefficients without an exact gradient.
    RequireExact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalOptions {
    pub storage: Storage,
    pub blowup_radius: f64,
    /// Initial matrix of the Jacobian recursion (identity when `None`).
    pub initial: Option<Vec<f64>>,
    pub gradients: GradientPolicy,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        Self {
            storage: Storage::Terminal,
            blowup_radius: crate::defaults::BLOWUP_RADIUS,
            initial: None,
            gradients: GradientPolicy::AllowFiniteDifference,
        }
    }
}

/// Adapted direction callback `(k, t_k, X_k, J_k, out)`.
pub type AdaptedFn = Arc<dyn Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Cameron-Martin direction `ḣ`, evaluated at the left end of every step.
#[derive(Clone)]
pub enum Direction {
    Constant(Vec<f64>),
    /// Deterministic values, `steps * d`, step-major.
    Sampled(Vec<f64>),
    /// `ḣ(r) = (s - t)^{-1} σ^{-1}(X_r) J_r v`; then `D_h X_s = J_s v` up to
    /// the discretisation error.
    JacobianAligned(Vec<f64>),
    /// `(k, t_k, X_k, J_k, out)`.
    Adapted(AdaptedFn),
}

impl fmt::Debug for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Direction::Sampled(v) => f.debug_tuple("Sampled").field(&v.len()).finish(),
            Direction::JacobianAligned(v) => f.debug_tuple("JacobianAligned").field(v).finish(),
            Direction::Adapted(_) => f.write_str("Adapted(..)"),
        }
    }
}

impl Direction {
    fn validate(&self, d: usize, steps: usize) -> Result<()> {
        let ok = match self {
            Direction::Constant(v) | Direction::JacobianAligned(v) => v.len() == d,
            Direction::Sampled(v) => v.len() == steps * d,
            Direction::Adapted(_) => true,
        };
        if ok {
            Ok(())
        } else {
            arg("direction does not match the grid or dimension")
        }
    }
}

fn check_gradients(b: &DriftSpec, sigma: &DiffusionSpec, policy: GradientPolicy) -> Result<()> {
    if policy == GradientPolicy::RequireExact {
        if !b.has_exact_gradient() {
            return Err(Error::MissingGradient(b.label().into()));
        }
        if !sigma.has_exact_gradient() {
            return Err(Error::MissingGradient(sigma.label().into()));
        }
    }
    Ok(())
}

/// Per-step scratch and coefficient evaluation shared by the recursions.
struct Stepper<'a> {
    d: usize,
    b: &'a DriftSpec,
    sigma: &'a DiffusionSpec,
    sigma_const: bool,
    grid: TimeGrid,
    radius: f64,
    bv: [f64; 8],
    sm: [f64; 64],
    gb: [f64; 64],
    gs: [f64; 512],
    a: [f64; 64],
}

impl<'a> Stepper<'a> {
    fn new(b: &'a DriftSpec, sigma: &'a DiffusionSpec, grid: TimeGrid, radius: f64) -> Self {
        Self {
            d: b.dim(),
            b,
            sigma,
            sigma_const: sigma.constant_in_x(),
            grid,
            radius,
            bv: [0.0; 8],
            sm: [0.0; 64],
            gb: [0.0; 64],
            gs: [0.0; 512],
            a: [0.0; 64],
        }
    }

    /// Evaluates coefficients at `(t_k, x)` and forms `A_k`.
    #[inline]
    fn prepare(&mut self, k: usize, x: &[f64], dw: &[f64]) {
        let d = self.d;
        let t = self.grid.node(k);
        let dt = self.grid.dt();
        self.b.eval(t, x, &mut self.bv[..d]);
        self.sigma.eval(t, x, &mut self.sm[..d * d]);
        self.b.gradient(t, x, &mut self.gb[..d * d]);
        for q in 0..d * d {
            self.a[q] = self.gb[q] * dt;
        }
        if !self.sigma_const {
            self.sigma.gradient(t, x, &mut self.gs[..d * d * d]);
            for i in 0..d {
                for l in 0..d {
                    let mut s = 0.0;
                    for m in 0..d {
                        s += self.gs[(i * d + m) * d + l] * dw[m];
                    }
                    self.a[i * d + l] += s;
                }
            }
        }
    }

    /// `x <- x + b Δ + σ ΔW`; returns false if the path must freeze.
    #[inline]
    fn advance_state(&self, x: &mut [f64], dw: &[f64]) -> Option<PathStatus> {
        let d = self.d;
        let dt = self.grid.dt();
        let mut next = [0.0f64; 8];
        let mut r2 = 0.0;
        for i in 0..d {
            let mut s = x[i] + self.bv[i] * dt;
            for j in 0..d {
                s += self.sm[i * d + j] * dw[j];
            }
            next[i] = s;
            r2 += s * s;
        }
        if !r2.is_finite() {
            return Some(PathStatus::NonFinite { step: 0 });
        }
        if libm::sqrt(r2) > self.radius {
            return Some(PathStatus::Exited { step: 0 });
        }
        x.copy_from_slice(&next[..d]);
        None
    }

    /// `m <- m + A m` for a `d x c` matrix (or vector when `c = 1`).
    #[inline]
    fn advance_linear(&self, m: &mut [f64], c: usize) {
        let d = self.d;
        let mut tmp = [0.0f64; 64];
        for i in 0..d {
            for j in 0..c {
                let mut s = m[i * c + j];
                for l in 0..d {
                    s += self.a[i * d + l] * m[l * c + j];
                }
                tmp[i * c + j] = s;
            }
        }
        m.copy_from_slice(&tmp[..d * c]);
    }
}

fn freeze_status(st: PathStatus, step: usize) -> PathStatus {
    match st {
        PathStatus::Exited { .. } => PathStatus::Exited { step },
        PathStatus::NonFinite { .. } => PathStatus::NonFinite { step },
        PathStatus::Ok => PathStatus::Ok,
    }
}

/// Paths together with their Jacobian flow at the stored nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEnsemble {
    pub paths: PathEnsemble,
    /// `n_paths * stored * d * d`.
    jac: Vec<f64>,
    /// `sup_k ‖J_k‖_F` per path over every grid node.
    sup_norm: Vec<f64>,
}

impl JacobianEnsemble {
    pub fn jacobian(&self, i: usize, j: usize) -> &[f64] {
        let d = self.paths.dim();
        let per = self.paths.stored_steps().len() * d * d;
        let o = i * per + j * d * d;
        &self.jac[o..o + d * d]
    }

    pub fn terminal_jacobian(&self, i: usize) -> &[f64] {
        self.jacobian(i, self.paths.stored_steps().len() - 1)
    }

    /// Component-wise mean of the terminal Jacobian.
    pub fn mean_terminal_jacobian(&self) -> Vec<Estimate> {
        let d = self.paths.dim();
        let rows: Vec<f64> = (0..self.paths.n_paths())
            .flat_map(|i| self.terminal_jacobian(i).to_vec())
            .collect();
        stats::mean_se_rows(&rows, d * d)
    }

    /// `E sup_k ‖J_k‖_F^p`.
    pub fn sup_moment(&self, p: f64) -> Estimate {
        let v: Vec<f64> = self.sup_norm.iter().map(|s| pow(*s, p)).collect();
        stats::mean_se(&v)
    }
}

/// Integrates `X` and `J` jointly on the same increments.
pub fn jacobian_flow(
    start: StartPoints<'_>,
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
    opts: &VariationalOptions,
) -> Result<JacobianEnsemble> {
    let d = check_system(b, sigma, noise)?;
    check_gradients(b, sigma, opts.gradients)?;
    let n = noise.n_paths();
    match start {
        StartPoints::Shared(x) if x.len() != d => {
            return arg("initial point has the wrong dimension")
        }
        StartPoints::PerPath(x) if x.len() != n * d => {
            return arg("initial points have the wrong length")
        }
        _ => {}
    }
    let j0 = match &opts.initial {
        Some(m) if m.len() == d * d => m.clone(),
        Some(_) => return arg("initial Jacobian must be d x d"),
        None => linalg::identity(d),
    };
    let grid = noise.grid();
    let stored = opts.storage.stored_steps(grid.steps());
    let ns = stored.len();
    let out = par::map_indexed(n, |i| {
        let incs = noise.path_increments(i);
        let mut st = Stepper::new(b, sigma, grid, opts.blowup_radius);
        let mut x = [0.0f64; 8];
        x[..d].copy_from_slice(start.point(i, d));
        let mut jm = [0.0f64; 64];
        jm[..d * d].copy_from_slice(&j0);
        let mut xs = vec![0.0; ns * d];
        let mut js = vec![0.0; ns * d * d];
        let mut sup = linalg::frobenius(&jm[..d * d]);
        let mut status = PathStatus::Ok;
        let mut j = 0;
        for k in 0..=grid.steps() {
            if j < ns && stored[j] == k {
                xs[j * d..(j + 1) * d].copy_from_slice(&x[..d]);
                js[j * d * d..(j + 1) * d * d].copy_from_slice(&jm[..d * d]);
                j += 1;
            }
            if k == grid.steps() || !status.is_ok() {
                continue;
            }
            let dw = &incs[k * d..(k + 1) * d];
            st.prepare(k, &x[..d], dw);
            if let Some(s) = st.advance_state(&mut x[..d], dw) {
                status = freeze_status(s, k + 1);
                continue;
            }
            st.advance_linear(&mut jm[..d * d], d);
            sup = sup.max(linalg::frobenius(&jm[..d * d]));
        }
        (xs, js, sup, status)
    });
    let mut states = Vec::with_capacity(n * ns * d);
    let mut jac = Vec::with_capacity(n * ns * d * d);
    let mut sup_norm = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for (xs, js, s, stt) in out {
        states.extend_from_slice(&xs);
        jac.extend_from_slice(&js);
        sup_norm.push(s);
        status.push(stt);
    }
    Ok(JacobianEnsemble {
        paths: PathEnsemble {
            dim: d,
            n_paths: n,
            stored_steps: stored,
            states,
            status,
            provenance: Provenance {
                drift: b.label().into(),
                diffusion: sigma.label().into(),
                seed: noise.seed(),
                grid,
            },
        },
        jac,
        sup_norm,
    })
}

/// Malliavin derivative paths `D_h X`, the terminal Jacobian, and the
/// Malliavin covariance `Σ = Σ_k J_M J_k^{-1} σ_k σ_k^T J_k^{-T} J_M^T Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinEnsemble {
    pub paths: PathEnsemble,
    /// `n_paths * stored * d`.
    derivative: Vec<f64>,
    terminal_jacobian: Vec<f64>,
    covariance: Vec<f64>,
}

impl MalliavinEnsemble {
    pub fn derivative(&self, i: usize, j: usize) -> &[f64] {
        let d = self.paths.dim();
        let per = self.paths.stored_steps().len() * d;
        &self.derivative[i * per + j * d..i * per + (j + 1) * d]
    }

    pub fn terminal_derivative(&self, i: usize) -> &[f64] {
        self.derivative(i, self.paths.stored_steps().len() - 1)
    }

    pub fn terminal_jacobian(&self, i: usize) -> &[f64] {
        let d = self.paths.dim();
        &self.terminal_jacobian[i * d * d..(i + 1) * d * d]
    }

    pub fn covariance(&self, i: usize) -> &[f64] {
        let d = self.paths.dim();
        &self.covariance[i * d * d..(i + 1) * d * d]
    }

    /// Smallest eigenvalue of `Σ` over all paths.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        let d = self.paths.dim();
        (0..self.paths.n_paths())
            .flat_map(|i| linalg::symmetric_eigenvalues(self.covariance(i), d))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `|Σ_ij - Σ_ji|` over all paths.
    pub fn max_covariance_asymmetry(&self) -> f64 {
        let d = self.paths.dim();
        let mut w: f64 = 0.0;
        for i in 0..self.paths.n_paths() {
            let c = self.covariance(i);
            for a in 0..d {
                for b in 0..d {
                    w = w.max((c[a * d + b] - c[b * d + a]).abs());
                }
            }
        }
        w
    }
}

pub fn malliavin_derivative(
    start: StartPoints<'_>,
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
    direction: &Direction,
    opts: &VariationalOptions,
) -> Result<MalliavinEnsemble> {
    let d = check_system(b, sigma, noise)?;
    check_gradients(b, sigma, opts.gradients)?;
    let grid = noise.grid();
    direction.validate(d, grid.steps())?;
    let n = noise.n_paths();
    match start {
        StartPoints::Shared(x) if x.len() != d => {
            return arg("initial point has the wrong dimension")
        }
        StartPoints::PerPath(x) if x.len() != n * d => {
            return arg("initial points have the wrong length")
        }
        _ => {}
    }
    let stored = opts.storage.stored_steps(grid.steps());
    let ns = stored.len();
    let dt = grid.dt();
    let horizon = grid.horizon();
    let sigma_inv_const = sigma.as_constant().and_then(|m| linalg::inverse(m, d));
    let out = par::map_indexed(n, |i| {
        let incs = noise.path_increments(i);
        let mut st = Stepper::new(b, sigma, grid, opts.blowup_radius);
        let mut x = [0.0f64; 8];
        x[..d].copy_from_slice(start.point(i, d));
        let mut jm = linalg::identity(d);
        let mut dh = [0.0f64; 8];
        let mut hdot = [0.0f64; 8];
        let mut src = [0.0f64; 8];
        // Σ_k J_k^{-1} σσ^T J_k^{-T} Δ
        let mut inner = vec![0.0; d * d];
        let mut xs = vec![0.0; ns * d];
        let mut ds = vec![0.0; ns * d];
        let mut status = PathStatus::Ok;
        let mut j = 0;
        for k in 0..=grid.steps() {
            if j < ns && stored[j] == k {
                xs[j * d..(j + 1) * d].copy_from_slice(&x[..d]);
                ds[j * d..(j + 1) * d].copy_from_slice(&dh[..d]);
                j += 1;
            }
            if k == grid.steps() || !status.is_ok() {
                continue;
            }
            let dw = &incs[k * d..(k + 1) * d];
            st.prepare(k, &x[..d], dw);
            let t = grid.node(k);
            match direction {
                Direction::Constant(v) => hdot[..d].copy_from_slice(v),
                Direction::Sampled(v) => hdot[..d].copy_from_slice(&v[k * d..(k + 1) * d]),
                Direction::JacobianAligned(v) => {
                    let mut jv = [0.0f64; 8];
                    linalg::mat_vec(&jm, v, d, &mut jv[..d]);
                    let inv = match &sigma_inv_const {
                        Some(m) => Some(m.clone()),
                        None => linalg::inverse(&st.sm[..d * d], d),
                    };
                    match inv {
                        Some(m) => {
                            linalg::mat_vec(&m, &jv[..d], d, &mut hdot[..d]);
                            hdot[..d].iter_mut().for_each(|h| *h /= horizon);
                        }
                        None => {
                            status = PathStatus::NonFinite { step: k };
                            continue;
                        }
                    }
                }
                Direction::Adapted(f) => f(k, t, &x[..d], &jm, &mut hdot[..d]),
            }
            linalg::mat_vec(&st.sm[..d * d], &hdot[..d], d, &mut src[..d]);
            // covariance contribution at the left endpoint
            if let Some(jinv) = linalg::inverse(&jm, d) {
                let mut js = vec![0.0; d * d];
                linalg::mat_mul(&jinv, &st.sm[..d * d], d, &mut js);
                for a in 0..d {
                    for c in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += js[a * d + l] * js[c * d + l];
                        }
                        inner[a * d + c] += s * dt;
                    }
                }
            }
            if let Some(s) = st.advance_state(&mut x[..d], dw) {
                status = freeze_status(s, k + 1);
                continue;
            }
            st.advance_linear(&mut dh[..d], 1);
            for a in 0..d {
                dh[a] += src[a] * dt;
            }
            st.advance_linear(&mut jm, d);
        }
        let mut tmp = vec![0.0; d * d];
        let mut cov = vec![0.0; d * d];
        linalg::mat_mul(&jm, &inner, d, &mut tmp);
        linalg::mat_mul(&tmp, &linalg::transpose(&jm, d), d, &mut cov);
        (xs, ds, jm, cov, status)
    });
    let mut states = Vec::with_capacity(n * ns * d);
    let mut derivative = Vec::with_capacity(n * ns * d);
    let mut terminal_jacobian = Vec::with_capacity(n * d * d);
    let mut covariance = Vec::with_capacity(n * d * d);
    let mut status = Vec::with_capacity(n);
    for (xs, ds, jm, cov, stt) in out {
        states.extend_from_slice(&xs);
        derivative.extend_from_slice(&ds);
        terminal_jacobian.extend_from_slice(&jm);
        covariance.extend_from_slice(&cov);
        status.push(stt);
    }
    Ok(MalliavinEnsemble {
        paths: PathEnsemble {
            dim: d,
            n_paths: n,
            stored_steps: stored,
            states,
            status,
            provenance: Provenance {
                drift: b.label().into(),
                diffusion: sigma.label().into(),
                seed: noise.seed(),
                grid,
            },
        },
        derivative,
        terminal_jacobian,
        covariance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub point: Vec<f64>,
    pub horizon: f64,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_paths: usize,
    /// Paths excluded for blow-up or a near-singular `σ`.
    pub n_flagged: usize,
    pub dt: f64,
}

/// `∇_x E f(X_{t,s}(x)) ≈ (s-t)^{-1} E[ f(X_s) Σ_k J_k^T σ_k^{-T} ΔW_k ]`,
/// with the Itô sum taken at left endpoints.
pub fn bel_gradient(
    x0: &[f64],
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    opts: &VariationalOptions,
) -> Result<GradientEstimate> {
    let d = check_system(b, sigma, noise)?;
    check_gradients(b, sigma, opts.gradients)?;
    if x0.len() != d {
        return arg("evaluation point has the wrong dimension");
    }
    let grid = noise.grid();
    let horizon = grid.horizon();
    let inv_bound = crate::defaults::SINGULAR_SIGMA_FACTOR * sigma.ellipticity();
    let sigma_inv_const = match sigma.as_constant() {
        Some(m) => {
            Some(linalg::inverse(m, d).ok_or_else(|| Error::Argument("σ is singular".into()))?)
        }
        None => None,
    };
    let per_path = par::map_indexed(noise.n_paths(), |i| {
        let incs = noise.path_increments(i);
        let mut st = Stepper::new(b, sigma, grid, opts.blowup_radius);
        let mut x = [0.0f64; 8];
        x[..d].copy_from_slice(x0);
        let mut jm = linalg::identity(d);
        let mut weight = [0.0f64; 8];
        let mut y = [0.0f64; 8];
        let mut z = [0.0f64; 8];
        for k in 0..grid.steps() {
            let dw = &incs[k * d..(k + 1) * d];
            st.prepare(k, &x[..d], dw);
            let inv = match &sigma_inv_const {
                Some(m) => m.clone(),
                None => match linalg::inverse(&st.sm[..d * d], d) {
                    Some(m) if linalg::spectral_norm(&m, d) <= inv_bound => m,
                    _ => return None,
                },
            };
            // weight += J^T σ^{-T} ΔW
            linalg::mat_t_vec(&inv, dw, d, &mut y[..d]);
            linalg::mat_t_vec(&jm, &y[..d], d, &mut z[..d]);
            for a in 0..d {
                weight[a] += z[a];
            }
            if st.advance_state(&mut x[..d], dw).is_some() {
                return None;
            }
            st.advance_linear(&mut jm, d);
        }
        let fx = f(&x[..d]);
        let mut out = [0.0f64; 8];
        for a in 0..d {
            out[a] = fx * weight[a] / horizon;
        }
        Some(out)
    });
    let mut rows = Vec::with_capacity(per_path.len() * d);
    let mut flagged = 0;
    for r in per_path {
        match r {
            Some(v) => rows.extend_from_slice(&v[..d]),
            None => flagged += 1,
        }
    }
    if rows.is_empty() {
        return arg("every path was flagged; no gradient estimate");
    }
    let est = stats::mean_se_rows(&rows, d);
    Ok(GradientEstimate {
        point: x0.to_vec(),
        horizon,
        estimate: est.iter().map(|e| e.mean).collect(),
        std_error: est.iter().map(|e| e.std_error).collect(),
        n_paths: noise.n_paths(),
        n_flagged: flagged,
        dt: grid.dt(),
    })
}
