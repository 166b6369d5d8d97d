//! Euler-Maruyama for `dX = b(t,X) dt + σ(t,X) dW` and the experiment
//! harnesses built on it.

use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, sqrt};

use crate::error::{arg, Result};
use crate::fields::{self, DiffusionSpec, DriftSpec, Quadrature, SpaceTimeBox};
use crate::par;
use crate::paths::{NoiseSource, PathEnsemble, PathStatus, Provenance, Storage, TimeGrid};
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub storage: Storage,
    /// Paths whose norm exceeds this radius are frozen and flagged.
    pub blowup_radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            storage: Storage::Full,
            blowup_radius: crate::defaults::BLOWUP_RADIUS,
        }
    }
}

impl SolverOptions {
    pub fn terminal() -> Self {
        Self {
            storage: Storage::Terminal,
            ..Self::default()
        }
    }
}

/// Initial condition: one point for every path, or one per path (a flow
/// evaluated over a set of starting points).
#[derive(Debug, Clone, Copy)]
pub enum StartPoints<'a> {
    Shared(&'a [f64]),
    PerPath(&'a [f64]),
}

impl StartPoints<'_> {
    #[inline]
    pub fn point(&self, i: usize, d: usize) -> &[f64] {
        match self {
            StartPoints::Shared(x) => x,
            StartPoints::PerPath(xs) => &xs[i * d..(i + 1) * d],
        }
    }

    fn validate(&self, n_paths: usize, d: usize) -> Result<()> {
        let ok = match self {
            StartPoints::Shared(x) => x.len() == d,
            StartPoints::PerPath(xs) => xs.len() == n_paths * d,
        };
        if ok {
            Ok(())
        } else {
            arg("initial point dimension does not match the system")
        }
    }
}

pub(crate) fn check_system(
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
) -> Result<usize> {
    let d = b.dim();
    if sigma.dim() != d || noise.dim() != d {
        return arg("drift, diffusion and noise dimensions differ");
    }
    if d > 8 {
        return arg("state dimension above 8 is not supported");
    }
    Ok(d)
}

/// Integrates a single path on `incs`, calling `visit(k, x_k)` at every node
/// `k = 0..=steps`. Frozen paths keep reporting their last state.
pub(crate) fn integrate_path(
    x0: &[f64],
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    grid: &TimeGrid,
    incs: &[f64],
    radius: f64,
    mut visit: impl FnMut(usize, &[f64]),
) -> PathStatus {
    let d = x0.len();
    let dt = grid.dt();
    let mut x = [0.0f64; 8];
    let mut next = [0.0f64; 8];
    let mut bv = [0.0f64; 8];
    let mut sm = [0.0f64; 64];
    x[..d].copy_from_slice(x0);
    let mut status = PathStatus::Ok;
    visit(0, &x[..d]);
    for k in 0..grid.steps() {
        if status.is_ok() {
            let t = grid.node(k);
            b.eval(t, &x[..d], &mut bv[..d]);
            sigma.eval(t, &x[..d], &mut sm[..d * d]);
            let dw = &incs[k * d..(k + 1) * d];
            let mut r2 = 0.0;
            for i in 0..d {
                let mut s = x[i] + bv[i] * dt;
                for j in 0..d {
                    s += sm[i * d + j] * dw[j];
                }
                next[i] = s;
                r2 += s * s;
            }
            if !r2.is_finite() {
                status = PathStatus::NonFinite { step: k + 1 };
            } else if sqrt(r2) > radius {
                status = PathStatus::Exited { step: k + 1 };
            } else {
                x[..d].copy_from_slice(&next[..d]);
            }
        }
        visit(k + 1, &x[..d]);
    }
    status
}

/// Simulates every path of `noise` from `start`. Deterministic in its inputs
/// and independent of the worker count.
pub fn euler_maruyama(
    start: StartPoints<'_>,
    b: &DriftSpec,
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
    opts: SolverOptions,
) -> Result<PathEnsemble> {
    let d = check_system(b, sigma, noise)?;
    let n = noise.n_paths();
    start.validate(n, d)?;
    let grid = noise.grid();
    let stored = opts.storage.stored_steps(grid.steps());
    let per = stored.len() * d;
    let results = par::map_indexed(n, |i| {
        let incs = noise.path_increments(i);
        let mut states = vec![0.0; per];
        let mut j = 0;
        let status = integrate_path(
            start.point(i, d),
            b,
            sigma,
            &grid,
            &incs,
            opts.blowup_radius,
            |k, x| {
                if j < stored.len() && stored[j] == k {
                    states[j * d..(j + 1) * d].copy_from_slice(x);
                    j += 1;
                }
            },
        );
        (states, status)
    });
    let mut states = Vec::with_capacity(n * per);
    let mut status = Vec::with_capacity(n);
    for (s, st) in results {
        states.extend_from_slice(&s);
        status.push(st);
    }
    Ok(PathEnsemble {
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
    })
}

/// One side of a coupled comparison.
#[derive(Clone, Copy)]
pub struct System<'a> {
    pub drift: &'a DriftSpec,
    pub diffusion: &'a DiffusionSpec,
    pub noise: &'a dyn NoiseSource,
}

/// `E sup_k |X^a_k - X^b_k|^2` over the nodes common to both grids. The
/// finer grid must refine the coarser one by an integer factor and both
/// noises must carry the same Brownian paths.
pub fn sup_squared_gap(
    start: &[f64],
    a: System<'_>,
    b: System<'_>,
    radius: f64,
) -> Result<Estimate> {
    let d = check_system(a.drift, a.diffusion, a.noise)?;
    check_system(b.drift, b.diffusion, b.noise)?;
    if b.drift.dim() != d || start.len() != d {
        return arg("coupled systems have different dimensions");
    }
    let (ga, gb) = (a.noise.grid(), b.noise.grid());
    if a.noise.n_paths() != b.noise.n_paths() {
        return arg("coupled systems need the same number of paths");
    }
    if ga.t_start() != gb.t_start() || ga.t_end() != gb.t_end() {
        return arg("coupled systems live on different time intervals");
    }
    let (ma, mb) = (ga.steps(), gb.steps());
    let coarse = ma.min(mb);
    if ma % coarse != 0 || mb % coarse != 0 {
        return arg("time grids are not nested");
    }
    let (ra, rb) = (ma / coarse, mb / coarse);
    let gaps = par::map_indexed(a.noise.n_paths(), |i| {
        let mut coarse_a = vec![0.0; (coarse + 1) * d];
        let incs = a.noise.path_increments(i);
        integrate_path(start, a.drift, a.diffusion, &ga, &incs, radius, |k, x| {
            if k % ra == 0 {
                let c = k / ra;
                coarse_a[c * d..(c + 1) * d].copy_from_slice(x);
            }
        });
        let incs = b.noise.path_increments(i);
        let mut sup: f64 = 0.0;
        integrate_path(start, b.drift, b.diffusion, &gb, &incs, radius, |k, x| {
            if k % rb == 0 {
                let c = k / rb;
                let e: f64 = (0..d)
                    .map(|j| {
                        let e = x[j] - coarse_a[c * d + j];
                        e * e
                    })
                    .sum();
                sup = sup.max(e);
            }
        });
        sup
    });
    Ok(stats::mean_se(&gaps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    /// `‖b - b'‖` in the mixed norm of the drifts' exponents.
    pub drift_distance: f64,
    /// `E sup_k |X^b_k - X^{b'}_k|^2`.
    pub gap: Estimate,
}

/// Runs `b` and each perturbation on identical increments and pairs the
/// squared sup-gap with the drift distance.
pub fn stability_experiment(
    start: &[f64],
    b: &DriftSpec,
    perturbations: &[DriftSpec],
    sigma: &DiffusionSpec,
    noise: &dyn NoiseSource,
    norm_domain: &SpaceTimeBox,
    quad: Quadrature,
) -> Result<Vec<StabilityRow>> {
    let grid = noise.grid();
    if norm_domain.t_start != grid.t_start() || norm_domain.t_end != grid.t_end() {
        return arg("norm domain time interval does not match the noise grid");
    }
    let mut rows = Vec::with_capacity(perturbations.len());
    for bp in perturbations {
        if bp.dim() != b.dim() {
            return arg("perturbed drift has a different dimension");
        }
        if bp.integrability() != b.integrability() {
            return arg("all drifts must share the exponents (p, q)");
        }
        let diff = DriftSpec::combination(vec![(1.0, b.clone()), (-1.0, bp.clone())])?;
        let drift_distance = diff.lq_lp_norm(norm_domain, quad)?;
        let gap = sup_squared_gap(
            start,
            System {
                drift: b,
                diffusion: sigma,
                noise,
            },
            System {
                drift: bp,
                diffusion: sigma,
                noise,
            },
            crate::defaults::BLOWUP_RADIUS,
        )?;
        rows.push(StabilityRow {
            drift_distance,
            gap,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeCheck {
    /// `∫ E f(X_{t,s}(x)) dx` over the initial grid.
    pub lhs: f64,
    /// `∫ f(x) dx` on the same grid.
    pub rhs: f64,
    pub gap: f64,
    pub mc_std_error: f64,
    /// `|Q_h f - Q_{h/2} f|`, a proxy for the quadrature error.
    pub quadrature_error: f64,
    /// `|lhs(Δ) - lhs(2Δ)|` on the same noise, a proxy for the Euler bias.
    /// Explicit Euler does not preserve volume exactly (a rotation expands
    /// by `det(I + AΔ) = 1 + Δ²` per step), so this term is not negligible.
    pub time_step_error: f64,
    /// Worst-case summation rounding over the start lattice, `n ε ∫|f|`.
    pub rounding_error: f64,
    pub combined_std_error: f64,
}

/// Checks `E ∫ f(X_{t,s}(x)) dx = ∫ f(x) dx` for a divergence-free drift with
/// `σ = sqrt(2ν) I`. The flow is evaluated from every midpoint of `lower..upper`
/// (`nodes` per axis) with the same Brownian path for all starting points.
pub fn volume_preservation_check(
    b: &DriftSpec,
    nu: f64,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    lower: &[f64],
    upper: &[f64],
    nodes: usize,
    noise: &dyn NoiseSource,
) -> Result<VolumeCheck> {
    let d = b.dim();
    if lower.len() != d || upper.len() != d {
        return arg("box dimension differs from drift dimension");
    }
    if !(nu >= 0.0) {
        return arg("viscosity must be non-negative");
    }
    if nodes == 0 {
        return arg("need at least one quadrature node");
    }
    // Spot-check the divergence on a coarse lattice of the box.
    let t0 = noise.grid().t_start();
    let mut worst: f64 = 0.0;
    fields::for_each_midpoint(lower, upper, 5, |x| {
        worst = worst.max(b.divergence(t0, x).abs())
    });
    if worst > 1e-6 {
        return arg(alloc::format!(
            "drift is not divergence-free (|div b| = {worst:e})"
        ));
    }
    let sigma = if nu == 0.0 {
        // deterministic flow
        DiffusionSpec::time_only(d, 1.0, move |_, out: &mut [f64]| {
            out[..d * d].iter_mut().for_each(|v| *v = 0.0)
        })?
    } else {
        DiffusionSpec::scaled_identity(d, sqrt(2.0 * nu))?
    };
    check_system(b, &sigma, noise)?;
    let cell: f64 = (0..d)
        .map(|a| (upper[a] - lower[a]) / nodes as f64)
        .product();
    let mut starts = Vec::new();
    fields::for_each_midpoint(lower, upper, nodes, |x| starts.extend_from_slice(x));
    let n_start = starts.len() / d;
    let grid = noise.grid();
    let steps = grid.steps();
    if steps < 2 || !steps.is_multiple_of(2) {
        return arg(
            "the time grid needs an even number of steps for the step-halving error estimate",
        );
    }
    let coarse = TimeGrid::new(grid.t_start(), grid.t_end(), steps / 2)?;
    // Each path is integrated on its own grid and on the grid with twice the
    // step, driven by the summed increments.
    let per_path = par::map_indexed(noise.n_paths(), |i| {
        let incs = noise.path_increments(i);
        let paired: Vec<f64> = (0..steps / 2)
            .flat_map(|k| (0..d).map(move |a| (k, a)))
            .map(|(k, a)| incs[2 * k * d + a] + incs[(2 * k + 1) * d + a])
            .collect();
        let (mut fine, mut rough) = (0.0, 0.0);
        for s in 0..n_start {
            let x0 = &starts[s * d..(s + 1) * d];
            integrate_path(
                x0,
                b,
                &sigma,
                &grid,
                &incs,
                crate::defaults::BLOWUP_RADIUS,
                |k, x| {
                    if k == steps {
                        fine += f(x);
                    }
                },
            );
            integrate_path(
                x0,
                b,
                &sigma,
                &coarse,
                &paired,
                crate::defaults::BLOWUP_RADIUS,
                |k, x| {
                    if k == steps / 2 {
                        rough += f(x);
                    }
                },
            );
        }
        (fine * cell, rough * cell)
    });
    let time_step_error =
        fabs(per_path.iter().map(|p| p.0 - p.1).sum::<f64>() / per_path.len() as f64);
    let per_path: Vec<f64> = per_path.into_iter().map(|p| p.0).collect();
    let est = stats::mean_se(&per_path);
    let quad = |m: usize| {
        let c: f64 = (0..d).map(|a| (upper[a] - lower[a]) / m as f64).product();
        let mut s = 0.0;
        fields::for_each_midpoint(lower, upper, m, |x| s += f(x));
        s * c
    };
    let rhs = quad(nodes);
    let quadrature_error = (rhs - quad(2 * nodes)).abs();
    let rounding_error = n_start as f64 * f64::EPSILON * fabs(est.mean).max(fabs(rhs));
    Ok(VolumeCheck {
        lhs: est.mean,
        rhs,
        gap: est.mean - rhs,
        mc_std_error: est.std_error,
        quadrature_error,
        time_step_error,
        rounding_error,
        combined_std_error: sqrt(
            est.std_error * est.std_error
                + quadrature_error * quadrature_error
                + time_step_error * time_step_error
                + rounding_error * rounding_error,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::BrownianEnsemble;

    #[test]
    fn constant_coefficients_are_exact() {
        let g = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let noise = BrownianEnsemble::generate(5, 8, 2, g).unwrap();
        let x0 = [0.25, -1.0];
        let ens = euler_maruyama(
            StartPoints::Shared(&x0),
            &DriftSpec::zero(2),
            &DiffusionSpec::identity(2),
            &noise,
            SolverOptions::default(),
        )
        .unwrap();
        for i in 0..8 {
            let incs = noise.path_increments(i);
            let mut acc = x0;
            for k in 0..=64 {
                let x = ens.state_at_step(i, k).unwrap();
                assert!((x[0] - acc[0]).abs() < 1e-14 && (x[1] - acc[1]).abs() < 1e-14);
                if k < 64 {
                    acc[0] += incs[2 * k];
                    acc[1] += incs[2 * k + 1];
                }
            }
        }
    }

    #[test]
    fn blowup_is_flagged_not_fatal() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let noise = BrownianEnsemble::generate(1, 4, 1, g).unwrap();
        let b = DriftSpec::closed(1, "explosive", |_, x, o: &mut [f64]| {
            o[0] = x[0] * x[0] * x[0]
        });
        let ens = euler_maruyama(
            StartPoints::Shared(&[50.0]),
            &b,
            &DiffusionSpec::identity(1),
            &noise,
            SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(ens.flagged(), 4);
        assert!(ens.terminal_states().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn determinism() {
        let g = TimeGrid::new(0.0, 0.5, 20).unwrap();
        let noise = BrownianEnsemble::generate(9, 16, 1, g).unwrap();
        let b = DriftSpec::closed(1, "sin", |_, x, o: &mut [f64]| o[0] = libm::sin(x[0]));
        let run = || {
            euler_maruyama(
                StartPoints::Shared(&[0.3]),
                &b,
                &DiffusionSpec::identity(1),
                &noise,
                SolverOptions::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stability_identical_drift_has_zero_gap() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let noise = BrownianEnsemble::generate(2, 32, 1, g).unwrap();
        let b = DriftSpec::closed(1, "ou", |_, x, o: &mut [f64]| o[0] = -x[0])
            .with_integrability(crate::fields::Integrability::new(2.0, 2.0).unwrap());
        let dom = SpaceTimeBox::cube(0.0, 1.0, 1, -5.0, 5.0);
        let rows = stability_experiment(
            &[0.0],
            &b,
            core::slice::from_ref(&b),
            &DiffusionSpec::identity(1),
            &noise,
            &dom,
            Quadrature::default(),
        )
        .unwrap();
        assert_eq!(rows[0].gap.mean, 0.0);
        assert_eq!(rows[0].drift_distance, 0.0);

        let bad = SpaceTimeBox::cube(0.0, 2.0, 1, -5.0, 5.0);
        assert!(stability_experiment(
            &[0.0],
            &b,
            core::slice::from_ref(&b),
            &DiffusionSpec::identity(1),
            &noise,
            &bad,
            Quadrature::default()
        )
        .is_err());
    }

    #[test]
    fn volume_check_rejects_compressible_drift() {
        let g = TimeGrid::new(0.0, 0.1, 4).unwrap();
        let noise = BrownianEnsemble::generate(2, 2, 2, g).unwrap();
        let b = DriftSpec::linear(vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let f = |x: &[f64]| libm::exp(-x[0] * x[0] - x[1] * x[1]);
        assert!(
            volume_preservation_check(&b, 0.1, &f, &[-1.0, -1.0], &[1.0, 1.0], 4, &noise).is_err()
        );
    }
}
