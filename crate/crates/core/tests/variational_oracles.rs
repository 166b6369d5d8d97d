use sdeflow_core::paths::Storage;
use sdeflow_core::solver::{self, SolverOptions, StartPoints};
use sdeflow_core::stats;
use sdeflow_core::variational::{self, Direction, GradientPolicy, VariationalOptions};
use sdeflow_core::{BrownianEnsemble, DiffusionSpec, DriftSpec, NoiseSource, TimeGrid};

fn full() -> VariationalOptions {
    VariationalOptions {
        storage: Storage::Full,
        ..VariationalOptions::default()
    }
}

fn noise(seed: u64, n: usize, d: usize, horizon: f64, dt: f64) -> BrownianEnsemble {
    BrownianEnsemble::generate(seed, n, d, TimeGrid::with_step(0.0, horizon, dt).unwrap()).unwrap()
}

/// `b = (-x + sin(y)/2, -y + cos(x)/2)` with its gradient.
fn smooth_drift() -> DriftSpec {
    DriftSpec::closed(2, "smooth", |_, x, o: &mut [f64]| {
        o[0] = -x[0] + 0.5 * x[1].sin();
        o[1] = -x[1] + 0.5 * x[0].cos();
    })
    .with_gradient(|_, x, g: &mut [f64]| {
        g[0] = -1.0;
        g[1] = 0.5 * x[1].cos();
        g[2] = -0.5 * x[0].sin();
        g[3] = -1.0;
    })
}

/// `σ(x) = 1 + 0.3 sin x` in one dimension.
fn wavy_sigma() -> DiffusionSpec {
    DiffusionSpec::general(1, "wavy", 1.0 / 0.7, 0.5, |_, x, o: &mut [f64]| {
        o[0] = 1.0 + 0.3 * x[0].sin()
    })
    .unwrap()
    .with_gradient(|_, x, o: &mut [f64]| o[0] = 0.3 * x[0].cos())
}

fn frob(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn rotation_jacobian_is_the_matrix_exponential() {
    let b = DriftSpec::linear(vec![0.0, 1.0, -1.0, 0.0], 2).unwrap();
    let w = noise(1, 4, 2, 1.0, 1e-4);
    let ens = variational::jacobian_flow(
        StartPoints::Shared(&[0.3, -0.2]),
        &b,
        &DiffusionSpec::identity(2),
        &w,
        &VariationalOptions::default(),
    )
    .unwrap();
    let (c, s) = (1f64.cos(), 1f64.sin());
    let exact = [c, s, -s, c];
    for i in 0..4 {
        assert!(frob(ens.terminal_jacobian(i), &exact) < 5e-3);
    }
}

#[test]
fn free_flow_has_identity_jacobian_and_zero_initial_derivative() {
    let w = noise(2, 8, 3, 0.5, 0.05);
    let (b, s) = (DriftSpec::zero(3), DiffusionSpec::identity(3));
    let ens =
        variational::jacobian_flow(StartPoints::Shared(&[0.0; 3]), &b, &s, &w, &full()).unwrap();
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for i in 0..8 {
        for j in 0..ens.paths.stored_steps().len() {
            assert_eq!(ens.jacobian(i, j), &id);
        }
    }
    let m = variational::malliavin_derivative(
        StartPoints::Shared(&[0.0; 3]),
        &b,
        &s,
        &w,
        &Direction::Constant(vec![1.0; 3]),
        &full(),
    )
    .unwrap();
    for i in 0..8 {
        assert_eq!(m.derivative(i, 0), &[0.0; 3]);
        for v in m.terminal_derivative(i) {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let cov = m.covariance(i);
        for a in 0..3 {
            for c in 0..3 {
                let want = if a == c { 0.5 } else { 0.0 };
                assert!((cov[a * 3 + c] - want).abs() < 1e-12);
            }
        }
    }
}

/// Pathwise closed form for `b = 0`, `d = 1`:
/// `J = exp(Σ σ'(X_k) ΔW_k - ½ Σ σ'(X_k)² Δ)` from the same increments.
fn closed_form_gap(w: &BrownianEnsemble) -> Vec<f64> {
    let sigma = wavy_sigma();
    let b = DriftSpec::zero(1);
    let ens =
        variational::jacobian_flow(StartPoints::Shared(&[0.4]), &b, &sigma, w, &full()).unwrap();
    let dt = w.grid().dt();
    (0..w.n_paths())
        .map(|i| {
            let incs = w.path_increments(i);
            let mut log = 0.0;
            for (k, dw) in incs.iter().enumerate() {
                let sp = 0.3 * ens.paths.state(i, k)[0].cos();
                log += sp * dw - 0.5 * sp * sp * dt;
            }
            (ens.terminal_jacobian(i)[0] - log.exp()).abs()
        })
        .collect()
}

#[test]
fn one_dimensional_jacobian_matches_the_stochastic_exponential() {
    let fine = noise(3, 2000, 1, 1.0, 1e-3);
    let coarse = fine.coarsened(10).unwrap();
    let e_fine = stats::mean_se(&closed_form_gap(&fine));
    let e_coarse = stats::mean_se(&closed_form_gap(&coarse));
    // strong order 1/2: ten times finer cuts the gap by about sqrt(10)
    assert!(e_fine.mean < e_coarse.mean / 2.0, "{e_fine:?} {e_coarse:?}");
    assert!(e_fine.mean < 0.02, "{e_fine:?}");
}

#[test]
fn jacobian_flow_is_linear_in_its_initial_matrix() {
    let w = noise(4, 16, 2, 1.0, 1e-2);
    let sigma = DiffusionSpec::constant(vec![1.0, 0.3, 0.0, 0.8], 2).unwrap();
    let v = vec![0.7, -1.1, 0.25, 2.0];
    let a = -3.5;
    let run = |m: Vec<f64>| {
        let opts = VariationalOptions {
            initial: Some(m),
            ..full()
        };
        variational::jacobian_flow(
            StartPoints::Shared(&[0.1, 0.2]),
            &smooth_drift(),
            &sigma,
            &w,
            &opts,
        )
        .unwrap()
    };
    let (one, scaled) = (run(v.clone()), run(v.iter().map(|x| a * x).collect()));
    for i in 0..16 {
        for j in 0..one.paths.stored_steps().len() {
            for (x, y) in one.jacobian(i, j).iter().zip(scaled.jacobian(i, j)) {
                assert!((a * x - y).abs() < 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}

#[test]
fn jacobian_aligned_direction_reproduces_the_jacobian() {
    let w = noise(5, 200, 2, 1.0, 1e-3);
    let sigma = DiffusionSpec::constant(vec![1.0, 0.2, 0.0, 0.9], 2).unwrap();
    let v = vec![0.6, -0.8];
    let x0 = [0.5, -0.3];
    let jac = variational::jacobian_flow(
        StartPoints::Shared(&x0),
        &smooth_drift(),
        &sigma,
        &w,
        &full(),
    )
    .unwrap();
    let mal = variational::malliavin_derivative(
        StartPoints::Shared(&x0),
        &smooth_drift(),
        &sigma,
        &w,
        &Direction::JacobianAligned(v.clone()),
        &full(),
    )
    .unwrap();
    let grid = w.grid();
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        for (j, &k) in jac.paths.stored_steps().iter().enumerate() {
            // with constant σ: D_h X_r = (r - t)/(s - t) J_r v
            let jm = jac.jacobian(i, j);
            let frac = (grid.node(k) - grid.t_start()) / grid.horizon();
            let d = mal.derivative(i, j);
            for a in 0..2 {
                let want = frac * (jm[a * 2] * v[0] + jm[a * 2 + 1] * v[1]);
                worst = worst.max((d[a] - want).abs());
            }
        }
    }
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn malliavin_covariance_is_symmetric_positive_semidefinite() {
    let w = noise(6, 100, 2, 1.0, 1e-2);
    let sigma = DiffusionSpec::general(2, "tilt", 2.0, 0.5, |_, x, o: &mut [f64]| {
        o[0] = 1.0 + 0.2 * x[0].sin();
        o[1] = 0.1;
        o[2] = 0.0;
        o[3] = 1.0 + 0.2 * x[1].cos();
    })
    .unwrap();
    let m = variational::malliavin_derivative(
        StartPoints::Shared(&[0.0, 0.0]),
        &smooth_drift(),
        &sigma,
        &w,
        &Direction::Constant(vec![1.0, 0.0]),
        &VariationalOptions::default(),
    )
    .unwrap();
    assert!(m.min_covariance_eigenvalue() >= -1e-10);
    assert!(m.max_covariance_asymmetry() < 1e-12);
}

#[test]
fn bel_gradient_of_a_coordinate_is_a_basis_vector() {
    let w = noise(7, 20_000, 2, 1.0, 0.05);
    let g = variational::bel_gradient(
        &[0.3, -0.4],
        &DriftSpec::zero(2),
        &DiffusionSpec::identity(2),
        &w,
        &|x: &[f64]| x[0],
        &VariationalOptions::default(),
    )
    .unwrap();
    for (a, want) in [1.0, 0.0].iter().enumerate() {
        assert!((g.estimate[a] - want).abs() < 3.0 * g.std_error[a], "{g:?}");
    }
    assert_eq!(g.n_flagged, 0);
}

#[test]
fn bel_gradient_sin_benchmark() {
    let w = noise(8, 100_000, 1, 1.0, 0.1);
    let g = variational::bel_gradient(
        &[0.0],
        &DriftSpec::zero(1),
        &DiffusionSpec::identity(1),
        &w,
        &|x: &[f64]| x[0].sin(),
        &VariationalOptions::default(),
    )
    .unwrap();
    let exact = (-0.5f64).exp();
    assert!(
        (g.estimate[0] - exact).abs() < 3.0 * g.std_error[0],
        "{g:?}"
    );
}

#[test]
fn bel_gradient_agrees_with_common_noise_finite_difference() {
    let b = DriftSpec::linear(vec![-1.0], 1).unwrap();
    let sigma = DiffusionSpec::identity(1);
    let w = noise(9, 20_000, 1, 1.0, 1e-2);
    let f = |x: &[f64]| x[0].sin();
    let x0 = 0.3;
    let g = variational::bel_gradient(&[x0], &b, &sigma, &w, &f, &VariationalOptions::default())
        .unwrap();
    let h = 1e-3;
    let terminal = |x: f64| {
        solver::euler_maruyama(
            StartPoints::Shared(&[x]),
            &b,
            &sigma,
            &w,
            SolverOptions::terminal(),
        )
        .unwrap()
        .terminal_states()
    };
    let (up, down) = (terminal(x0 + h), terminal(x0 - h));
    let fd: Vec<f64> = up
        .iter()
        .zip(&down)
        .map(|(u, d)| (f(&[*u]) - f(&[*d])) / (2.0 * h))
        .collect();
    let fd = stats::mean_se(&fd);
    let combined = (g.std_error[0].powi(2) + fd.std_error.powi(2)).sqrt();
    assert!(
        (g.estimate[0] - fd.mean).abs() < 3.0 * combined,
        "{g:?} {fd:?}"
    );
}

#[test]
fn jacobian_moments_are_stable_under_doubling() {
    let w = noise(10, 4000, 1, 1.0, 1e-2);
    let half = w.truncated(2000).unwrap();
    let b = DriftSpec::closed(1, "pull", |_, x, o: &mut [f64]| {
        o[0] = -x[0] + 0.5 * x[0].sin()
    })
    .with_gradient(|_, x, g: &mut [f64]| g[0] = -1.0 + 0.5 * x[0].cos());
    let run = |n: &BrownianEnsemble| {
        variational::jacobian_flow(
            StartPoints::Shared(&[0.2]),
            &b,
            &wavy_sigma(),
            n,
            &VariationalOptions::default(),
        )
        .unwrap()
    };
    let (big, small) = (run(&w), run(&half));
    for p in [2.0, 4.0] {
        let (m2, m1) = (big.sup_moment(p).mean, small.sup_moment(p).mean);
        assert!(
            m2.is_finite() && ((m2 - m1) / m2).abs() < 0.1,
            "p={p}: {m1} {m2}"
        );
    }
}

#[test]
fn exact_gradients_can_be_required() {
    let w = noise(11, 2, 1, 1.0, 0.1);
    let b = DriftSpec::closed(1, "no-grad", |_, x, o: &mut [f64]| o[0] = x[0].sin());
    let opts = VariationalOptions {
        gradients: GradientPolicy::RequireExact,
        ..VariationalOptions::default()
    };
    let s = DiffusionSpec::identity(1);
    assert!(variational::jacobian_flow(StartPoints::Shared(&[0.0]), &b, &s, &w, &opts).is_err());
    assert!(variational::jacobian_flow(
        StartPoints::Shared(&[0.0]),
        &b,
        &s,
        &w,
        &VariationalOptions::default()
    )
    .is_ok());
}
