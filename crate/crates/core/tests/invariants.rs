use proptest::prelude::*;
use sdeflow_core::paths::Storage;
use sdeflow_core::solver::{self, SolverOptions, StartPoints};
use sdeflow_core::spectral::{fft, GridField, PeriodicGrid};
use sdeflow_core::stats;
use sdeflow_core::variational::{self, Direction, VariationalOptions};
use sdeflow_core::{BrownianEnsemble, DiffusionSpec, DriftSpec, NoiseSource, TimeGrid};

use num_complex::Complex64;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

/// Random field on the 2-D torus built from a handful of low modes.
fn trig_field(g: &PeriodicGrid, coef: &[f64]) -> GridField {
    let c = coef.to_vec();
    GridField::from_fn(g, 2, move |x, o| {
        o[0] = c[0] * x[0].sin() + c[1] * (2.0 * x[1]).cos() + c[2] * (x[0] + x[1]).sin();
        o[1] = c[3] * x[1].cos() + c[4] * (3.0 * x[0]).sin() + c[5] * (x[0] - 2.0 * x[1]).cos();
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn paths_do_not_depend_on_ensemble_size(seed in any::<u64>(), n in 1usize..20, extra in 1usize..20, i in 0usize..20) {
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let small = BrownianEnsemble::generate(seed, n, 2, grid).unwrap();
        let big = BrownianEnsemble::generate(seed, n + extra, 2, grid).unwrap();
        let i = i % n;
        prop_assert_eq!(small.path_increments(i), big.path_increments(i));
        let again = BrownianEnsemble::generate(seed, n, 2, grid).unwrap();
        prop_assert_eq!(small.materialize(), again.materialize());
    }

    #[test]
    fn coarsening_sums_consecutive_increments(seed in any::<u64>(), factor in 1usize..5) {
        let fine = BrownianEnsemble::generate(seed, 3, 2, TimeGrid::new(0.0, 1.0, 12 * factor).unwrap()).unwrap();
        let coarse = fine.coarsened(factor).unwrap();
        for i in 0..3 {
            let (f, c) = (fine.path_increments(i), coarse.path_increments(i));
            for k in 0..12 {
                for a in 0..2 {
                    let s: f64 = (0..factor).map(|j| f[(k * factor + j) * 2 + a]).sum();
                    prop_assert!((s - c[k * 2 + a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flows_start_at_identity_and_zero(
        a in prop::collection::vec(-2.0f64..2.0, 4),
        s in prop::collection::vec(-0.3f64..0.3, 2),
        seed in any::<u64>(),
    ) {
        let b = DriftSpec::linear(a, 2).unwrap();
        let sigma = DiffusionSpec::constant(vec![1.0, s[0], s[1], 1.0], 2).unwrap();
        let w = BrownianEnsemble::generate(seed, 4, 2, TimeGrid::new(0.0, 0.5, 10).unwrap()).unwrap();
        let opts = VariationalOptions { storage: Storage::Full, ..VariationalOptions::default() };
        let j = variational::jacobian_flow(StartPoints::Shared(&[0.1, 0.2]), &b, &sigma, &w, &opts).unwrap();
        let m = variational::malliavin_derivative(StartPoints::Shared(&[0.1, 0.2]), &b, &sigma, &w, &Direction::Constant(vec![1.0, -1.0]), &opts).unwrap();
        for i in 0..4 {
            prop_assert_eq!(j.jacobian(i, 0), &[1.0, 0.0, 0.0, 1.0][..]);
            prop_assert_eq!(m.derivative(i, 0), &[0.0, 0.0][..]);
        }
        prop_assert!(m.min_covariance_eigenvalue() >= -1e-10);
    }

    #[test]
    fn additive_noise_moves_paths_by_the_increments(x0 in -5.0f64..5.0, seed in any::<u64>()) {
        let w = BrownianEnsemble::generate(seed, 5, 1, TimeGrid::new(0.0, 1.0, 20).unwrap()).unwrap();
        let ens = solver::euler_maruyama(StartPoints::Shared(&[x0]), &DriftSpec::zero(1), &DiffusionSpec::identity(1), &w, SolverOptions::terminal()).unwrap();
        for i in 0..5 {
            let total: f64 = w.path_increments(i).iter().sum();
            prop_assert!((ens.terminal(i)[0] - x0 - total).abs() < 1e-12);
        }
    }

    #[test]
    fn leray_is_an_idempotent_divergence_free_projection(coef in prop::collection::vec(-3.0f64..3.0, 6)) {
        let g = PeriodicGrid::cube(2, std::f64::consts::TAU, 16).unwrap();
        let v = trig_field(&g, &coef);
        let p = v.leray_project().unwrap();
        let pp = p.leray_project().unwrap();
        prop_assert!(p.sub(&pp).unwrap().max_abs() < 1e-12);
        prop_assert!(p.max_divergence().unwrap() < 1e-8);
        // an orthogonal projection does not increase the L² norm
        prop_assert!(p.norm_lp(2.0) <= v.norm_lp(2.0) + 1e-12);
    }

    #[test]
    fn biot_savart_then_curl_is_the_identity(coef in prop::collection::vec(-3.0f64..3.0, 6)) {
        let g = PeriodicGrid::cube(2, std::f64::consts::TAU, 16).unwrap();
        let omega = trig_field(&g, &coef).curl().unwrap();
        let back = omega.biot_savart().unwrap().curl().unwrap();
        prop_assert!(back.sub(&omega).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn fft_round_trip(re in prop::collection::vec(-10.0f64..10.0, 64)) {
        let orig: Vec<Complex64> = re.iter().map(|&x| Complex64::new(x, -0.5 * x)).collect();
        let mut data = orig.clone();
        fft(&mut data, false);
        fft(&mut data, true);
        for (a, b) in data.iter().zip(&orig) {
            prop_assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn heat_decay_matches_the_eigenmode_factor(k in 1i32..4, nu in 0.01f64..1.0, tau in 0.0f64..2.0) {
        let g = PeriodicGrid::cube(2, std::f64::consts::TAU, 16).unwrap();
        let kf = k as f64;
        let f = GridField::from_fn(&g, 1, |x, o| o[0] = (kf * x[0]).sin() * (kf * x[1]).cos());
        let decayed = f.heat_decay(nu, tau);
        let want = f.scaled((-nu * 2.0 * kf * kf * tau).exp());
        prop_assert!(decayed.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn loglog_slope_recovers_power_laws(p in -3.0f64..3.0, c in 0.1f64..10.0) {
        let xs = [0.4, 0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| c * x.powf(p)).collect();
        prop_assert!((stats::loglog_slope(&xs, &ys) - p).abs() < 1e-10);
    }
}
