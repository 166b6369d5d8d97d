//! Acceptance suite: one PASS/FAIL line per criterion, with wall time
//! against its budget. Exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sdeflow::commands::kernel_suite;
use sdeflow::config::KernelTestExperiment;
use sdeflow_core::defaults::{DT, N_PATHS};
use sdeflow_core::fields::{Integrability, Quadrature, SpaceTimeBox};
use sdeflow_core::nse::{self, EnsembleParams, NsOptions};
use sdeflow_core::paths::Storage;
use sdeflow_core::solver::{self, SolverOptions, StartPoints};
use sdeflow_core::spectral::PeriodicGrid;
use sdeflow_core::stats;
use sdeflow_core::variational::{self, Direction, VariationalOptions};
use sdeflow_core::zvonkin::{self, CorrectorGrid, DriftRemovalOptions, PicardOptions};
use sdeflow_core::{BrownianEnsemble, DiffusionSpec, DriftSpec, NoiseSource, TimeGrid};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn noise(seed: u64, n: usize, d: usize, t0: f64, t1: f64, dt: f64) -> BrownianEnsemble {
    BrownianEnsemble::generate(seed, n, d, TimeGrid::with_step(t0, t1, dt).unwrap()).unwrap()
}

fn ou_drift() -> DriftSpec {
    DriftSpec::linear(vec![-1.0], 1).unwrap()
}

fn ou_benchmark() -> Verdict {
    let w = noise(1, 100_000, 1, 0.0, 1.0, 1e-3);
    let sigma = DiffusionSpec::scaled_identity(1, 2f64.sqrt()).unwrap();
    let ens = solver::euler_maruyama(
        StartPoints::Shared(&[1.0]),
        &ou_drift(),
        &sigma,
        &w,
        SolverOptions::terminal(),
    )
    .unwrap();
    let x = ens.terminal_states();
    let (m, v) = (stats::mean_se(&x), stats::variance_se(&x));
    let (em, ev) = ((-1f64).exp(), 1.0 - (-2f64).exp());
    verdict(
        m.within(em, 3.0) && v.within(ev, 3.0),
        format!(
            "mean {:.5} ± {:.5} (exact {em:.5}), variance {:.5} ± {:.5} (exact {ev:.5})",
            m.mean, m.std_error, v.mean, v.std_error
        ),
    )
}

fn stability_scaling() -> Verdict {
    let b = ou_drift().with_integrability(Integrability::new(2.0, 2.0).unwrap());
    let g = DriftSpec::closed(1, "cos", |_, x, o: &mut [f64]| o[0] = x[0].cos());
    let eps = [0.4, 0.2, 0.1, 0.05];
    let perturbed: Vec<DriftSpec> = eps
        .iter()
        .map(|e| DriftSpec::combination(vec![(1.0, b.clone()), (*e, g.clone())]).unwrap())
        .collect();
    let w = noise(2, 2000, 1, 0.0, 1.0, 1e-2);
    let dom = SpaceTimeBox::cube(0.0, 1.0, 1, -5.0, 5.0);
    let rows = solver::stability_experiment(
        &[0.5],
        &b,
        &perturbed,
        &DiffusionSpec::identity(1),
        &w,
        &dom,
        Quadrature::default(),
    )
    .unwrap();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap.mean).collect();
    let slope = stats::loglog_slope(&eps, &gaps);
    verdict(
        (1.8..=2.2).contains(&slope),
        format!("slope {slope:.4} over ε = {eps:?}"),
    )
}

fn jacobian_oracle() -> Verdict {
    let b = DriftSpec::linear(vec![0.0, 1.0, -1.0, 0.0], 2).unwrap();
    let w = noise(3, 8, 2, 0.0, 1.0, 1e-4);
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
    let worst = (0..8)
        .map(|i| {
            ens.terminal_jacobian(i)
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    verdict(worst < 5e-3, format!("max ‖J - e^A‖_F = {worst:.2e}"))
}

fn bel_gradient() -> Verdict {
    let w = noise(4, 100_000, 1, 0.0, 1.0, DT);
    let sin = |x: &[f64]| x[0].sin();
    let g = variational::bel_gradient(
        &[0.0],
        &DriftSpec::zero(1),
        &DiffusionSpec::identity(1),
        &w,
        &sin,
        &VariationalOptions::default(),
    )
    .unwrap();
    let exact = (-0.5f64).exp();
    let sin_ok = (g.estimate[0] - exact).abs() < 3.0 * g.std_error[0];

    let b = ou_drift();
    let sigma = DiffusionSpec::identity(1);
    let w = noise(5, N_PATHS, 1, 0.0, 1.0, DT);
    let x0 = 0.3;
    let bel =
        variational::bel_gradient(&[x0], &b, &sigma, &w, &sin, &VariationalOptions::default())
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
        .map(|(u, d)| (u.sin() - d.sin()) / (2.0 * h))
        .collect();
    let fd = stats::mean_se(&fd);
    let combined = (bel.std_error[0].powi(2) + fd.std_error.powi(2)).sqrt();
    let ou_ok = (bel.estimate[0] - fd.mean).abs() < 3.0 * combined;
    verdict(
        sin_ok && ou_ok,
        format!(
            "sin {:.5} ± {:.5} (exact {exact:.5}); OU BEL {:.5} vs FD {:.5}, combined SE {combined:.5}",
            g.estimate[0], g.std_error[0], bel.estimate[0], fd.mean
        ),
    )
}

fn variation_of_constants() -> Verdict {
    let b = DriftSpec::closed(2, "smooth", |_, x, o: &mut [f64]| {
        o[0] = -x[0] + 0.5 * x[1].sin();
        o[1] = -x[1] + 0.5 * x[0].cos();
    })
    .with_gradient(|_, x, g: &mut [f64]| {
        g[0] = -1.0;
        g[1] = 0.5 * x[1].cos();
        g[2] = -0.5 * x[0].sin();
        g[3] = -1.0;
    });
    let sigma = DiffusionSpec::constant(vec![1.0, 0.2, 0.0, 0.9], 2).unwrap();
    let w = noise(6, 1000, 2, 0.0, 1.0, 1e-3);
    let v = vec![0.6, -0.8];
    let x0 = [0.5, -0.3];
    let opts = VariationalOptions {
        storage: Storage::Full,
        ..VariationalOptions::default()
    };
    let jac = variational::jacobian_flow(StartPoints::Shared(&x0), &b, &sigma, &w, &opts).unwrap();
    let mal = variational::malliavin_derivative(
        StartPoints::Shared(&x0),
        &b,
        &sigma,
        &w,
        &Direction::JacobianAligned(v.clone()),
        &opts,
    )
    .unwrap();
    let grid = w.grid();
    let mut worst: f64 = 0.0;
    for i in 0..w.n_paths() {
        for (j, &k) in jac.paths.stored_steps().iter().enumerate() {
            let jm = jac.jacobian(i, j);
            let frac = (grid.node(k) - grid.t_start()) / grid.horizon();
            let d = mal.derivative(i, j);
            for a in 0..2 {
                worst = worst.max((d[a] - frac * (jm[2 * a] * v[0] + jm[2 * a + 1] * v[1])).abs());
            }
        }
    }
    verdict(
        worst < 1e-2,
        format!("max |D_h X - J v| over grid = {worst:.2e}"),
    )
}

fn zvonkin_benchmark() -> Verdict {
    let b = DriftSpec::closed(1, "bump", |_, x, o: &mut [f64]| {
        o[0] = 0.5 * (-x[0] * x[0]).exp()
    })
    .with_gradient(|_, x, g: &mut [f64]| g[0] = -x[0] * (-x[0] * x[0]).exp());
    let sigma = DiffusionSpec::scaled_identity(1, 2f64.sqrt()).unwrap();
    let grid = CorrectorGrid {
        space: PeriodicGrid::new(vec![-8.0], 16.0, vec![512]).unwrap(),
        time_steps: 50,
    };
    let sol =
        zvonkin::solve_corrector_adaptive(&b, &sigma, 0.0, 0.1, &grid, PicardOptions::default(), 0)
            .unwrap();
    let (lo, hi) = zvonkin::bilipschitz_check(&sol, &zvonkin::sample_pairs(&sol, 1000, 6));
    let w = noise(7, 20_000, 1, 0.0, 0.1, DT);
    let r = zvonkin::drift_removal_check(
        &sol,
        StartPoints::Shared(&[0.0]),
        &w,
        &DriftRemovalOptions::default(),
    )
    .unwrap();
    let ok =
        sol.residual() < 1e-3 && lo >= 0.5 && hi <= 1.5 && r.bins_used > 0 && r.reduction <= 0.2;
    verdict(
        ok,
        format!(
            "residual {:.2e}, bi-Lipschitz [{lo:.4}, {hi:.4}], drift X {:.4} -> Y {:.4} (ratio {:.4})",
            sol.residual(),
            r.drift_x,
            r.drift_y,
            r.reduction
        ),
    )
}

fn volume_preservation() -> Verdict {
    let w = noise(8, 500, 2, 0.0, 0.5, 1e-2);
    let f = |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1])).exp();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, a) in [
        ("rotation", vec![0.0, -1.0, 1.0, 0.0]),
        ("shear", vec![0.0, 1.0, 0.0, 0.0]),
    ] {
        let b = DriftSpec::linear(a, 2).unwrap();
        let v = solver::volume_preservation_check(&b, 0.1, &f, &[-6.0, -6.0], &[6.0, 6.0], 40, &w)
            .unwrap();
        ok &= v.gap.abs() < 3.0 * v.combined_std_error;
        parts.push(format!(
            "{name} |gap| {:.2e} vs 3 SE {:.2e}",
            v.gap.abs(),
            3.0 * v.combined_std_error
        ));
    }
    verdict(ok, parts.join("; "))
}

fn kernel_suite_check() -> Verdict {
    let e = KernelTestExperiment {
        name: "kernels".into(),
        nodes: 64,
        length: 2.0 * PI,
        circulation: 1.0,
        delta: None,
        radii: None,
    };
    let r = kernel_suite(&e).unwrap();
    let vortex = r
        .point_vortex
        .iter()
        .filter(|(m, _)| *m >= 3.0)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    let ok = r.gradient_annihilation < 1e-10
        && r.two_mode_decomposition < 1e-10
        && r.idempotence < 1e-12
        && r.curl_biot_savart_2d < 1e-8
        && r.curl_biot_savart_3d < 1e-8
        && vortex < 0.01;
    verdict(
        ok,
        format!(
            "gradient {:.1e}, idempotence {:.1e}, curl∘BS {:.1e}/{:.1e}, point vortex {:.2e}",
            r.gradient_annihilation,
            r.idempotence,
            r.curl_biot_savart_2d,
            r.curl_biot_savart_3d,
            vortex
        ),
    )
}

fn taylor_green_fixed_point() -> Verdict {
    let g = PeriodicGrid::cube(2, 2.0 * PI, 32).unwrap();
    let phi = nse::taylor_green(&g).unwrap();
    let nu = 0.1;
    let params = EnsembleParams {
        n_paths: 2000,
        dt: 5e-3,
        seed: 9,
    };
    let s = match nse::fixed_point_solve(&phi, nu, -0.25, params, NsOptions::default()) {
        Ok(s) => s,
        Err(e) => return verdict(false, e.to_string()),
    };
    let worst = s
        .velocity
        .levels()
        .iter()
        .enumerate()
        .map(|(k, level)| {
            let exact = phi.scaled((-2.0 * nu * s.velocity.time().node(k).abs()).exp());
            level.sub(&exact).unwrap().norm_lp(2.0) / exact.norm_lp(2.0)
        })
        .fold(0.0, f64::max);
    let decreasing = s.distances.windows(2).all(|w| w[1] < w[0]);
    verdict(
        s.converged && decreasing && worst <= 0.05,
        format!(
            "converged {} after {} iterations, distances {:?}, worst relative L² error {worst:.4}",
            s.converged,
            s.distances.len(),
            s.distances
                .iter()
                .map(|d| format!("{d:.2e}"))
                .collect::<Vec<_>>()
        ),
    )
}

const DETERMINISM_CONFIGS: &[(&str, &str)] = &[
    (
        "simulate",
        r#"{"experiments":[{"name":"ou","drift":{"type":"linear","matrix":[[-1]]},
            "diffusion":{"type":"scaled","dim":1,"scale":1.4142135623730951},"x0":[1],"t_end":1,
            "dt":0.01,"n_paths":500,"storage":"full","save_noise":true}]}"#,
    ),
    (
        "stability",
        r#"{"experiments":[{"name":"st","drift":{"type":"linear","matrix":[[-1]]},
            "perturbation":{"type":"wave","amplitude":[1],"frequency":1},"epsilons":[0.4,0.2],
            "diffusion":{"type":"identity","dim":1},"x0":[0.5],"t_end":1,"dt":0.02,"n_paths":200,
            "integrability":{"p":2,"q":2},"norm_lower":[-5],"norm_upper":[5]}]}"#,
    ),
    (
        "gradient",
        r#"{"experiments":[{"name":"sin","drift":{"type":"zero","dim":1},"diffusion":{"type":"identity","dim":1},
            "x0":[0],"horizon":1,"dt":0.01,"n_paths":2000,"function":{"type":"sin"}}]}"#,
    ),
    (
        "jacobian",
        r#"{"experiments":[{"name":"rot","drift":{"type":"rotation"},"diffusion":{"type":"identity","dim":2},
            "x0":[0.3,0.1],"horizon":1,"dt":0.01,"n_paths":200,"moments":[2,4]}]}"#,
    ),
    (
        "zvonkin",
        r#"{"experiments":[{"name":"z","drift":{"type":"bump","amplitude":[0.5],"width":1},
            "diffusion":{"type":"scaled","dim":1,"scale":1.4142135623730951},"s0":0.1,
            "grid":{"origin":[-8],"length":16,"nodes":128,"dim":1},
            "drift_check":{"x0":[0],"n_paths":500,"dt":0.01,"min_count":10}}]}"#,
    ),
    (
        "nse-solve",
        r#"{"experiments":[{"name":"tg","initial":{"type":"taylor_green"},"nu":0.1,"horizon":0.05,
            "nodes":8,"n_paths":20,"dt":0.025,"vorticity":true}]}"#,
    ),
    (
        "nse-kernel-test",
        r#"{"experiments":[{"name":"k","nodes":32}]}"#,
    ),
];

/// Runs the binary and returns the data files (everything but the manifest).
fn cli_run(
    dir: &Path,
    cmd: &str,
    config: &Path,
    workers: usize,
) -> Result<Vec<(String, Vec<u8>)>, String> {
    let out = dir.join(format!("{cmd}-{workers}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&out);
    let status = Command::new(env!("CARGO_BIN_EXE_sdeflow"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .args(["--seed", "42", "--workers", &workers.to_string(), "--out"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!(
            "{cmd} exited with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .map(|n| {
            let bytes = std::fs::read(out.join(&n)).unwrap_or_default();
            (n, bytes)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Verdict {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut files = 0;
    for (cmd, text) in DETERMINISM_CONFIGS {
        let config = dir.path().join(format!("{cmd}.json"));
        if let Err(e) = std::fs::write(&config, text) {
            return verdict(false, e.to_string());
        }
        let runs: Result<Vec<_>, String> = [1, 1, 2]
            .iter()
            .map(|&w| cli_run(dir.path(), cmd, &config, w))
            .collect();
        match runs {
            Err(e) => return verdict(false, e),
            Ok(r) => {
                if r[0].is_empty() || r[0] != r[1] || r[0] != r[2] {
                    return verdict(false, format!("{cmd}: outputs differ between runs"));
                }
                files += r[0].len();
            }
        }
    }
    verdict(
        true,
        format!("{} subcommands, {files} data files byte-identical over three runs (1, 1 and 2 workers)", DETERMINISM_CONFIGS.len()),
    )
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("OU benchmark", Duration::from_secs(60), ou_benchmark),
        (
            "stability scaling",
            Duration::from_secs(120),
            stability_scaling,
        ),
        ("Jacobian oracle", Duration::from_secs(10), jacobian_oracle),
        ("BEL gradient", Duration::from_secs(60), bel_gradient),
        (
            "variation of constants",
            Duration::from_secs(30),
            variation_of_constants,
        ),
        (
            "Zvonkin transform",
            Duration::from_secs(120),
            zvonkin_benchmark,
        ),
        (
            "volume preservation",
            Duration::from_secs(60),
            volume_preservation,
        ),
        (
            "Leray/Biot-Savart kernels",
            Duration::from_secs(10),
            kernel_suite_check,
        ),
        (
            "Navier-Stokes fixed point",
            Duration::from_secs(15 * 60),
            taylor_green_fixed_point,
        ),
        ("CLI determinism", Duration::from_secs(300), determinism),
    ];
    let workers = rayon::current_num_threads();
    println!("acceptance suite ({workers} worker thread(s))");
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = run();
        let took = start.elapsed();
        let ok = v.ok && took <= *budget;
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1} s / {} s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
