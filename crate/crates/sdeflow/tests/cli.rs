use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdeflow::io::{self, GridFile};
use serde_json::Value;

fn sdeflow(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeflow"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr_payload(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("JSON payload on stderr");
    serde_json::from_str(line).unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn value(rows: &[io::ResultRow], parameter: &str, statistic: &str) -> f64 {
    rows.iter()
        .find(|r| r.parameter == parameter && r.statistic == statistic)
        .unwrap_or_else(|| panic!("no row {parameter}/{statistic}"))
        .value
}

const OU: &str = r#"{"experiments":[{"name":"ou","drift":{"type":"linear","matrix":[[-1]]},
    "diffusion":{"type":"scaled","dim":1,"scale":1.4142135623730951},"x0":[1],"t_end":1,
    "dt":0.01,"n_paths":2000,"save_noise":true}]}"#;

#[test]
fn simulate_writes_results_manifest_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou.json", OU);
    let out = dir.path().join("out");
    let o = sdeflow("simulate", &cfg, &out, &["--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "manifest.json", "ou.noise"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = manifest(&out);
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 3);
    assert!(m["created_unix"].as_u64().unwrap() > 0);
    assert!(m.get("git_revision").is_some());
    assert_eq!(m["config"]["experiments"][0]["name"], "ou");

    let rows = io::rows_from_csv(&std::fs::read(out.join("results.csv")).unwrap()).unwrap();
    let mean = rows.iter().find(|r| r.statistic == "mean").unwrap();
    let se = mean.std_error.unwrap();
    assert!(
        (mean.value - (-1f64).exp()).abs() < 4.0 * se + 0.01,
        "{mean:?}"
    );

    // replaying the saved increments reproduces the run exactly
    let replay = format!(
        r#"{{"experiments":[{{"name":"ou","drift":{{"type":"linear","matrix":[[-1]]}},
        "diffusion":{{"type":"scaled","dim":1,"scale":1.4142135623730951}},"x0":[1],"t_end":1,
        "noise_file":{}}}]}}"#,
        serde_json::to_string(&out.join("ou.noise")).unwrap()
    );
    let cfg2 = write_config(dir.path(), "replay.json", &replay);
    let out2 = dir.path().join("replay");
    let o = sdeflow("simulate", &cfg2, &out2, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(out.join("results.csv")).unwrap(),
        std::fs::read(out2.join("results.csv")).unwrap()
    );
}

#[test]
fn results_do_not_depend_on_the_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou.json", OU);
    let runs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|w| {
            let out = dir.path().join(format!("w{w}"));
            assert!(sdeflow(
                "simulate",
                &cfg,
                &out,
                &["--workers", w, "--format", "json"]
            )
            .status
            .success());
            std::fs::read(out.join("results.json")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let parsed: Value = serde_json::from_slice(&runs[0]).unwrap();
    assert!(parsed.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn empty_experiment_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.json", r#"{"experiments":[]}"#);
    let out = dir.path().join("out");
    let o = sdeflow("gradient", &cfg, &out, &[]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad_time = write_config(
        dir.path(),
        "t.json",
        r#"{"experiments":[{"name":"x","drift":{"type":"zero","dim":1},"diffusion":{"type":"identity","dim":1},"x0":[0],"t_end":-1}]}"#,
    );
    let o = sdeflow("simulate", &bad_time, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_payload(&o)["error"], "config");

    let unknown = write_config(
        dir.path(),
        "u.json",
        r#"{"experiments":[{"name":"k","bogus":1}]}"#,
    );
    let o = sdeflow("nse-kernel-test", &unknown, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let p = stderr_payload(&o);
    assert!(
        p["field"].as_str().unwrap().starts_with("experiments[0]"),
        "{p}"
    );

    let o = sdeflow("simulate", &dir.path().join("missing.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = sdeflow(
        "nse-kernel-test",
        &write_config(
            dir.path(),
            "ok.json",
            r#"{"experiments":[{"name":"k","nodes":16}]}"#,
        ),
        &out,
        &["--workers", "0"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "z.json",
        r#"{"experiments":[{"name":"z","drift":{"type":"bump","amplitude":[40],"width":1},
            "diffusion":{"type":"scaled","dim":1,"scale":1.4142135623730951},"s0":1,
            "grid":{"origin":[-8],"length":16,"nodes":128,"dim":1},"max_halvings":0}]}"#,
    );
    let out = dir.path().join("out");
    let o = sdeflow("zvonkin", &cfg, &out, &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let p = stderr_payload(&o);
    assert!(
        p["error"] == "interval_too_long" || p["error"] == "lipschitz_too_large",
        "{p}"
    );
    assert_eq!(p["experiment"], "z");
    assert!(!out.exists());
}

#[test]
fn unwritable_output_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "k.json",
        r#"{"experiments":[{"name":"k","nodes":16}]}"#,
    );
    let blocker = write_config(dir.path(), "file", "");
    let o = sdeflow("nse-kernel-test", &cfg, &blocker.join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_payload(&o)["error"], "io");
}

#[test]
fn gradient_json_matches_the_gaussian_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "g.json",
        r#"{"experiments":[{"name":"sin","drift":{"type":"zero","dim":1},"diffusion":{"type":"identity","dim":1},
            "x0":[0],"horizon":1,"dt":0.01,"n_paths":100000,"function":{"type":"sin"}}]}"#,
    );
    let out = dir.path().join("out");
    assert!(sdeflow("gradient", &cfg, &out, &[]).status.success());
    let g: Value =
        serde_json::from_slice(&std::fs::read(out.join("sin.gradient.json")).unwrap()).unwrap();
    let (est, se) = (
        g["estimate"][0].as_f64().unwrap(),
        g["std_error"][0].as_f64().unwrap(),
    );
    assert!((est - (-0.5f64).exp()).abs() < 3.0 * se, "{g}");
    assert_eq!(g["n_paths"], 100000);
    assert_eq!(g["horizon"], 1.0);
    assert!(g.get("point").is_some() && g.get("dt").is_some());
}

#[test]
fn stability_manifest_records_the_slope() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"experiments":[{"name":"ou","drift":{"type":"linear","matrix":[[-1]]},
            "perturbation":{"type":"wave","amplitude":[1],"frequency":1},"epsilons":[0.4,0.2,0.1,0.05],
            "diffusion":{"type":"identity","dim":1},"x0":[0.5],"t_end":1,"dt":0.01,"n_paths":1000,
            "integrability":{"p":2,"q":2},"norm_lower":[-5],"norm_upper":[5]}]}"#,
    );
    let out = dir.path().join("out");
    assert!(sdeflow("stability", &cfg, &out, &[]).status.success());
    let slope = manifest(&out)["experiments"][0]["slope"].as_f64().unwrap();
    assert!((1.8..=2.2).contains(&slope), "{slope}");
    let rows = io::rows_from_csv(&std::fs::read(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(value(&rows, "fit", "slope"), slope);
}

#[test]
fn zvonkin_and_nse_export_readable_grids() {
    let dir = tempfile::tempdir().unwrap();
    let z = write_config(
        dir.path(),
        "z.json",
        r#"{"experiments":[{"name":"z","drift":{"type":"bump","amplitude":[0.5],"width":1},
            "diffusion":{"type":"scaled","dim":1,"scale":1.4142135623730951},"s0":0.1,
            "grid":{"origin":[-8],"length":16,"nodes":256,"dim":1},"export_format":"binary"}]}"#,
    );
    let out = dir.path().join("z");
    assert!(sdeflow("zvonkin", &z, &out, &[]).status.success());
    let u = GridFile::read(&out.join("z_corrector.grid"))
        .unwrap()
        .to_field()
        .unwrap();
    assert_eq!(u.grid().shape(), &[256]);
    let rows = io::rows_from_csv(&std::fs::read(out.join("results.csv")).unwrap()).unwrap();
    assert!(value(&rows, "corrector", "residual") < 1e-3);
    let lo = value(&rows, "phi", "bilipschitz_min");
    let hi = value(&rows, "phi", "bilipschitz_max");
    assert!(lo >= 0.5 && hi <= 1.5);

    let n = write_config(
        dir.path(),
        "n.json",
        r#"{"experiments":[{"name":"tg","initial":{"type":"taylor_green"},"nu":0.1,"horizon":0.05,
            "nodes":16,"n_paths":50,"dt":0.025}]}"#,
    );
    let out = dir.path().join("n");
    let o = sdeflow("nse-solve", &n, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = GridFile::read(&out.join("tg_velocity.csv"))
        .unwrap()
        .to_field()
        .unwrap();
    assert_eq!(v.components(), 2);
    assert!(v.max_divergence().unwrap() < 1e-8);
    assert!(out.join("tg_vorticity.csv").exists());
    let m = manifest(&out);
    assert!(m["experiments"][0]["distances"]
        .as_array()
        .is_some_and(|d| !d.is_empty()));
}
