//! One runner per subcommand. Runners only compute; writing happens in
//! [`crate::write_outputs`] so that a failed run leaves no partial files.

use std::f64::consts::PI;
use std::path::Path;

use sdeflow_core::fields::{Quadrature, SpaceTimeBox};
use sdeflow_core::nse::{self, EnsembleParams, NsOptions, VortexBlobs};
use sdeflow_core::paths::Storage;
use sdeflow_core::solver::{self, SolverOptions, StartPoints};
use sdeflow_core::spectral::{GridField, PeriodicGrid};
use sdeflow_core::variational::{self, GradientPolicy, VariationalOptions};
use sdeflow_core::zvonkin::{self, CorrectorGrid, DriftRemovalOptions, PicardOptions};
use sdeflow_core::{stats, BrownianEnsemble, DiffusionSpec, DriftSpec, NoiseSource, TimeGrid};
use serde_json::{json, Value};

use crate::config::*;
use crate::error::{CliError, Result};
use crate::io::{self, GradientJson, GridFile, ResultRow};

/// A file produced by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Everything a run produced, in experiment order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub rows: Vec<ResultRow>,
    pub artifacts: Vec<Artifact>,
    /// Per-experiment manifest entries.
    pub experiments: Vec<Value>,
}

pub(crate) struct Ctx<'a> {
    pub seed: u64,
    pub base: &'a Path,
}

fn field(i: usize, name: &str) -> String {
    format!("experiments[{i}].{name}")
}

fn system(
    i: usize,
    drift: &DriftConfig,
    diffusion: &DiffusionConfig,
    x0: &[f64],
    base: &Path,
) -> Result<(DriftSpec, DiffusionSpec)> {
    let b = drift.build(&field(i, "drift"), base)?;
    let s = diffusion.build(&field(i, "diffusion"))?;
    ensure(
        s.dim() == b.dim(),
        field(i, "diffusion"),
        "diffusion and drift dimensions differ",
    )?;
    ensure(
        x0.len() == b.dim(),
        field(i, "x0"),
        "x0 has the wrong dimension",
    )?;
    Ok((b, s))
}

fn time_grid(i: usize, t_start: f64, t_end: f64, dt: f64) -> Result<TimeGrid> {
    ensure(
        dt > 0.0 && dt.is_finite(),
        field(i, "dt"),
        "dt must be positive",
    )?;
    ensure(
        t_end > t_start,
        field(i, "t_end"),
        "the horizon must be positive",
    )?;
    TimeGrid::with_step(t_start, t_end, dt)
        .map_err(|e| CliError::config(field(i, "dt"), e.to_string()))
}

fn ensemble(
    i: usize,
    seed: u64,
    n_paths: usize,
    dim: usize,
    grid: TimeGrid,
) -> Result<BrownianEnsemble> {
    ensure(n_paths > 0, field(i, "n_paths"), "n_paths must be positive")?;
    BrownianEnsemble::generate(seed, n_paths, dim, grid)
        .map_err(|e| CliError::config(field(i, "n_paths"), e.to_string()))
}

fn unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (i, n) in names.enumerate() {
        ensure(!n.is_empty(), field(i, "name"), "name must be non-empty")?;
        ensure(
            n.chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                && !n.starts_with('.'),
            field(i, "name"),
            "name may only use letters, digits, '-', '_' and '.'",
        )?;
        ensure(
            seen.insert(n.to_string()),
            field(i, "name"),
            "duplicate experiment name",
        )?;
    }
    Ok(())
}

fn grid_artifact(name: String, f: &GridField, format: GridFormat) -> Result<Artifact> {
    let file = GridFile::from_field(f);
    Ok(match format {
        GridFormat::Csv => Artifact {
            name: format!("{name}.csv"),
            bytes: file.to_csv()?,
        },
        GridFormat::Binary => Artifact {
            name: format!("{name}.grid"),
            bytes: file.to_binary()?,
        },
    })
}

pub(crate) fn simulate(cfg: &Config<SimulateExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        let (b, sigma) = system(i, &e.drift, &e.diffusion, &e.x0, ctx.base)?;
        let seed = e.seed.unwrap_or(ctx.seed);
        let noise: Box<dyn NoiseSource> = match &e.noise_file {
            Some(p) => {
                let path = ctx.base.join(p);
                let bytes = std::fs::read(&path).map_err(|err| CliError::io(&path, err))?;
                let stored = io::read_noise(&bytes)?;
                ensure(
                    stored.dim() == b.dim(),
                    field(i, "noise_file"),
                    "noise dimension differs from the drift",
                )?;
                Box::new(stored)
            }
            None => {
                let grid = time_grid(i, e.t_start, e.t_end, e.dt)?;
                Box::new(ensemble(i, seed, e.n_paths, b.dim(), grid)?)
            }
        };
        let storage = match e.storage {
            StorageConfig::Terminal => Storage::Terminal,
            StorageConfig::Full => Storage::Full,
        };
        let ens = solver::euler_maruyama(
            StartPoints::Shared(&e.x0),
            &b,
            &sigma,
            noise.as_ref(),
            SolverOptions {
                storage,
                ..SolverOptions::default()
            },
        )
        .map_err(|err| CliError::from_core(&e.name, err))?;
        let d = ens.dim();
        let terminal = ens.terminal_states();
        let n = ens.n_paths();
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|p| terminal[p * d + c]).collect();
            let m = stats::mean_se(&col);
            let v = stats::variance_se(&col);
            out.rows.push(
                ResultRow::new(&e.name, format!("x[{c}]"), "mean", m.mean).with_se(m.std_error),
            );
            out.rows.push(
                ResultRow::new(&e.name, format!("x[{c}]"), "variance", v.mean).with_se(v.std_error),
            );
        }
        out.rows.push(ResultRow::new(
            &e.name,
            "paths",
            "flagged",
            ens.flagged() as f64,
        ));
        let grid = noise.grid();
        if storage == Storage::Full {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["path".to_string(), "step".into(), "time".into()];
            header.extend((0..d).map(|c| format!("x{c}")));
            w.write_record(&header)
                .map_err(|e| CliError::format("paths csv", e.to_string()))?;
            for p in 0..n {
                for (j, &k) in ens.stored_steps().iter().enumerate() {
                    let mut rec = vec![p.to_string(), k.to_string(), grid.node(k).to_string()];
                    rec.extend(ens.state(p, j).iter().map(|v| v.to_string()));
                    w.write_record(&rec)
                        .map_err(|e| CliError::format("paths csv", e.to_string()))?;
                }
            }
            out.artifacts.push(Artifact {
                name: format!("{}_paths.csv", e.name),
                bytes: w
                    .into_inner()
                    .map_err(|e| CliError::format("paths csv", e.to_string()))?,
            });
        }
        if e.save_noise {
            out.artifacts.push(Artifact {
                name: format!("{}.noise", e.name),
                bytes: io::write_noise(noise.as_ref()),
            });
        }
        out.experiments.push(json!({
            "name": e.name,
            "seed": noise.seed(),
            "n_paths": n,
            "steps": grid.steps(),
            "dt": grid.dt(),
            "flagged": ens.flagged(),
        }));
    }
    Ok(out)
}

pub(crate) fn stability(cfg: &Config<StabilityExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        let (b, sigma) = system(i, &e.drift, &e.diffusion, &e.x0, ctx.base)?;
        let integ = e.integrability.build(&field(i, "integrability"))?;
        let b = b.with_integrability(integ);
        let g = e.perturbation.build(&field(i, "perturbation"), ctx.base)?;
        ensure(
            g.dim() == b.dim(),
            field(i, "perturbation"),
            "perturbation dimension differs from the drift",
        )?;
        ensure(
            !e.epsilons.is_empty(),
            field(i, "epsilons"),
            "need at least one epsilon",
        )?;
        ensure(
            e.epsilons.iter().all(|x| *x > 0.0 && x.is_finite()),
            field(i, "epsilons"),
            "epsilons must be positive",
        )?;
        ensure(
            e.quadrature_nodes > 0,
            field(i, "quadrature_nodes"),
            "need at least one node",
        )?;
        let perturbed = e
            .epsilons
            .iter()
            .map(|eps| DriftSpec::combination(vec![(1.0, b.clone()), (*eps, g.clone())]))
            .collect::<sdeflow_core::Result<Vec<_>>>()
            .map_err(|err| CliError::from_core(&e.name, err))?;
        let grid = time_grid(i, e.t_start, e.t_end, e.dt)?;
        let seed = e.seed.unwrap_or(ctx.seed);
        let noise = ensemble(i, seed, e.n_paths, b.dim(), grid)?;
        let domain = SpaceTimeBox::new(
            e.t_start,
            e.t_end,
            e.norm_lower.clone(),
            e.norm_upper.clone(),
        )
        .map_err(|err| CliError::config(field(i, "norm_lower"), err.to_string()))?;
        ensure(
            domain.dim() == b.dim(),
            field(i, "norm_lower"),
            "norm box has the wrong dimension",
        )?;
        let quad = Quadrature {
            space_nodes: e.quadrature_nodes,
            time_nodes: e.quadrature_nodes,
        };
        let rows =
            solver::stability_experiment(&e.x0, &b, &perturbed, &sigma, &noise, &domain, quad)
                .map_err(|err| CliError::from_core(&e.name, err))?;
        for (eps, r) in e.epsilons.iter().zip(&rows) {
            let p = format!("eps={eps}");
            out.rows.push(ResultRow::new(
                &e.name,
                p.clone(),
                "drift_distance",
                r.drift_distance,
            ));
            out.rows
                .push(ResultRow::new(&e.name, p, "gap", r.gap.mean).with_se(r.gap.std_error));
        }
        let gaps: Vec<f64> = rows.iter().map(|r| r.gap.mean).collect();
        let slope = (e.epsilons.len() >= 2 && gaps.iter().all(|g| *g > 0.0))
            .then(|| stats::loglog_slope(&e.epsilons, &gaps));
        if let Some(s) = slope {
            out.rows.push(ResultRow::new(&e.name, "fit", "slope", s));
        }
        out.experiments.push(json!({
            "name": e.name,
            "seed": seed,
            "epsilons": e.epsilons,
            "slope": slope,
            "n_paths": e.n_paths,
            "dt": grid.dt(),
        }));
    }
    Ok(out)
}

pub(crate) fn gradient(cfg: &Config<GradientExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        let (b, sigma) = system(i, &e.drift, &e.diffusion, &e.x0, ctx.base)?;
        let f = e.function.build(&field(i, "function"), b.dim())?;
        ensure(
            e.horizon > 0.0,
            field(i, "horizon"),
            "horizon must be positive",
        )?;
        let grid = time_grid(i, e.t_start, e.t_start + e.horizon, e.dt)?;
        let seed = e.seed.unwrap_or(ctx.seed);
        let noise = ensemble(i, seed, e.n_paths, b.dim(), grid)?;
        let opts = VariationalOptions {
            gradients: if e.require_exact_gradients {
                GradientPolicy::RequireExact
            } else {
                GradientPolicy::AllowFiniteDifference
            },
            ..VariationalOptions::default()
        };
        let est = variational::bel_gradient(&e.x0, &b, &sigma, &noise, f.as_ref(), &opts)
            .map_err(|err| CliError::from_core(&e.name, err))?;
        for (c, (v, se)) in est.estimate.iter().zip(&est.std_error).enumerate() {
            out.rows
                .push(ResultRow::new(&e.name, format!("d/dx[{c}]"), "gradient", *v).with_se(*se));
        }
        out.rows.push(ResultRow::new(
            &e.name,
            "paths",
            "flagged",
            est.n_flagged as f64,
        ));
        out.artifacts.push(Artifact {
            name: format!("{}.gradient.json", e.name),
            bytes: io::to_json_bytes(&GradientJson::from(&est)),
        });
        out.experiments.push(json!({
            "name": e.name,
            "seed": seed,
            "n_paths": est.n_paths,
            "dt": est.dt,
            "flagged": est.n_flagged,
        }));
    }
    Ok(out)
}

pub(crate) fn jacobian(cfg: &Config<JacobianExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        let (b, sigma) = system(i, &e.drift, &e.diffusion, &e.x0, ctx.base)?;
        ensure(
            e.horizon > 0.0,
            field(i, "horizon"),
            "horizon must be positive",
        )?;
        ensure(
            e.moments.iter().all(|p| *p > 0.0),
            field(i, "moments"),
            "moment exponents must be positive",
        )?;
        let grid = time_grid(i, e.t_start, e.t_start + e.horizon, e.dt)?;
        let seed = e.seed.unwrap_or(ctx.seed);
        let noise = ensemble(i, seed, e.n_paths, b.dim(), grid)?;
        let ens = variational::jacobian_flow(
            StartPoints::Shared(&e.x0),
            &b,
            &sigma,
            &noise,
            &VariationalOptions::default(),
        )
        .map_err(|err| CliError::from_core(&e.name, err))?;
        let d = b.dim();
        for (k, m) in ens.mean_terminal_jacobian().iter().enumerate() {
            out.rows.push(
                ResultRow::new(&e.name, format!("J[{}][{}]", k / d, k % d), "mean", m.mean)
                    .with_se(m.std_error),
            );
        }
        for p in &e.moments {
            let m = ens.sup_moment(*p);
            out.rows.push(
                ResultRow::new(&e.name, format!("p={p}"), "sup_moment", m.mean)
                    .with_se(m.std_error),
            );
        }
        out.rows.push(ResultRow::new(
            &e.name,
            "paths",
            "flagged",
            ens.paths.flagged() as f64,
        ));
        out.experiments.push(json!({
            "name": e.name,
            "seed": seed,
            "n_paths": e.n_paths,
            "dt": grid.dt(),
        }));
    }
    Ok(out)
}

pub(crate) fn zvonkin(cfg: &Config<ZvonkinExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        let d = e.grid.dim;
        let b = e.drift.build(&field(i, "drift"), ctx.base)?;
        let sigma = e.diffusion.build(&field(i, "diffusion"))?;
        ensure(
            b.dim() == d && sigma.dim() == d,
            field(i, "grid.dim"),
            "grid, drift and diffusion dimensions differ",
        )?;
        ensure(e.s0 > e.t0, field(i, "s0"), "s0 must exceed t0")?;
        let origin = e.grid.origin.clone().unwrap_or_else(|| vec![0.0; d]);
        let space = PeriodicGrid::new(origin, e.grid.length, vec![e.grid.nodes; d])
            .map_err(|err| CliError::config(field(i, "grid"), err.to_string()))?;
        let cg = CorrectorGrid {
            space,
            time_steps: e.time_steps,
        };
        let opts = PicardOptions {
            tol: e.tol,
            max_iter: e.max_iter,
        };
        let sol =
            zvonkin::solve_corrector_adaptive(&b, &sigma, e.t0, e.s0, &cg, opts, e.max_halvings)
                .map_err(|err| CliError::from_core(&e.name, err))?;
        let seed = e.seed.unwrap_or(ctx.seed);
        let (t0, s0) = sol.interval();
        let pairs = zvonkin::sample_pairs(&sol, e.bilipschitz_pairs, seed);
        let (lo, hi) = zvonkin::bilipschitz_check(&sol, &pairs);
        let n = &e.name;
        out.rows.push(ResultRow::new(n, "interval", "start", t0));
        out.rows.push(ResultRow::new(n, "interval", "end", s0));
        out.rows.push(ResultRow::new(
            n,
            "picard",
            "iterations",
            sol.iterations() as f64,
        ));
        out.rows.push(ResultRow::new(
            n,
            "picard",
            "converged",
            sol.converged() as u8 as f64,
        ));
        out.rows
            .push(ResultRow::new(n, "corrector", "residual", sol.residual()));
        out.rows
            .push(ResultRow::new(n, "corrector", "lipschitz", sol.lipschitz()));
        out.rows
            .push(ResultRow::new(n, "phi", "bilipschitz_min", lo));
        out.rows
            .push(ResultRow::new(n, "phi", "bilipschitz_max", hi));
        let mut summary = json!({
            "name": e.name,
            "seed": seed,
            "interval": [t0, s0],
            "iterations": sol.iterations(),
            "converged": sol.converged(),
            "residual": sol.residual(),
            "lipschitz": sol.lipschitz(),
        });
        if let Some(dc) = &e.drift_check {
            ensure(
                dc.x0.len() == d,
                field(i, "drift_check.x0"),
                "x0 has the wrong dimension",
            )?;
            ensure(
                dc.dt > 0.0,
                field(i, "drift_check.dt"),
                "dt must be positive",
            )?;
            let grid = TimeGrid::with_step(t0, s0, dc.dt)
                .map_err(|err| CliError::config(field(i, "drift_check.dt"), err.to_string()))?;
            let noise = ensemble(i, seed, dc.n_paths, d, grid)?;
            let opts = DriftRemovalOptions {
                bins: dc.bins,
                min_count: dc.min_count,
                region: None,
            };
            let r = zvonkin::drift_removal_check(&sol, StartPoints::Shared(&dc.x0), &noise, &opts)
                .map_err(|err| CliError::from_core(&e.name, err))?;
            out.rows
                .push(ResultRow::new(n, "X", "drift", r.drift_x).with_se(r.drift_x_se));
            out.rows
                .push(ResultRow::new(n, "Y", "drift", r.drift_y).with_se(r.drift_y_se));
            out.rows
                .push(ResultRow::new(n, "Y/X", "reduction", r.reduction));
            out.rows
                .push(ResultRow::new(n, "bins", "used", r.bins_used as f64));
            summary["drift_reduction"] = json!(r.reduction);
        }
        if e.export {
            out.artifacts.push(grid_artifact(
                format!("{n}_corrector"),
                sol.corrector(0),
                e.export_format,
            )?);
            out.artifacts.push(grid_artifact(
                format!("{n}_corrector_gradient"),
                sol.corrector_gradient(0),
                e.export_format,
            )?);
        }
        out.experiments.push(summary);
    }
    Ok(out)
}

pub(crate) fn nse_solve(cfg: &Config<NseSolveExperiment>, ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        ensure(e.nu > 0.0, field(i, "nu"), "viscosity must be positive")?;
        ensure(
            e.horizon > 0.0,
            field(i, "horizon"),
            "horizon |T| must be positive",
        )?;
        ensure(
            e.n_paths > 0,
            field(i, "n_paths"),
            "n_paths must be positive",
        )?;
        ensure(e.dt > 0.0, field(i, "dt"), "dt must be positive")?;
        let (phi, exact) = match &e.initial {
            InitialVelocity::TaylorGreen => {
                let g = PeriodicGrid::cube(2, 2.0 * PI, e.nodes)
                    .map_err(|err| CliError::config(field(i, "nodes"), err.to_string()))?;
                (
                    nse::taylor_green(&g).map_err(|err| CliError::from_core(&e.name, err))?,
                    true,
                )
            }
            InitialVelocity::File { path } => {
                (GridFile::read(&ctx.base.join(path))?.to_field()?, false)
            }
        };
        let seed = e.seed.unwrap_or(ctx.seed);
        let params = EnsembleParams {
            n_paths: e.n_paths,
            dt: e.dt,
            seed,
        };
        let opts = NsOptions {
            tol: e.tol,
            max_iter: e.max_iter,
            p: e.p,
        };
        let state = nse::fixed_point_solve(&phi, e.nu, -e.horizon, params, opts)
            .map_err(|err| CliError::from_core(&e.name, err))?;
        let n = &e.name;
        for (m, dist) in state.distances.iter().enumerate() {
            out.rows.push(ResultRow::new(
                n,
                format!("iteration={}", m + 1),
                "distance",
                *dist,
            ));
        }
        for (m, r) in state.contraction_ratios().iter().enumerate() {
            out.rows.push(ResultRow::new(
                n,
                format!("iteration={}", m + 2),
                "contraction_ratio",
                *r,
            ));
        }
        out.rows.push(ResultRow::new(
            n,
            "fixed_point",
            "converged",
            state.converged as u8 as f64,
        ));
        out.rows.push(ResultRow::new(
            n,
            "velocity",
            "max_divergence",
            state.velocity.max_divergence(),
        ));
        out.rows
            .push(ResultRow::new(n, "phi", "w1p_norm", state.phi_w1p));
        let time = *state.velocity.time();
        let mut summary = json!({
            "name": e.name,
            "seed": seed,
            "nu": e.nu,
            "T": time.t_start(),
            "grid": { "shape": phi.grid().shape(), "length": phi.grid().length() },
            "n_paths": e.n_paths,
            "dt": time.dt(),
            "distances": state.distances,
            "converged": state.converged,
        });
        if exact {
            let mut worst: f64 = 0.0;
            for k in 0..=time.steps() {
                let ex = phi.scaled((-2.0 * e.nu * time.node(k).abs()).exp());
                let err = state
                    .velocity
                    .level(k)
                    .sub(&ex)
                    .map_err(|err| CliError::from_core(n, err))?;
                worst = worst.max(err.norm_lp(2.0) / ex.norm_lp(2.0));
            }
            out.rows.push(ResultRow::new(
                n,
                "taylor_green",
                "relative_l2_error",
                worst,
            ));
            summary["relative_l2_error"] = json!(worst);
        }
        let u_t = state.velocity.level(0);
        let curl = u_t.curl().map_err(|err| CliError::from_core(n, err))?;
        out.artifacts.push(grid_artifact(
            format!("{n}_velocity"),
            u_t,
            e.export_format,
        )?);
        out.artifacts.push(grid_artifact(
            format!("{n}_vorticity"),
            &curl,
            e.export_format,
        )?);
        if e.vorticity {
            let d = phi.grid().dim();
            let omega0 = phi.curl().map_err(|err| CliError::from_core(n, err))?;
            let noise = BrownianEnsemble::generate(seed, e.n_paths, d, time)
                .map_err(|err| CliError::from_core(n, err))?;
            let w = nse::vorticity_representation(&state.velocity, &omega0, e.nu, 0, &noise)
                .map_err(|err| CliError::from_core(n, err))?;
            let gap = w
                .sub(&curl)
                .map_err(|err| CliError::from_core(n, err))?
                .norm_lp(2.0)
                / curl.norm_lp(2.0);
            out.rows
                .push(ResultRow::new(n, "vorticity", "relative_gap_to_curl", gap));
            out.artifacts.push(grid_artifact(
                format!("{n}_vorticity_mc"),
                &w,
                e.export_format,
            )?);
        }
        out.experiments.push(summary);
    }
    Ok(out)
}

/// Residuals of the Leray and Biot-Savart identities on one torus.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelReport {
    pub gradient_annihilation: f64,
    pub two_mode_decomposition: f64,
    pub idempotence: f64,
    pub projected_divergence: f64,
    pub curl_biot_savart_2d: f64,
    pub curl_biot_savart_3d: f64,
    /// `(r / δ, relative speed error)` for a single blob.
    pub point_vortex: Vec<(f64, f64)>,
}

pub fn kernel_suite(e: &KernelTestExperiment) -> sdeflow_core::Result<KernelReport> {
    let g = PeriodicGrid::cube(2, e.length, e.nodes)?;
    let k = 2.0 * PI / e.length;
    // ψ = sin(kx) cos(2ky), w = (sin(2ky), cos(kx)).
    let grad = |x: &[f64], o: &mut [f64]| {
        o[0] = k * (k * x[0]).cos() * (2.0 * k * x[1]).cos();
        o[1] = -2.0 * k * (k * x[0]).sin() * (2.0 * k * x[1]).sin();
    };
    let w = |x: &[f64], o: &mut [f64]| {
        o[0] = (2.0 * k * x[1]).sin();
        o[1] = (k * x[0]).cos();
    };
    let gv = GridField::from_fn(&g, 2, grad);
    let wv = GridField::from_fn(&g, 2, w);
    let sum = GridField::from_fn(&g, 2, |x, o| {
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        grad(x, &mut a);
        w(x, &mut b);
        o[0] = a[0] + b[0];
        o[1] = a[1] + b[1];
    });
    let gradient_annihilation = gv.leray_project()?.max_abs();
    let pv = sum.leray_project()?;
    let two_mode_decomposition = pv.sub(&wv)?.max_abs();
    let generic = GridField::from_fn(&g, 2, |x, o| {
        o[0] = (k * x[0]).sin() * (k * x[1]).cos() + 0.3 * (3.0 * k * x[0]).cos() + 0.1;
        o[1] = (2.0 * k * x[0] + k * x[1]).sin() - 0.5 * (k * x[1]).cos();
    });
    let p1 = generic.leray_project()?;
    let idempotence = p1.leray_project()?.sub(&p1)?.max_abs();
    let projected_divergence = p1.max_divergence()?;
    let omega = GridField::from_fn(&g, 1, |x, o| {
        o[0] = (k * x[0]).sin() * (2.0 * k * x[1]).cos() + 0.4 * (3.0 * k * x[1]).cos();
    });
    let curl_biot_savart_2d = omega.biot_savart()?.curl()?.sub(&omega)?.max_abs();
    let g3 = PeriodicGrid::cube(3, e.length, 16)?;
    let omega3 = GridField::from_fn(&g3, 3, |x, o| {
        // curl of (sin ky, sin kz, sin kx): divergence-free by construction
        o[0] = -k * (k * x[2]).cos();
        o[1] = -k * (k * x[0]).cos();
        o[2] = -k * (k * x[1]).cos();
    });
    let curl_biot_savart_3d = omega3.biot_savart()?.curl()?.sub(&omega3)?.max_abs();
    let delta = e.delta.unwrap_or(2.0 * 0.05);
    let blob = VortexBlobs::new(2, vec![0.0, 0.0], vec![e.circulation], delta)?;
    let radii = e.radii.clone().unwrap_or_else(|| vec![3.0, 4.0, 6.0, 10.0]);
    let point_vortex = radii
        .iter()
        .map(|&q| {
            let r = q * delta;
            let mut u = [0.0; 2];
            blob.velocity(&[r * 0.6, r * 0.8], &mut u);
            let speed = u[0].hypot(u[1]);
            let exact = e.circulation.abs() / (2.0 * PI * r);
            (q, (speed - exact).abs() / exact)
        })
        .collect();
    Ok(KernelReport {
        gradient_annihilation,
        two_mode_decomposition,
        idempotence,
        projected_divergence,
        curl_biot_savart_2d,
        curl_biot_savart_3d,
        point_vortex,
    })
}

pub(crate) fn nse_kernel_test(cfg: &Config<KernelTestExperiment>, _ctx: &Ctx) -> Result<Outcome> {
    unique_names(cfg.experiments.iter().map(|e| e.name.as_str()))?;
    let mut out = Outcome::default();
    for (i, e) in cfg.experiments.iter().enumerate() {
        ensure(
            e.length > 0.0,
            field(i, "length"),
            "length must be positive",
        )?;
        ensure(
            e.delta.is_none_or(|d| d > 0.0),
            field(i, "delta"),
            "delta must be positive",
        )?;
        let r = kernel_suite(e).map_err(|err| CliError::from_core(&e.name, err))?;
        let n = &e.name;
        out.rows.push(ResultRow::new(
            n,
            "leray",
            "gradient_annihilation",
            r.gradient_annihilation,
        ));
        out.rows.push(ResultRow::new(
            n,
            "leray",
            "two_mode_decomposition",
            r.two_mode_decomposition,
        ));
        out.rows
            .push(ResultRow::new(n, "leray", "idempotence", r.idempotence));
        out.rows.push(ResultRow::new(
            n,
            "leray",
            "projected_divergence",
            r.projected_divergence,
        ));
        out.rows.push(ResultRow::new(
            n,
            "biot_savart_2d",
            "curl_identity",
            r.curl_biot_savart_2d,
        ));
        out.rows.push(ResultRow::new(
            n,
            "biot_savart_3d",
            "curl_identity",
            r.curl_biot_savart_3d,
        ));
        for (q, err) in &r.point_vortex {
            out.rows.push(ResultRow::new(
                n,
                format!("r/delta={q}"),
                "point_vortex_rel_error",
                *err,
            ));
        }
        out.experiments
            .push(json!({ "name": e.name, "nodes": e.nodes, "length": e.length }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_meets_its_tolerances() {
        let cfg: Config<KernelTestExperiment> =
            parse(r#"{"experiments":[{"name":"k","nodes":32}]}"#).unwrap();
        let r = kernel_suite(&cfg.experiments[0]).unwrap();
        assert!(r.gradient_annihilation < 1e-10, "{r:?}");
        assert!(r.two_mode_decomposition < 1e-10, "{r:?}");
        assert!(r.idempotence < 1e-12, "{r:?}");
        assert!(
            r.curl_biot_savart_2d < 1e-8 && r.curl_biot_savart_3d < 1e-8,
            "{r:?}"
        );
        assert!(r.point_vortex.iter().all(|(_, e)| *e < 0.01), "{r:?}");
    }

    #[test]
    fn duplicate_names_are_config_errors() {
        let err = unique_names(["a", "a"].into_iter()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(unique_names(["../x"].into_iter()).is_err());
    }
}
