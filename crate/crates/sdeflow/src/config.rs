//! JSON experiment configs: `{"experiments": [ ... ]}` with one schema per
//! subcommand. Unknown fields are rejected; omitted numerical settings fall
//! back to `sdeflow_core::defaults`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sdeflow_core::defaults;
use sdeflow_core::fields::{self, Integrability, MollifierSpec};
use sdeflow_core::{DiffusionSpec, DriftSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::GridFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config<E> {
    pub experiments: Vec<E>,
}

/// Parses `text`, reporting the JSON path of the first offending field.
pub fn parse<E: DeserializeOwned>(text: &str) -> Result<Config<E>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(
            if path == "." { "<root>".into() } else { path },
            e.inner().to_string(),
        )
    })
}

pub(crate) fn ensure(ok: bool, field: impl Into<String>, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(field, msg))
    }
}

fn one() -> f64 {
    1.0
}

/// Drift vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Zero {
        dim: usize,
    },
    Constant {
        value: Vec<f64>,
    },
    /// `b(x) = A x`, given by the rows of `A`.
    Linear {
        matrix: Vec<Vec<f64>>,
    },
    /// `rate * (-x₂, x₁)`.
    Rotation {
        #[serde(default = "one")]
        rate: f64,
    },
    /// `rate * (x₂, 0)`.
    Shear {
        #[serde(default = "one")]
        rate: f64,
    },
    /// `amplitude * exp(-|x - center|² / width²)`.
    Bump {
        amplitude: Vec<f64>,
        width: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// `b_i(x) = amplitude_i * cos(frequency * x_i)`.
    Wave {
        amplitude: Vec<f64>,
        frequency: f64,
    },
    /// `direction * 1{|x| < radius}`.
    BallIndicator {
        direction: Vec<f64>,
        #[serde(default = "one")]
        radius: f64,
    },
    Mollified {
        base: Box<DriftConfig>,
        level: u32,
        #[serde(default)]
        resolution: Option<usize>,
    },
    Sum {
        terms: Vec<WeightedDrift>,
    },
    /// Node values from a grid file (CSV or binary), multilinear in between.
    Grid {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedDrift {
    pub weight: f64,
    pub drift: DriftConfig,
}

fn square_rows(rows: &[Vec<f64>], field: &str) -> Result<(Vec<f64>, usize)> {
    let d = rows.len();
    ensure(
        d > 0 && rows.iter().all(|r| r.len() == d),
        field,
        "matrix must be square and non-empty",
    )?;
    Ok((rows.concat(), d))
}

impl DriftConfig {
    /// Builds the drift; `field` names this node for diagnostics and `base`
    /// resolves relative file paths.
    pub fn build(&self, field: &str, base: &Path) -> Result<DriftSpec> {
        let wrap = |e: sdeflow_core::Error| CliError::config(field, e.to_string());
        Ok(match self {
            DriftConfig::Zero { dim } => {
                ensure(
                    *dim > 0,
                    format!("{field}.dim"),
                    "dimension must be positive",
                )?;
                DriftSpec::zero(*dim)
            }
            DriftConfig::Constant { value } => {
                ensure(
                    !value.is_empty(),
                    format!("{field}.value"),
                    "value must be non-empty",
                )?;
                DriftSpec::constant(value.clone())
            }
            DriftConfig::Linear { matrix } => {
                let (a, d) = square_rows(matrix, &format!("{field}.matrix"))?;
                DriftSpec::linear(a, d).map_err(wrap)?
            }
            DriftConfig::Rotation { rate } => {
                let r = *rate;
                DriftSpec::linear(vec![0.0, -r, r, 0.0], 2).map_err(wrap)?
            }
            DriftConfig::Shear { rate } => {
                let r = *rate;
                DriftSpec::linear(vec![0.0, r, 0.0, 0.0], 2).map_err(wrap)?
            }
            DriftConfig::Bump {
                amplitude,
                width,
                center,
            } => {
                let d = amplitude.len();
                ensure(
                    d > 0,
                    format!("{field}.amplitude"),
                    "amplitude must be non-empty",
                )?;
                ensure(
                    *width > 0.0,
                    format!("{field}.width"),
                    "width must be positive",
                )?;
                let c = center.clone().unwrap_or_else(|| vec![0.0; d]);
                ensure(
                    c.len() == d,
                    format!("{field}.center"),
                    "center and amplitude differ in length",
                )?;
                let (a, c2, a2) = (amplitude.clone(), c.clone(), amplitude.clone());
                let inv = 1.0 / (width * width);
                let e = move |c: &[f64], x: &[f64]| {
                    (-inv * x.iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()).exp()
                };
                DriftSpec::closed(d, "bump", move |_, x, out: &mut [f64]| {
                    let g = e(&c, x);
                    for i in 0..d {
                        out[i] = a[i] * g;
                    }
                })
                .with_gradient(move |_, x, out: &mut [f64]| {
                    let g = e(&c2, x);
                    for i in 0..d {
                        for m in 0..d {
                            out[i * d + m] = -2.0 * inv * (x[m] - c2[m]) * a2[i] * g;
                        }
                    }
                })
            }
            DriftConfig::Wave {
                amplitude,
                frequency,
            } => {
                let d = amplitude.len();
                ensure(
                    d > 0,
                    format!("{field}.amplitude"),
                    "amplitude must be non-empty",
                )?;
                let (a, a2, w) = (amplitude.clone(), amplitude.clone(), *frequency);
                DriftSpec::closed(d, "wave", move |_, x, out: &mut [f64]| {
                    for i in 0..d {
                        out[i] = a[i] * (w * x[i]).cos();
                    }
                })
                .with_gradient(move |_, x, out: &mut [f64]| {
                    out[..d * d].iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..d {
                        out[i * d + i] = -a2[i] * w * (w * x[i]).sin();
                    }
                })
            }
            DriftConfig::BallIndicator { direction, radius } => {
                ensure(
                    !direction.is_empty(),
                    format!("{field}.direction"),
                    "direction must be non-empty",
                )?;
                ensure(
                    *radius > 0.0,
                    format!("{field}.radius"),
                    "radius must be positive",
                )?;
                fields::ball_indicator(direction.clone(), *radius)
            }
            DriftConfig::Mollified {
                base: inner,
                level,
                resolution,
            } => {
                let b = inner.build(&format!("{field}.base"), base)?;
                let m = match resolution {
                    Some(r) => MollifierSpec::new(*level, *r),
                    None => MollifierSpec::with_level(*level),
                }
                .map_err(wrap)?;
                fields::mollify(&b, m).map_err(wrap)?
            }
            DriftConfig::Sum { terms } => {
                ensure(
                    !terms.is_empty(),
                    format!("{field}.terms"),
                    "sum needs at least one term",
                )?;
                let built = terms
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        Ok((
                            t.weight,
                            t.drift.build(&format!("{field}.terms[{k}].drift"), base)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                DriftSpec::combination(built).map_err(wrap)?
            }
            DriftConfig::Grid { file } => {
                let path = base.join(file);
                let g = GridFile::read(&path)?.to_sampled()?;
                DriftSpec::grid(g, path.display().to_string()).map_err(wrap)?
            }
        })
    }
}

/// Diffusion vocabulary (constant matrices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Identity {
        dim: usize,
    },
    /// `scale * I`.
    Scaled {
        dim: usize,
        scale: f64,
    },
    Matrix {
        rows: Vec<Vec<f64>>,
    },
}

impl DiffusionConfig {
    pub fn build(&self, field: &str) -> Result<DiffusionSpec> {
        let wrap = |e: sdeflow_core::Error| CliError::config(field, e.to_string());
        match self {
            DiffusionConfig::Identity { dim } => {
                ensure(
                    *dim > 0,
                    format!("{field}.dim"),
                    "dimension must be positive",
                )?;
                Ok(DiffusionSpec::identity(*dim))
            }
            DiffusionConfig::Scaled { dim, scale } => {
                ensure(
                    *dim > 0,
                    format!("{field}.dim"),
                    "dimension must be positive",
                )?;
                ensure(
                    *scale != 0.0,
                    format!("{field}.scale"),
                    "scale must be nonzero",
                )?;
                DiffusionSpec::scaled_identity(*dim, *scale).map_err(wrap)
            }
            DiffusionConfig::Matrix { rows } => {
                let (m, d) = square_rows(rows, &format!("{field}.rows"))?;
                DiffusionSpec::constant(m, d).map_err(wrap)
            }
        }
    }
}

pub type TestFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Scalar test functions `f: R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionConfig {
    /// `sin(x_index)`.
    Sin {
        #[serde(default)]
        index: usize,
    },
    /// `cos(x_index)`.
    Cos {
        #[serde(default)]
        index: usize,
    },
    /// `Σ w_i x_i`.
    Linear { weights: Vec<f64> },
    /// `exp(-|x - center|² / (2 width²))`.
    Gaussian {
        width: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
}

impl FunctionConfig {
    pub fn build(&self, field: &str, dim: usize) -> Result<TestFn> {
        Ok(match self {
            FunctionConfig::Sin { index } => {
                ensure(
                    *index < dim,
                    format!("{field}.index"),
                    "index exceeds the dimension",
                )?;
                let i = *index;
                Arc::new(move |x: &[f64]| x[i].sin())
            }
            FunctionConfig::Cos { index } => {
                ensure(
                    *index < dim,
                    format!("{field}.index"),
                    "index exceeds the dimension",
                )?;
                let i = *index;
                Arc::new(move |x: &[f64]| x[i].cos())
            }
            FunctionConfig::Linear { weights } => {
                ensure(
                    weights.len() == dim,
                    format!("{field}.weights"),
                    "weights must have one entry per dimension",
                )?;
                let w = weights.clone();
                Arc::new(move |x: &[f64]| x.iter().zip(&w).map(|(x, w)| x * w).sum())
            }
            FunctionConfig::Gaussian { width, center } => {
                ensure(
                    *width > 0.0,
                    format!("{field}.width"),
                    "width must be positive",
                )?;
                let c = center.clone().unwrap_or_else(|| vec![0.0; dim]);
                ensure(
                    c.len() == dim,
                    format!("{field}.center"),
                    "center has the wrong dimension",
                )?;
                let s = 0.5 / (width * width);
                Arc::new(move |x: &[f64]| {
                    (-s * x
                        .iter()
                        .zip(&c)
                        .map(|(x, c)| (x - c) * (x - c))
                        .sum::<f64>())
                    .exp()
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrabilityConfig {
    pub p: f64,
    pub q: f64,
}

impl IntegrabilityConfig {
    pub fn build(&self, field: &str) -> Result<Integrability> {
        Integrability::new(self.p, self.q).map_err(|e| CliError::config(field, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageConfig {
    #[default]
    Terminal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridFormat {
    #[default]
    Csv,
    Binary,
}

fn default_dt() -> f64 {
    defaults::DT
}
fn default_n_paths() -> usize {
    defaults::N_PATHS
}
fn default_quadrature() -> usize {
    defaults::QUADRATURE_NODES
}
fn default_time_steps() -> usize {
    defaults::CORRECTOR_TIME_STEPS
}
fn default_picard_tol() -> f64 {
    defaults::PICARD_TOL
}
fn default_picard_iter() -> usize {
    defaults::PICARD_MAX_ITER
}
fn default_pairs() -> usize {
    1000
}
fn default_bins() -> usize {
    defaults::DRIFT_BINS
}
fn default_min_count() -> usize {
    defaults::DRIFT_MIN_COUNT
}
fn default_nse_nodes() -> usize {
    defaults::NSE_GRID_NODES
}
fn default_torus() -> f64 {
    2.0 * std::f64::consts::PI
}
fn default_nse_tol() -> f64 {
    defaults::NSE_TOL
}
fn default_nse_iter() -> usize {
    defaults::NSE_MAX_ITER
}
fn default_nse_p() -> f64 {
    defaults::NSE_NORM_P
}
fn default_kernel_nodes() -> usize {
    64
}
fn default_true() -> bool {
    true
}

/// `simulate`: one Euler-Maruyama ensemble, terminal moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateExperiment {
    pub name: String,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// `full` also writes every path to `<name>_paths.csv`.
    #[serde(default)]
    pub storage: StorageConfig,
    /// Write the increments to `<name>.noise`.
    #[serde(default)]
    pub save_noise: bool,
    /// Replay increments from a noise blob instead of drawing them.
    #[serde(default)]
    pub noise_file: Option<PathBuf>,
}

/// `stability`: gaps between `b` and `b + ε g` on common noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityExperiment {
    pub name: String,
    pub drift: DriftConfig,
    pub perturbation: DriftConfig,
    pub epsilons: Vec<f64>,
    pub diffusion: DiffusionConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Exponents of the drift distance `‖b - b'‖`.
    pub integrability: IntegrabilityConfig,
    pub norm_lower: Vec<f64>,
    pub norm_upper: Vec<f64>,
    #[serde(default = "default_quadrature")]
    pub quadrature_nodes: usize,
}

/// `gradient`: Bismut-Elworthy-Li estimate of `∇ E f(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientExperiment {
    pub name: String,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    pub function: FunctionConfig,
    /// Refuse finite-difference coefficient gradients.
    #[serde(default)]
    pub require_exact_gradients: bool,
}

/// `jacobian`: mean terminal Jacobian and sup-moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobianExperiment {
    pub name: String,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Exponents `p` of `E sup_k ‖J_k‖^p`.
    #[serde(default)]
    pub moments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusConfig {
    /// Lower corner; defaults to the origin.
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
    pub length: f64,
    /// Nodes per axis, a power of two.
    pub nodes: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftCheckConfig {
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

/// `zvonkin`: corrector solve, bi-Lipschitz ratios, drift removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZvonkinExperiment {
    pub name: String,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub t0: f64,
    pub s0: f64,
    pub grid: TorusConfig,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
    #[serde(default = "default_picard_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub max_halvings: usize,
    #[serde(default = "default_pairs")]
    pub bilipschitz_pairs: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub drift_check: Option<DriftCheckConfig>,
    /// Write `u(t0)` and `∇u(t0)` as grid files.
    #[serde(default = "default_true")]
    pub export: bool,
    #[serde(default)]
    pub export_format: GridFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialVelocity {
    /// `(sin x cos y, -cos x sin y)` on `[0, 2π)²`.
    TaylorGreen,
    /// A periodic grid file with `d` components.
    File { path: PathBuf },
}

/// `nse-solve`: the velocity fixed point on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NseSolveExperiment {
    pub name: String,
    pub initial: InitialVelocity,
    pub nu: f64,
    /// `|T|`; the system runs on `[-horizon, 0]`.
    pub horizon: f64,
    #[serde(default = "default_nse_nodes")]
    pub nodes: usize,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_nse_tol")]
    pub tol: f64,
    #[serde(default = "default_nse_iter")]
    pub max_iter: usize,
    #[serde(default = "default_nse_p")]
    pub p: f64,
    /// Also compute the vorticity representation at `t = T` (2-D only).
    #[serde(default)]
    pub vorticity: bool,
    #[serde(default)]
    pub export_format: GridFormat,
}

/// `nse-kernel-test`: Leray and Biot-Savart checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTestExperiment {
    pub name: String,
    #[serde(default = "default_kernel_nodes")]
    pub nodes: usize,
    #[serde(default = "default_torus")]
    pub length: f64,
    /// Point-vortex circulation.
    #[serde(default = "one")]
    pub circulation: f64,
    /// Blob radius; defaults to two lattice spacings of 0.05.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Radii, in units of the blob radius, where the speed is compared.
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
}
