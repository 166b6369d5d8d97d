//! Default numerical parameters, shared by the library and the CLI.
//!
//! | name | value | used by |
//! |------|-------|---------|
//! | `QUADRATURE_NODES` | 64 | midpoint rules, mollifier stencils |
//! | `BLOWUP_RADIUS` | 1e6 | Euler-Maruyama path freezing |
//! | `FD_STEP` | 1e-5 | coefficient gradients (see `fields`) |
//! | `PICARD_TOL` | 1e-8 | Zvonkin corrector iteration |
//! | `PICARD_MAX_ITER` | 50 | Zvonkin corrector iteration |
//! | `NON_CONTRACTION_STREAK` | 3 | fixed-point divergence detection |
//! | `CORRECTOR_TIME_STEPS` | 50 | time nodes of the corrector grid (CLI) |
//! | `DRIFT_BINS` | 16 | bins per axis in the drift-removal check |
//! | `DRIFT_MIN_COUNT` | 1000 | samples needed for a bin to count |
//! | `NSE_TOL` | 1e-4 | relative stopping distance for the velocity fixed point |
//! | `NSE_MAX_ITER` | 20 | velocity fixed point |
//! | `NSE_NORM_P` | 4 | exponent of the fixed-point distance and of `‖φ‖_{W¹_p}` |
//! | `NSE_GRID_NODES` | 32 | torus nodes per axis (CLI) |
//! | `BLOB_SPACINGS` | 2 | desingularisation radius in grid spacings |
//! | `SINGULAR_SIGMA_FACTOR` | 10 | BEL flags paths with `‖σ^{-1}‖ > 10 K` |
//! | `DT` | 1e-3 | time step for CLI runs |
//! | `N_PATHS` | 10_000 | ensemble size for CLI runs |

pub const QUADRATURE_NODES: usize = 64;
pub const BLOWUP_RADIUS: f64 = 1e6;
pub const FD_STEP: f64 = crate::fields::FD_STEP;
pub const PICARD_TOL: f64 = 1e-8;
pub const PICARD_MAX_ITER: usize = 50;
pub const NON_CONTRACTION_STREAK: usize = 3;
pub const CORRECTOR_TIME_STEPS: usize = 50;
pub const DRIFT_BINS: usize = 16;
pub const DRIFT_MIN_COUNT: usize = 1000;
pub const NSE_TOL: f64 = 1e-4;
pub const NSE_MAX_ITER: usize = 20;
pub const NSE_NORM_P: f64 = 4.0;
pub const NSE_GRID_NODES: usize = 32;
pub const BLOB_SPACINGS: f64 = 2.0;
pub const SINGULAR_SIGMA_FACTOR: f64 = 10.0;
pub const DT: f64 = 1e-3;
pub const N_PATHS: usize = 10_000;
