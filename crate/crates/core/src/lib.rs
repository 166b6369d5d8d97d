//! Monte Carlo toolkit for SDEs with integrable (possibly singular) drifts.
//!
//! The crate is `no_std` + `alloc`. Enable the `parallel` feature (default) to
//! run ensembles on a rayon pool; results are bit-identical with or without it
//! because every reduction is done sequentially over per-path outputs.
//!
//! Layout:
//! - [`fields`]: drift/diffusion coefficient fields, mollification, mixed norms.
//! - [`paths`]: time grids, counter-based Brownian increments, path storage.
//! - [`solver`]: Euler-Maruyama, stability and volume-preservation harnesses.
//! - [`variational`]: Jacobian flow, Malliavin derivatives, Bismut-Elworthy-Li gradients.
//! - [`spectral`]: periodic grid fields and FFT-based operators.
//! - [`zvonkin`]: Gaussian-kernel backward PDE solver and the Zvonkin map.
//! - [`nse`]: Leray projection, Biot-Savart, and the stochastic Lagrangian fixed point.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod defaults;
pub mod error;
pub mod fields;
pub mod linalg;
pub mod nse;
pub mod par;
pub mod paths;
pub mod solver;
pub mod spectral;
pub mod stats;
pub mod variational;
pub mod zvonkin;

pub use error::{Error, Result};
pub use fields::{DiffusionSpec, DriftSpec, Integrability, MollifierSpec, SpaceTimeBox};
pub use paths::{BrownianEnsemble, NoiseSource, PathEnsemble, TimeGrid};
