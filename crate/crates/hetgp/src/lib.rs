//! Sparse variational multi-task Gaussian processes over heterogeneous
//! input domains.
//!
//! The crate builds multi-task GP models where tasks live in different input
//! domains. Task inputs are aligned into a shared low-dimensional common
//! domain through prior domain mappings, optionally refined by a Bayesian
//! calibration layer, and the aligned tasks are modeled with a linear model
//! of coregionalization over `Q` shared latent sparse GPs trained by
//! stochastic variational inference.
//!
//! Four model variants are provided:
//!
//! * `sogp` - a single-output sparse GP on the target task alone,
//! * `hsvlmc-g0` - the mixing model with deterministic prior-mapped inputs,
//! * `hsvlmc-em` - embedded mapping: a GP regresses the prior-mapped inputs,
//! * `hsvlmc` - Bayesian calibration with a residual GP posterior mapping.
//!
//! See the `models` module for construction and training, `datasets` for the
//! built-in analytic benchmark cases and `metrics` for scoring.

pub mod calibration;
pub mod datasets;
pub mod error;
pub mod kernel;
pub mod lmc;
pub mod metrics;
pub mod models;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod tape;
pub mod variational;

pub use error::{Error, Result};
