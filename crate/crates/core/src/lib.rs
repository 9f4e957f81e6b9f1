//! Deep Koopman networks: simulation, datasets, models, training, spectral
//! analysis and model predictive control.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the matrix formulas in numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod baseline;
pub mod container;
pub mod dataset;
pub mod dkn;
pub mod error;
pub mod model;
pub mod mpc;
pub mod net;
pub mod seed;
pub mod sim;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
