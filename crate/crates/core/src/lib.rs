//! Sparse EM estimation and simultaneous inference for vector autoregressions observed
//! with additive measurement error.

pub mod cli;
pub mod dantzig;
pub mod em;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod kalman;
pub mod model;
pub mod rng;
pub mod simplex;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Dataset, HypothesisSpec, ModelParams};
