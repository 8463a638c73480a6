//! Class-incremental learning without exemplars, trained by an evolution
//! strategy against a loss that approximates past tasks from stored latent
//! features.

pub mod baseline;
pub mod cl;
pub mod config;
pub mod data;
pub mod error;
pub mod es;
pub mod eval;
pub mod nn;
pub mod results;
pub mod rng;
pub mod runner;
pub mod sgd;

pub use error::{Error, Result};
