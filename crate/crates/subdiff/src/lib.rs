//! Spectral estimation and simulation for subordinate diffusions.

pub mod error;
pub mod estimation;
pub mod exec;
pub mod gof;
pub mod models;
pub mod numerics;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
pub use exec::Execution;
