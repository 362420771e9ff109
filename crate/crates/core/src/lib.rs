//! Doubly robust, efficient estimation of target-population parameters from
//! semi-supervised data under covariate shift, with optional surrogate
//! predictions (ACPs) available on every unit.

pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod nuisance;
pub mod oracle;
pub mod seed;
pub mod simulation;

pub use error::{Error, Result};
