//! Conditional guided flow matching for multivariate time-series forecasting.
//!
//! A velocity network is trained to transport a source distribution (noise or
//! a smoothed auxiliary forecast) to the future window along an affine path,
//! conditioned on the history window. Forecasts come from integrating that
//! field with the midpoint rule.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod netcore;
pub mod oracle;
pub mod pathkit;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod scheduler;
pub mod training;
pub mod verify;

pub use error::{CgfmError, Result};
