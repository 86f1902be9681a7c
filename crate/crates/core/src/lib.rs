//! Gaze target estimation with a frozen scene encoder and a small
//! head-prompted transformer decoder.

#![allow(clippy::type_complexity)]

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod real;
pub mod targets;
pub mod trainer;

pub use error::{GazeError, Result};
pub use real::Real;
