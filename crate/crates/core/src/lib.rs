//! Forward-only diffusion: a mean-reverting SDE with state-dependent noise
//! that carries samples from a source distribution onto data, together with
//! its closed-form kernels, samplers, training objectives and Monte-Carlo
//! verification oracles.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kernel;
pub mod model;
pub mod noise;
pub mod samplers;
pub mod schedules;
pub mod training;
pub mod verify;

pub use error::{FodError, Result};
