//! Closed-loop diffusion control for 1-D PDE systems.
//!
//! The crate covers the full pipeline: variance-preserving noise schedules
//! with synchronous (constant-level) and asynchronous (staircase-level)
//! denoising, a convolutional noise-prediction network with hand-written
//! reverse-mode gradients, a 1-D Burgers control environment, dataset
//! generation and training, and the guided samplers that close the control
//! loop at one network call per physical step.

pub mod burgers;
pub mod dataset;
pub mod error;
pub mod io;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod scorenet;
pub mod training;
pub mod window;

pub use error::{Error, Result};
