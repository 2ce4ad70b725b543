//! Tensor kernels, reverse-mode automatic differentiation, CNN builders,
//! training machinery, swarm search, data ingestion, and metrics for
//! histopathology image classification.

pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pso;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
