//! Temporal-supervised knowledge distillation on a small tensor engine.

pub mod arima;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
