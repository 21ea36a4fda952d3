//! Row-preconditioned self-attention: numerics, a small transformer trained
//! with reverse-mode autodiff, synthetic tasks, and conditioning
//! instrumentation.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod instrument;
pub mod linalg;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};
