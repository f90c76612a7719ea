//! Input-conditioned kernel synthesis from a bank of basis convolutions.
//!
//! A small first-stage network looks at the input, predicts the class and a
//! set of per-layer combination coefficients, and those coefficients blend a
//! bank of basis kernels into one specialist network that runs as the second
//! stage. Confident first-stage predictions skip the second stage entirely.

pub mod backbone;
pub mod cost;
pub mod disturbance;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Target, Tensor, Var};
