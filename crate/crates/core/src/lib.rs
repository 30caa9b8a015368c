//! Training image estimators from pairs of linear measurements, without
//! ground-truth images.

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod measurement;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Padding, Real, Tape, Tensor, Var};
