//! Minimal dense-tensor engine: a reverse-mode gradient tape, named
//! parameter storage with JSON checkpoints, and the Adam optimizer.
//!
//! All arithmetic is `f64`, which keeps finite-difference checks tight.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use params::{ParamId, ParamStore, Parameter, TensorRecord};
pub use tape::{Loss, Tape, Var, PROB_EPS};
pub use tensor::Tensor;
