//! Minimal reverse-mode differentiation over dense `f64` matrices, plus the
//! layers, optimizers and checkpoint format built on top of it.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Gradients, ParameterSet};
pub use tape::{Tape, Var};
pub use tensor::Matrix;
