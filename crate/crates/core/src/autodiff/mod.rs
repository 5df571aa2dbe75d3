//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together
//! with its forward value; [`Tape::backward`] walks the record in reverse,
//! visiting each node once.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
