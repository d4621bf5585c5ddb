//! Dense tensor numerics with a reverse-mode gradient tape.
//!
//! Everything the model stack differentiates lives here: matrix products,
//! elementwise maps, layer norm, softmax, embedding lookup, segmented
//! multi-head attention and masked cross-entropy. Ops run on `f32` for
//! training and `f64` for finite-difference checks.

mod element;
mod error;
pub mod gradcheck;
mod graph;
mod tensor;

pub use element::{DType, Element, Strides};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
