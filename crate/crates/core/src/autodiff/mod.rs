//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! sweeps it once in reverse. Heavy fused kernels (tri-plane lookup,
//! compositing, modulated convolution) plug in through [`CustomOp`].
//! [`Tape::grad_graph`] records the adjoint computation itself so a gradient
//! norm can be differentiated again, which the R1 penalty needs.

pub mod kernels;
mod sparse;
mod tape;
mod tensor;

pub use sparse::{SparseBuilder, SparseMap};
pub use tape::{Binary, CustomOp, Gradients, ReduceKind, Tape, Unary, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
