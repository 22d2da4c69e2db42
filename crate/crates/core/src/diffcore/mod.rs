//! Minimal reverse-mode differentiable tensor engine.
//!
//! Only the primitives the restoration network and its training loop need:
//! 2-D convolution, pooling, softmax, channel concat, resampling, pointwise
//! activations and the L1 loss. Tensors are `[H, W, C]` row-major.
//! Forward passes are deterministic; a graph is differentiated at most once.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi, GradCheckReport, DEFAULT_EPS};
pub use graph::{Activation, Graph, Var};
pub use kernels::{gelu, sigmoid};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
