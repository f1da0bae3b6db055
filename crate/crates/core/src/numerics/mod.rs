//! Dense f64 tensors, a small set of differentiable operations, and
//! reverse-mode gradients over a recorded [`Trace`].

mod gradcheck;
pub mod kernels;
mod ops;
mod tensor;
mod trace;

pub use gradcheck::{finite_diff_check, finite_diff_probe, Coords, GradProbe};
pub use ops::{bce_mean, gelu, layer_norm, masked_softmax, matmul, sigmoid, smooth_l1, PROB_CLAMP};
pub use tensor::{Mask, Tensor};
pub use trace::{Trace, Var};
