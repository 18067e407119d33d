//! Minimal dense-network engine: tensors, affine + ReLU layers, softmax
//! cross-entropy, SGD, and finite-difference gradient verification.
//!
//! All operations are deterministic functions of their inputs; randomness
//! enters only through caller-supplied streams at initialization. Everything
//! is 64-bit floats.

mod check;
mod layer;
mod loss;
mod net;
mod tensor;

pub use check::{grad_check, max_rel_error, numeric_grads};
pub use layer::{relu, relu_backward, AffineLayer};
pub use loss::{softmax, softmax_cross_entropy};
pub use net::{sgd_step, GradBundle, Mlp, MlpCache};
pub use tensor::Tensor;
