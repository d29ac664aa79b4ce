//! Dense tensors, tape-based reverse-mode autodiff and the primitive
//! neural-network operations the transformer is built from.

mod adam;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{apply_rope, cross_entropy, cross_entropy_with_probs, rms_norm, softmax_rows};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
