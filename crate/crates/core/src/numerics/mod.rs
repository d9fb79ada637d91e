//! Dense arithmetic, the gradient tape, and optimization.

pub mod adam;
pub mod kl;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, step_decay_lr, AdamConfig, AdamState};
pub use kl::{kl_diag_gaussian, kl_diag_gaussian_var};
pub use tape::{forward_backward, Gradients, Tape, Var};
pub use tensor::{softmax, Tensor};
