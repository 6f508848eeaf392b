//! Dense networks, their derivatives, and the Adam optimizer.

mod adam;
mod mlp;

pub use adam::{adam_step, AdamState, Direction};
pub use mlp::{mlp_forward, mlp_grad_of_jvp, mlp_jvp, mlp_reverse, Dense, Mlp, Tape};

/// Alias matching the parameter-container role in training code.
pub type MlpParams = Mlp;
