//! Dense tensors, reverse-mode tape, counter-based RNG and AdamW.

mod gradcheck;
mod optim;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradReport};
pub use optim::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use rng::{fnv1a64, gauss_draw, RngStream};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
