//! Dense tensors, a gradient tape, and the SGD optimizer.

mod conv;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{sgd_step, SgdState};
pub use tape::{softmax_channel, weighted_pixel_ce_probs, Gradients, Tape, Var};
pub use tensor::Tensor;
