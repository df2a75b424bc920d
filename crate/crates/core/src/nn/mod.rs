//! Dense forward/backward engine and SGD for sub-models.

mod model;
mod optim;
mod tape;
mod tensor;

pub use model::{error_count, forward, loss, loss_and_grads, softmax_cross_entropy, Batch, Mode};
pub use optim::{learning_rate_at, sgd_step, OptimizerState, SgdConfig};
pub use tape::{ConvGeom, Gradients, Tape, Var, BN_EPSILON};
pub use tensor::Tensor;
