//! Feed-forward networks, Adam, and the MLP surrogate of the limit-state
//! function.

mod adam;
mod data;
mod mlp;
mod surrogate;

pub use crate::autodiff::swish;
pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{Dataset, Standardizer};
pub use mlp::{collect_grads, mlp_forward, Activation, DenseLayer, MlpParams, ParamVars};
pub use surrogate::{mse_loss, train_surrogate, SurrogateModel, TrainConfig, TrainingMeta};
