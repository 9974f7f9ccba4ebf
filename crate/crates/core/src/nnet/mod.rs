//! Deterministic feed-forward networks with manual backpropagation and
//! per-layer tangent features.

pub mod checkpoint;
mod config;
mod loss;
mod network;
mod optim;
mod tangent;
mod train;

pub use config::{Activation, FfnnConfig, DEFAULT_LEAKY_SLOPE};
pub use loss::{
    accuracy, flatten_dataset_major, loss_and_output_grad, softmax_columns, Loss, LossEval,
};
pub use network::{ForwardTrace, Grads, Layer, Network};
pub use optim::{optimizer_step, OptState, Optimizer};
pub use tangent::{
    full_tangent_features, layer_tangent_features, tangent_factors, BatchId, TangentFactors,
    TangentFeatureBlock,
};
pub use train::{evaluate, run_training, train_step, EpochInfo, LogRow, Schedule, TrainingLog};
