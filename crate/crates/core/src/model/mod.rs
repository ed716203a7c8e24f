//! Dense-block convolutional regressor with explicit backpropagation,
//! MAE/SGD training and a portable weights format.

mod config;
pub mod io;
mod net;
pub mod ops;
mod params;
mod train;

pub use config::{DenseNetConfig, FreezePolicy, StageShape, TrainConfig, BOTTLENECK_FACTOR};
pub use io::{load_weights, save_weights, ModelSidecar};
pub use net::{
    apply_running_updates, backward, backward_from, feature_gradients, forward, forward_with,
    mae_output_grad, ForwardTrace, Gradients, Mode,
};
pub use params::{decays, init_model, is_running_stat, ModelParams, Tensor};
pub use train::{loss_mae, predict, sgd_step, train, train_with_observer, EpochObserver};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace was produced with different parameters")]
    StaleTrace,
    #[error("{preds} predictions but {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty batch")]
    Empty,
    #[error("empty training set")]
    EmptyDataset,
    #[error("parameter {0} holds a non-finite value")]
    NonFinite(String),
    #[error("weights file has a bad magic number")]
    BadMagic,
    #[error("unsupported weights file version {0}")]
    UnsupportedVersion(u16),
    #[error("weights do not match the config: {0}")]
    ShapeMismatchWithConfig(String),
    #[error("weights file is truncated")]
    TruncatedFile,
    #[error("weights file is corrupt: {0}")]
    Corrupt(String),
}
