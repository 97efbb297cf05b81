//! In-context treatment-effect transformer.
//!
//! A token per row carries the encoded covariates, the treatment flag, the
//! standardized outcome and a query flag. Query rows have treatment and
//! outcome zeroed and read the context through attention; the scalar head
//! emits the predicted effect in outcome-standardized units.

mod checkpoint;
mod network;
mod params;
mod predict;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_KIND};
pub use network::{batch_loss, forward, loss, loss_and_grad};
pub use params::{LayerParams, ModelConfig, ModelParameters, Scalar, TensorInfo};
pub use predict::{covariate_view, inference_episode, predict_cate, BootstrapConfig, PredictOptions};
pub use train::{
    checkpoint_file_name, train, train_with, AdamW, PlateauConfig, PlateauScheduler, StepRecord,
    TrainConfig, TrainOutcome, FINE_TUNE_LEARNING_RATE, LAST_GOOD_CHECKPOINT,
};
