//! Secret fine-tuning, mask-constrained stego training, output adaptation
//! and the progressive disguise loop.

mod adapt;
mod progressive;
mod train;

pub use adapt::{adapt_output_layer, adapt_output_layer_with, AdaptMode, AdaptationMeta};
pub use progressive::{
    default_tau_se, progressive_disguise, schedule, train_from_scratch, DisguiseConfig, DisguiseReport, Disguised, IterationOutcome,
    IterationRecord, TaskData, Termination,
};
pub use train::{finetune_secret, fit, train_stego_masked, TrainOptions};

use crate::graph::GraphError;
use crate::importance::ImportanceError;
use crate::tasks::TaskError;

#[derive(Debug, thiserror::Error)]
pub enum DisguiseError {
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("selection floor: {0}")]
    Floor(String),
    #[error("secret reduction {alpha_se} reached the tolerance {tau_se} on the first iteration")]
    SecretViolation { alpha_se: f64, tau_se: f64 },
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, DisguiseError>;
