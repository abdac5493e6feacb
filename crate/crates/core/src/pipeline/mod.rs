//! The end-to-end model: appearance and shape encoders with latent sampling,
//! residual precision update, segmentation latent, flow refinement with
//! Gumbel-Softmax, variational updates and KL terms; plus training,
//! prediction and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod net;
mod train;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, Checkpoint, TrainState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Toggles, Version};
pub use forward::{
    forward_tape, sample_loss, ForwardOptions, ForwardTape, LatentLogWeights, LossVars, Mode, PhaseTrace,
};
pub use net::{avg_pool2, upsample2, BoundModel, Model, ParamGroup, LOG_VAR_BOUND};
pub use train::{
    evaluate, fit, forward_image, importance_weights, posterior_sample, predict, train_step, Adam, EpochRecord, EvalReport,
    FitOptions, FitOutcome, PosteriorSample, Prediction, ResumeState, StepReport, IMPORTANCE_CLAMP,
};

use thiserror::Error;

use crate::data::DataError;
use crate::flows::FlowError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("configuration mismatch on {field}: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("phase {phase} failed: {detail}")]
    Phase {
        phase: &'static str,
        detail: String,
        numerical: bool,
    },
    #[error("non-finite loss ({breakdown})")]
    NonFiniteLoss { breakdown: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported checkpoint version: expected {expected}, found {found}")]
    Version { expected: u16, found: u16 },
    #[error("truncated checkpoint: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl PipelineError {
    /// Numerical breakdown (NaN/Inf) as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::NonFiniteLoss { .. } | PipelineError::Phase { numerical: true, .. }
        )
    }

    /// File-level failure: unreadable, truncated or corrupted artifacts.
    pub fn is_io(&self) -> bool {
        match self {
            PipelineError::Magic { .. }
            | PipelineError::Version { .. }
            | PipelineError::Truncated { .. }
            | PipelineError::Checksum { .. }
            | PipelineError::Corrupt(_)
            | PipelineError::Io { .. } => true,
            PipelineError::Data(e) => e.is_io(),
            _ => false,
        }
    }
}
