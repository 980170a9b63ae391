//! Cross-entropy, distillation and mixed-objective training, plus weight
//! averaging of trained models.

mod config;
mod loss;
mod merge;
mod optim;
mod run;
mod step;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{LossMode, LossSpec, TrainConfig};
pub use loss::{distill_loss, distill_loss_grad, entropy, log_softmax, softmax};
pub use merge::{merge_models, merge_weighted};
pub use optim::{AdamW, LrSchedule};
pub use step::{train_step, Batch, StepStats, TeacherTargets};
pub use run::{checkpoint_path, train_run, validation_chunks, MetricRecord, RunOptions, RunOutput, Trainer};

use crate::corpus::CorpusError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {field}: {constraint}")]
    Config { field: String, constraint: String },
    #[error("non-finite loss at step {step} (max |grad| = {max_grad})")]
    NonFinite { step: usize, max_grad: f64 },
    #[error("teacher vocab {teacher} does not match student vocab {student}")]
    VocabMismatch { teacher: usize, student: usize },
    #[error("cannot merge: {0}")]
    Merge(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl TrainError {
    pub(crate) fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self::Config { field: field.into(), constraint: constraint.into() }
    }
}
