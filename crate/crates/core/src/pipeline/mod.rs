//! Run configuration, provenance ledger, CSV/SVG output and the stage
//! runners behind the `cgane` binary.

mod config;
mod ledger;
mod report;
mod stages;
pub mod svg;

pub use config::{EmbeddingStage, RunConfig, Scale, ValidationStage};
pub use ledger::{file_digest, sha256_hex, OutputDigest, RunLedger, StageRecord, LEDGER_FILE};
pub use report::{stage_report, REPORT_FILE};
pub use stages::{
    load_split, stage_crossval, stage_embed, stage_grow, stage_phantom, stage_sample,
    stage_train_gan, stage_validate, CrossvalSummary, EmbedSummary, GanSummary, GrowSummary,
    PhantomSummary, Split, ValidateSummary, STAGE_NAMES,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::ensemble::EnsembleError;
use crate::gan::GanError;
use crate::metrics::MetricsError;
use crate::validation::ValidationError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing upstream artifact {0}")]
    MissingUpstream(PathBuf),
    #[error("ensemble growth stalled after {failures} consecutive rejected training runs")]
    GrowthStalled { failures: usize },
    #[error("validation criterion not met after {rounds} rounds")]
    ValidationFailed { rounds: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Ensemble(EnsembleError),
    #[error(transparent)]
    Validation(ValidationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EnsembleError> for PipelineError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::GrowthStalled { failures } => PipelineError::GrowthStalled { failures },
            other => PipelineError::Ensemble(other),
        }
    }
}

impl From<ValidationError> for PipelineError {
    fn from(e: ValidationError) -> Self {
        match e {
            ValidationError::Ensemble(inner) => inner.into(),
            other => PipelineError::Validation(other),
        }
    }
}

impl PipelineError {
    /// Process exit status for the command-line contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingUpstream(_) => 3,
            PipelineError::GrowthStalled { .. } => 4,
            PipelineError::ValidationFailed { .. } => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
