//! Constrained GAN ensembles: MI-screened sampling, FD-based checkpoint
//! selection, incremental growth and persistence.

mod calibrate;
mod grow;
mod persist;
mod screen;

pub use calibrate::{calibrate_omega, calibrate_phi, CalibrationConfig};
pub use grow::{grow, CandidateLog, Component, Ensemble, EnsembleConfig, GrowthReport};
pub use persist::{load_ensemble, save_ensemble, ENSEMBLE_MANIFEST};
pub use screen::{
    evaluate_candidate, screened_sample, screened_samples, CandidateOutcome, FdTracePoint,
    ScreenStats, VolumeSource,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::gan::GanError;
use crate::metrics::MetricsError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("MI screen exhausted after {rejections} consecutive rejections")]
    ScreenExhausted { rejections: usize },
    #[error("ensemble growth stalled after {failures} consecutive rejected training runs")]
    GrowthStalled { failures: usize },
    #[error("ensemble has no components")]
    EmptyEnsemble,
    #[error("no checkpoints to evaluate")]
    NoCheckpoints,
    #[error("invalid ensemble configuration: {0}")]
    InvalidConfig(String),
    #[error("bad ensemble manifest: {0}")]
    BadManifest(String),
    #[error("missing checkpoint file {0}")]
    MissingCheckpointFile(PathBuf),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;
