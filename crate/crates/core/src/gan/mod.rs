//! Volumetric DCGAN: architecture builders, adversarial training with
//! periodic generator snapshots, and sampling.

mod arch;
mod persist;
mod train;

pub use arch::{build_discriminator, build_generator, Architecture};
pub use persist::{read_checkpoint, write_checkpoint, CheckpointSidecar};
pub use train::{
    generate_samples, train_gan, EpochStats, GanCheckpoint, GanHyperParams, GanRun, Generator,
};

use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("no training volumes")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("unsupported volume dims {0:?}: every axis must be a positive multiple of 4")]
    UnsupportedDims([usize; 3]),
    #[error("non-finite {what} loss at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint sidecar: {0}")]
    BadSidecar(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GanError>;
