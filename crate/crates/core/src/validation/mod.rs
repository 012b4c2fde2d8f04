//! Validation model: a small region classifier trained either on augmented
//! real positives or on ensemble samples, FROC analysis, and the rule that
//! decides when an ensemble is large enough.

mod classifier;
mod controller;
mod froc;
mod source;

pub use classifier::{auc, train_validation_model, Classifier, ValidationConfig};
pub use controller::{
    crossval_run, growth_controller, ControllerConfig, ControllerReport, CrossvalConfig,
    CrossvalReport, FoldReport, RoundRecord,
};
pub use froc::{
    afp_at_sensitivity, check_validation_criterion, froc_curve, froc_from_scores, mean_curve,
    write_froc_csv, FrocCurve, FrocPoint, ScoredRegion, ValidationVerdict,
};
pub use source::{audit_test_purity, paired_batch, regions_of, PositiveSource, Provenance, Region};

use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::nn::NnError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("no negative regions to pair with")]
    EmptyNegatives,
    #[error("no positive regions in the evaluation set")]
    NoPositives,
    #[error("no subjects in the evaluation set")]
    NoSubjects,
    #[error("sensitivity {0} is not reached by the curve")]
    SensitivityUnreachable(f64),
    #[error("invalid validation configuration: {0}")]
    InvalidConfig(String),
    #[error("provenance violation: {0}")]
    ProvenanceViolation(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ValidationError>;
