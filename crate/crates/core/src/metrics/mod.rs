//! Raw-voxel-space Fréchet distance and histogram information measures.

mod frechet;
mod information;

pub use frechet::{
    frechet_distance, frechet_distance_direct, frechet_distance_gram, gaussian_stats,
    gaussian_stats_from_rows, FrechetStats, EIGEN_CLAMP,
};
pub use information::{
    conditional_entropy, joint_entropy, max_mutual_information, mutual_information,
    shannon_entropy, HistogramSpec, MiScreen,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),
    #[error("no real samples to compare against")]
    EmptyReals,
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;
