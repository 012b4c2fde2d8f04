//! Embedding diagnostics: PCA, exact t-SNE, and scores for how well
//! synthetic samples mix with and cover the real data.

mod mixing;
mod pca;
mod tsne;

pub use mixing::{
    class_centroids, mixing_score, mode_coverage, nearest_centroid, write_embedding_csv,
};
pub use pca::{pca_fit, pca_inverse_transform, pca_transform, PcaModel};
pub use tsne::{tsne, TsneConfig, TsneResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("too few samples: {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid number of components {requested} (at most {max})")]
    InvalidComponents { requested: usize, max: usize },
    #[error("perplexity {perplexity} infeasible for {points} points")]
    PerplexityInfeasible { perplexity: f64, points: usize },
    #[error("invalid embedding configuration: {0}")]
    InvalidConfig(String),
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

fn check_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<usize> {
    let dim = rows.first().map_or(0, |r| r.as_ref().len());
    if let Some(r) = rows.iter().find(|r| r.as_ref().len() != dim) {
        return Err(EmbeddingError::DimMismatch(format!(
            "row of length {} among rows of length {dim}",
            r.as_ref().len()
        )));
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
