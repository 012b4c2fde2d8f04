use nalgebra::{DMatrix, DVector, SVD};

use super::{MetricsError, Result};
use crate::linalg::symmetric_eigen;
use crate::Volume;

/// Eigenvalues below `EIGEN_CLAMP * max_eigenvalue` are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Mean and covariance of a set of flattened samples.
///
/// Built from samples, the covariance is kept in factored form
/// `C = A Aᵀ` with `A` the centered data scaled by `1/sqrt(n-1)`
/// (`dim x n`), which is all the Gram path needs; the dense matrix is only
/// formed on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    dim: usize,
    mean: DVector<f64>,
    cov: Covariance,
    sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Covariance {
    Dense(DMatrix<f64>),
    Factor(DMatrix<f64>),
}

impl FrechetStats {
    /// Stats from explicit moments. `cov` must be symmetric `dim x dim`.
    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>, sample_count: usize) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(MetricsError::DimMismatch(format!(
                "covariance is {}x{}, mean has {dim} entries",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if sample_count < 2 {
            return Err(MetricsError::TooFewSamples(sample_count));
        }
        Ok(Self {
            dim,
            mean: DVector::from_vec(mean),
            cov: Covariance::Dense(cov),
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Dense covariance matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Dense(c) => c.clone(),
            Covariance::Factor(a) => a * a.transpose(),
        }
    }

    fn trace(&self) -> f64 {
        match &self.cov {
            Covariance::Dense(c) => c.trace(),
            Covariance::Factor(a) => a.iter().map(|x| x * x).sum(),
        }
    }

    fn factor(&self) -> Option<&DMatrix<f64>> {
        match &self.cov {
            Covariance::Factor(a) => Some(a),
            Covariance::Dense(_) => None,
        }
    }
}

/// Mean and unbiased covariance of flattened volumes.
pub fn gaussian_stats(samples: &[Volume]) -> Result<FrechetStats> {
    if let Some(first) = samples.first() {
        if let Some(v) = samples.iter().find(|v| v.dims() != first.dims()) {
            return Err(MetricsError::DimMismatch(format!(
                "sample dims {:?} differ from {:?}",
                v.dims(),
                first.dims()
            )));
        }
    }
    let rows: Vec<&[f64]> = samples.iter().map(Volume::voxels).collect();
    gaussian_stats_from_rows(&rows)
}

/// Mean and unbiased covariance of equal-length vectors.
pub fn gaussian_stats_from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<FrechetStats> {
    let n = rows.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let dim = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(MetricsError::DimMismatch(
            "rows have differing lengths".into(),
        ));
    }
    // Shifted by the first row: exact for constant data.
    let origin = rows[0].as_ref();
    let mut mean = DVector::zeros(dim);
    for r in rows {
        for ((m, x), o) in mean.iter_mut().zip(r.as_ref()).zip(origin) {
            *m += x - o;
        }
    }
    for (m, o) in mean.iter_mut().zip(origin) {
        *m = o + *m / n as f64;
    }
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let mut a = DMatrix::zeros(dim, n);
    for (j, r) in rows.iter().enumerate() {
        for (i, x) in r.as_ref().iter().enumerate() {
            a[(i, j)] = (x - mean[i]) * scale;
        }
    }
    Ok(FrechetStats {
        dim,
        mean,
        cov: Covariance::Factor(a),
        sample_count: n,
    })
}

/// Squared Fréchet distance between the Gaussians described by `a` and `b`,
/// clamped to be non-negative.
///
/// Uses the Gram path when both sides carry sample factors narrower than the
/// dimension, and the direct eigendecomposition path otherwise.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    check_dims(a, b)?;
    match (a.factor(), b.factor()) {
        (Some(fa), Some(fb)) if fa.ncols().min(fb.ncols()) < a.dim => frechet_distance_gram(a, b),
        _ => frechet_distance_direct(a, b),
    }
}

fn check_dims(a: &FrechetStats, b: &FrechetStats) -> Result<()> {
    if a.dim != b.dim {
        return Err(MetricsError::DimMismatch(format!("{} vs {}", a.dim, b.dim)));
    }
    Ok(())
}

fn assemble(a: &FrechetStats, b: &FrechetStats, cross: f64) -> f64 {
    let dm = (&a.mean - &b.mean).norm_squared();
    (dm + a.trace() + b.trace() - 2.0 * cross).max(0.0)
}

/// `V sqrt(Λ)` from the eigendecomposition of a dense covariance, keeping
/// only eigenvalues above `EIGEN_CLAMP * max`.
fn dense_factor(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::EigenFailure(
            "matrix has non-finite entries".into(),
        ));
    }
    let (values, vectors) =
        symmetric_eigen(c).ok_or_else(|| MetricsError::EigenFailure("did not converge".into()))?;
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    let floor = EIGEN_CLAMP * max;
    let kept: Vec<usize> = (0..values.len()).filter(|&j| values[j] > floor).collect();
    Ok(DMatrix::from_fn(c.nrows(), kept.len(), |i, k| {
        vectors[(i, kept[k])] * values[kept[k]].sqrt()
    }))
}

/// Sum of singular values. For factors `C_a = A Aᵀ`, `C_b = B Bᵀ` the
/// nuclear norm of `Aᵀ B` equals `Σ sqrt(eig(Bᵀ C_a B))` without squaring
/// and re-rooting small values.
fn nuclear_norm(m: DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::EigenFailure(
            "matrix has non-finite entries".into(),
        ));
    }
    let svd = SVD::try_new(m, false, false, f64::EPSILON, 0)
        .ok_or_else(|| MetricsError::EigenFailure("SVD did not converge".into()))?;
    Ok(svd.singular_values.iter().sum())
}

/// Direct path: factor both covariances by eigendecomposition and take the
/// cross term `Σ sqrt(eig(L_bᵀ C_a L_b))` as the nuclear norm of `L_aᵀ L_b`.
pub fn frechet_distance_direct(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    check_dims(a, b)?;
    let la = dense_factor(&a.covariance())?;
    let lb = dense_factor(&b.covariance())?;
    let cross = nuclear_norm(la.transpose() * lb)?;
    Ok(assemble(a, b, cross))
}

/// Gram path: with sample factors `C_a = A Aᵀ`, `C_b = B Bᵀ` the cross term
/// is the nuclear norm of the small `Aᵀ B`. Dense-only stats fall back to
/// the direct path.
pub fn frechet_distance_gram(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    check_dims(a, b)?;
    let (Some(fa), Some(fb)) = (a.factor(), b.factor()) else {
        return frechet_distance_direct(a, b);
    };
    let cross = nuclear_norm(fa.transpose() * fb)?;
    Ok(assemble(a, b, cross))
}
