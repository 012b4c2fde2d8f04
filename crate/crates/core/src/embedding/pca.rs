use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_rows, EmbeddingError, Result};
use crate::linalg::symmetric_eigen;

/// Principal axes of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Orthonormal rows, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub explained_variance: Vec<f64>,
    /// `explained_variance` over the total sample variance.
    pub explained_variance_ratios: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Top `n_components` eigenvectors of the sample covariance. When there are
/// fewer samples than dimensions the eigenproblem is solved on the Gram
/// matrix instead.
fn eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    symmetric_eigen(m).ok_or(EmbeddingError::EigenFailure)
}

pub fn pca_fit<R: AsRef<[f64]>>(samples: &[R], n_components: usize) -> Result<PcaModel> {
    let n = samples.len();
    if n < 2 {
        return Err(EmbeddingError::TooFewSamples(n));
    }
    let dim = check_rows(samples)?;
    let max = (n - 1).min(dim);
    if n_components == 0 || n_components > max {
        return Err(EmbeddingError::InvalidComponents {
            requested: n_components,
            max,
        });
    }
    let mut mean = vec![0.0; dim];
    for r in samples {
        for (m, x) in mean.iter_mut().zip(r.as_ref()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // Centered data, one sample per row.
    let x = DMatrix::from_fn(n, dim, |i, j| samples[i].as_ref()[j] - mean[j]);
    let scale = 1.0 / (n - 1) as f64;
    let total: f64 = x.iter().map(|v| v * v).sum::<f64>() * scale;

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut variance = Vec::with_capacity(n_components);
    if n < dim {
        let gram = (&x * x.transpose()) * scale;
        let (values, vectors) = eigen(&gram)?;
        for k in descending(values.as_slice()).into_iter().take(n_components) {
            let lambda = values[k].max(0.0);
            let v = x.transpose() * vectors.column(k);
            components.push(v.as_slice().to_vec());
            variance.push(lambda);
        }
    } else {
        let cov = (x.transpose() * &x) * scale;
        let (values, vectors) = eigen(&cov)?;
        for k in descending(values.as_slice()).into_iter().take(n_components) {
            components.push(vectors.column(k).as_slice().to_vec());
            variance.push(values[k].max(0.0));
        }
    }
    orthonormalize(&mut components);
    let ratios = variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance: variance,
        explained_variance_ratios: ratios,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Modified Gram-Schmidt, applied twice. Rows that vanish (directions of
/// zero variance from the Gram path) are replaced by the first coordinate
/// axis that is not yet spanned.
fn orthonormalize(rows: &mut [Vec<f64>]) {
    let dim = rows.first().map_or(0, Vec::len);
    let mut next_axis = 0;
    for i in 0..rows.len() {
        loop {
            for _pass in 0..2 {
                for j in 0..i {
                    let (done, rest) = rows.split_at_mut(i);
                    let dot: f64 = done[j].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                    rest[0]
                        .iter_mut()
                        .zip(&done[j])
                        .for_each(|(x, q)| *x -= dot * q);
                }
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows[i].iter_mut().for_each(|x| *x /= norm);
                break;
            }
            rows[i] = vec![0.0; dim];
            rows[i][next_axis % dim] = 1.0;
            next_axis += 1;
        }
    }
}

/// Centered projections onto the model's components.
pub fn pca_transform<R: AsRef<[f64]>>(model: &PcaModel, samples: &[R]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let s = s.as_ref();
            if s.len() != model.dim() {
                return Err(EmbeddingError::DimMismatch(format!(
                    "sample of length {} for a model of dimension {}",
                    s.len(),
                    model.dim()
                )));
            }
            Ok(model
                .components
                .iter()
                .map(|c| {
                    c.iter()
                        .zip(s)
                        .zip(&model.mean)
                        .map(|((c, x), m)| c * (x - m))
                        .sum()
                })
                .collect())
        })
        .collect()
}

pub fn pca_inverse_transform<R: AsRef<[f64]>>(
    model: &PcaModel,
    reduced: &[R],
) -> Result<Vec<Vec<f64>>> {
    reduced
        .iter()
        .map(|r| {
            let r = r.as_ref();
            if r.len() != model.components.len() {
                return Err(EmbeddingError::DimMismatch(format!(
                    "{} coordinates for {} components",
                    r.len(),
                    model.components.len()
                )));
            }
            let mut out = model.mean.clone();
            for (w, c) in r.iter().zip(&model.components) {
                out.iter_mut().zip(c).for_each(|(o, c)| *o += w * c);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| r.sample(StandardNormal)).collect())
            .collect()
    }

    fn check_orthonormal(m: &PcaModel) {
        for (i, a) in m.components.iter().enumerate() {
            for (j, b) in m.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "<{i},{j}> = {dot}");
            }
        }
        for w in m.explained_variance_ratios.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(m
            .explained_variance_ratios
            .iter()
            .all(|&r| (0.0..=1.0).contains(&r)));
        assert!(m.explained_variance_ratios.iter().sum::<f64>() <= 1.0 + 1e-9);
    }

    #[test]
    fn plane_in_ten_dimensions() {
        let mut r = rng::seeded(1);
        let u: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let v: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
        let data: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
                u.iter().zip(&v).map(|(x, y)| 1.0 + a * x + b * y).collect()
            })
            .collect();
        let m = pca_fit(&data, 2).unwrap();
        check_orthonormal(&m);
        assert!((m.explained_variance_ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let back = pca_inverse_transform(&m, &pca_transform(&m, &data).unwrap()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert!(super::super::sq_dist(a, b).sqrt() < 1e-9);
        }
    }

    #[test]
    fn isotropic_cloud_spreads_variance_evenly() {
        let dim = 5;
        let m = pca_fit(&cloud(4000, dim, 2), dim).unwrap();
        check_orthonormal(&m);
        for r in &m.explained_variance_ratios {
            assert!((r - 0.2).abs() < 0.03, "{r}");
        }
    }

    #[test]
    fn gram_path_with_rank_deficiency() {
        // 6 samples in 40 dims with only 2 directions of variance; all 5
        // components must still be orthonormal.
        let data: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                (0..40)
                    .map(|j| {
                        if j == 0 {
                            i as f64
                        } else if j == 1 {
                            (i % 2) as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let m = pca_fit(&data, 5).unwrap();
        check_orthonormal(&m);
        let back = pca_inverse_transform(&m, &pca_transform(&m, &data).unwrap()).unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert!(super::super::sq_dist(a, b).sqrt() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pca_fit(&cloud(1, 3, 0), 1),
            Err(EmbeddingError::TooFewSamples(1))
        ));
        assert!(pca_fit(&cloud(5, 3, 0), 4).is_err());
        let m = pca_fit(&cloud(5, 3, 0), 2).unwrap();
        assert!(pca_transform(&m, &[vec![0.0; 2]]).is_err());
    }

    proptest! {
        #[test]
        fn projection_properties(seed in 0u64..1000, n in 3usize..20, dim in 2usize..30) {
            let data = cloud(n, dim, seed);
            let k = (n - 1).min(dim);
            let m = pca_fit(&data, k).unwrap();
            check_orthonormal(&m);
            let z = pca_transform(&m, &[m.mean.clone()]).unwrap();
            prop_assert!(z[0].iter().all(|v| v.abs() < 1e-9));
            let back = pca_inverse_transform(&m, &pca_transform(&m, &data).unwrap()).unwrap();
            for (a, b) in data.iter().zip(&back) {
                prop_assert!(super::super::sq_dist(a, b).sqrt() < 1e-9);
            }
            let partial = pca_fit(&data, 1).unwrap();
            for (x, p) in data.iter().zip(pca_transform(&partial, &data).unwrap()) {
                let centered: f64 = x.iter().zip(&partial.mean).map(|(a, m)| (a - m) * (a - m)).sum();
                prop_assert!(p[0] * p[0] <= centered + 1e-9);
            }
        }
    }
}
