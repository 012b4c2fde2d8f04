use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_rows, sq_dist, EmbeddingError, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration_factor: f64,
    /// Iterations run with exaggerated affinities and low momentum.
    pub early_exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, points: usize) -> Result<()> {
        if points < 10 {
            return Err(EmbeddingError::TooFewSamples(points));
        }
        if !(self.perplexity > 1.0 && self.perplexity < (points as f64 - 1.0) / 3.0) {
            return Err(EmbeddingError::PerplexityInfeasible {
                perplexity: self.perplexity,
                points,
            });
        }
        if self.iterations < 250 {
            return Err(EmbeddingError::InvalidConfig(format!(
                "{} iterations; at least 250 are required",
                self.iterations
            )));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration_factor >= 1.0) {
            return Err(EmbeddingError::InvalidConfig(
                "learning rate must be positive and exaggeration at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) before each iteration's update.
    pub kl_trace: Vec<f64>,
    /// Entropy in bits of each point's calibrated conditional distribution.
    pub entropies: Vec<f64>,
}

const ENTROPY_TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-12;

/// Conditional distribution of point `self_index` at precision `beta`, and
/// its entropy in bits. `d` holds the point's squared distances to all points.
fn conditional(d: &[f64], self_index: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_index)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        if j == self_index {
            *o = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        let w = (-beta * shifted).exp();
        *o = w;
        z += w;
        weighted += shifted * w;
    }
    out.iter_mut().for_each(|o| *o /= z);
    (z.ln() + beta * weighted / z) / std::f64::consts::LN_2
}

/// Finds the precision whose conditional entropy is `log2(perplexity)`.
fn calibrate_row(d: &[f64], i: usize, perplexity: f64, out: &mut [f64]) -> f64 {
    let target = perplexity.log2();
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut beta = 1.0;
    let mut h = conditional(d, i, beta, out);
    for _ in 0..200 {
        if (h - target).abs() < ENTROPY_TOL {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() {
                (beta + hi) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        h = conditional(d, i, beta, out);
    }
    h
}

/// KL(P || Q) at `y` (with unexaggerated P) and its gradient with P scaled
/// by `exaggeration`.
fn kl_and_gradient(
    p: &[f64],
    y: &[[f64; 2]],
    exaggeration: f64,
    num: &mut [f64],
    grad: &mut [[f64; 2]],
) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = q;
            z += 2.0 * q;
        }
    }
    let mut kl = 0.0;
    grad.iter_mut().for_each(|g| *g = [0.0; 2]);
    for i in 0..n {
        for j in i + 1..n {
            let pij = p[i * n + j];
            let w = num[i * n + j];
            let q = (w / z).max(FLOOR);
            kl += 2.0 * pij * (pij / q).ln();
            let m = 4.0 * (exaggeration * pij - q) * w;
            let d = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            for a in 0..2 {
                grad[i][a] += m * d[a];
                grad[j][a] -= m * d[a];
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions.
pub fn tsne<R: AsRef<[f64]>>(points: &[R], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = points.len();
    cfg.validate(n)?;
    check_rows(points)?;

    // Affinities.
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(points[i].as_ref(), points[j].as_ref());
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut cond = vec![0.0; n * n];
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        let h = calibrate_row(
            &dist[i * n..(i + 1) * n],
            i,
            cfg.perplexity,
            &mut cond[i * n..(i + 1) * n],
        );
        entropies.push(h);
    }
    drop(dist);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(FLOOR);
            }
        }
    }
    drop(cond);

    // Optimization.
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, stream::EMBEDDING));
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);
    // Last accepted state after early exaggeration, and the step scale.
    let mut accepted: Option<(Vec<[f64; 2]>, Vec<[f64; 2]>, f64)> = None;
    let mut scale: f64 = 1.0;
    for it in 0..cfg.iterations {
        let early = it < cfg.early_exaggeration_iters;
        let exaggeration = if early {
            cfg.early_exaggeration_factor
        } else {
            1.0
        };
        let momentum = if early { 0.5 } else { 0.8 };
        let mut kl = kl_and_gradient(&p, &y, exaggeration, &mut num, &mut grad);

        // Past early exaggeration a step that raises KL is undone and
        // retried from rest with half the step.
        let mut rejected = false;
        if !early {
            match &accepted {
                Some((prev_y, prev_grad, prev_kl)) if kl > *prev_kl => {
                    y.clone_from(prev_y);
                    grad.clone_from(prev_grad);
                    kl = *prev_kl;
                    update.iter_mut().for_each(|u| *u = [0.0; 2]);
                    scale *= 0.5;
                    rejected = true;
                }
                _ => {
                    scale = (scale * 1.1).min(1.0);
                    accepted = Some((y.clone(), grad.clone(), kl));
                }
            }
        }
        kl_trace.push(kl);

        for i in 0..n {
            for a in 0..2 {
                if !rejected {
                    let g: f64 = gains[i][a];
                    let g = if (grad[i][a] > 0.0) != (update[i][a] > 0.0) {
                        g + 0.2
                    } else {
                        g * 0.8
                    };
                    gains[i][a] = g.max(0.01);
                }
                update[i][a] =
                    momentum * update[i][a] - scale * cfg.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += update[i][a];
            }
        }
        for a in 0..2 {
            let mean = y.iter().map(|v| v[a]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| v[a] -= mean);
        }
    }
    Ok(TsneResult {
        coords: y,
        kl_trace,
        entropies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn two_clusters(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut pts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let offset = if c == 0 { 0.0 } else { 20.0 };
            pts.push(
                (0..dim)
                    .map(|_| offset + r.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
        (pts, labels)
    }

    #[test]
    fn bandwidths_hit_the_target_entropy() {
        let (pts, _) = two_clusters(60, 5, 1);
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 250,
            ..Default::default()
        };
        let res = tsne(&pts, &cfg).unwrap();
        for h in &res.entropies {
            assert!((h - 10f64.log2()).abs() < 1e-3, "{h}");
        }
    }

    #[test]
    fn separates_clusters_and_converges() {
        let (pts, labels) = two_clusters(80, 10, 2);
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 1000,
            ..Default::default()
        };
        let res = tsne(&pts, &cfg).unwrap();
        let tail = &res.kl_trace[res.kl_trace.len() - 50..];
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "KL rose from {} to {}", w[0], w[1]);
        }
        // Cluster means in the embedding are far apart relative to spread.
        let centroid = |c: usize| {
            let sel: Vec<_> = res
                .coords
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| *p)
                .collect();
            let m = [0, 1].map(|a| sel.iter().map(|p| p[a]).sum::<f64>() / sel.len() as f64);
            let spread = (sel
                .iter()
                .map(|p| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2))
                .sum::<f64>()
                / sel.len() as f64)
                .sqrt();
            (m, spread)
        };
        let ((a, sa), (b, sb)) = (centroid(0), centroid(1));
        let gap = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!(gap > 2.0 * (sa + sb), "gap {gap}, spreads {sa} {sb}");
        // Deterministic given the seed.
        assert_eq!(tsne(&pts, &cfg).unwrap(), res);
    }

    #[test]
    fn rejects_infeasible_configs() {
        let (pts, _) = two_clusters(30, 3, 0);
        let bad = |perplexity| TsneConfig {
            perplexity,
            ..Default::default()
        };
        assert!(matches!(
            tsne(&pts, &bad(30.0)),
            Err(EmbeddingError::PerplexityInfeasible { .. })
        ));
        assert!(matches!(
            tsne(&pts, &bad(1.0)),
            Err(EmbeddingError::PerplexityInfeasible { .. })
        ));
        assert!(matches!(
            tsne(&pts[..5], &bad(1.5)),
            Err(EmbeddingError::TooFewSamples(5))
        ));
        let short = TsneConfig {
            perplexity: 5.0,
            iterations: 100,
            ..Default::default()
        };
        assert!(tsne(&pts, &short).is_err());
    }
}
