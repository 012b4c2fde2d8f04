use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::source::{paired_batch, PositiveSource};
use super::{Result, ValidationError};
use crate::nn::{
    adam_step, bce_loss, AdamConfig, AdamState, LayerSpec, Mode, Params, Sequential, Tensor,
};
use crate::rng::{self, stream};
use crate::volume::AugmentParams;
use crate::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Regions per batch, half positive and half negative.
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub channels: [usize; 2],
    pub leaky_slope: f64,
    pub augment: AugmentParams,
    /// Sensitivity at which AFP is compared.
    pub sensitivity: f64,
    /// Allowed AFP excess of the candidate over the baseline.
    pub tolerance: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 300,
            learning_rate: 1e-3,
            channels: [8, 16],
            leaky_slope: 0.1,
            augment: AugmentParams::default(),
            sensitivity: 0.9,
            tolerance: 1.0,
        }
    }
}

impl ValidationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ValidationError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.channels.contains(&0) {
            return bad("channels must be positive");
        }
        if !(self.sensitivity > 0.0 && self.sensitivity <= 1.0) {
            return bad("sensitivity must be in (0, 1]");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        if !self.augment.is_valid() {
            return bad("invalid augmentation parameters");
        }
        Ok(())
    }

    /// Region classifier for volumes of `dims` (x, y, z).
    pub fn network(&self, dims: [usize; 3]) -> Result<Sequential> {
        let [nx, ny, nz] = dims;
        let [c1, c2] = self.channels;
        let coarse: usize = dims.iter().map(|d| (d - 1) / 2 + 1).product();
        Ok(Sequential::new(
            vec![1, nz, ny, nx],
            vec![
                LayerSpec::Conv3d {
                    in_channels: 1,
                    out_channels: c1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::LeakyRelu {
                    slope: self.leaky_slope,
                },
                LayerSpec::Conv3d {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::LeakyRelu {
                    slope: self.leaky_slope,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: c2 * coarse,
                    out_features: 1,
                },
                LayerSpec::Sigmoid,
            ],
        )?)
    }
}

/// A trained region classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: Sequential,
    pub params: Params,
}

impl Classifier {
    /// Untrained classifier with weights drawn from `seed`.
    pub fn init(cfg: &ValidationConfig, dims: [usize; 3], seed: u64) -> Result<Self> {
        let net = cfg.network(dims)?;
        let params = net.init_params(&mut rng::seeded(rng::derive_seed(seed, stream::VALIDATION)));
        Ok(Self { net, params })
    }

    /// Lesion scores in (0, 1).
    pub fn score(&self, volumes: &[Volume]) -> Result<Vec<f64>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(volumes.len());
        for chunk in volumes.chunks(CHUNK) {
            let x = stack(chunk)?;
            out.extend_from_slice(self.net.forward_eval(&self.params, &x)?.data());
        }
        Ok(out)
    }
}

fn stack(volumes: &[Volume]) -> Result<Tensor> {
    let [nx, ny, nz] = volumes[0].dims();
    let mut data = Vec::with_capacity(volumes.len() * nx * ny * nz);
    for v in volumes {
        if v.dims() != [nx, ny, nz] {
            return Err(ValidationError::InvalidConfig(format!(
                "region dims {:?} differ from {:?}",
                v.dims(),
                [nx, ny, nz]
            )));
        }
        data.extend_from_slice(v.voxels());
    }
    Ok(Tensor::new(vec![volumes.len(), 1, nz, ny, nx], data)?)
}

/// Trains a classifier for `cfg.steps` Adam steps on paired batches.
/// Initialization and batch sampling are both derived from `seed`.
pub fn train_validation_model(
    source: &PositiveSource,
    negatives: &[Volume],
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<Classifier> {
    cfg.validate()?;
    let dims = negatives
        .first()
        .ok_or(ValidationError::EmptyNegatives)?
        .dims();
    let mut model = Classifier::init(cfg, dims, seed)?;
    let mut opt = AdamState::new(
        AdamConfig::new(cfg.learning_rate, 0.9, 0.999),
        &model.params,
    );
    let mut rng = rng::seeded(rng::derive_seed(
        rng::derive_seed(seed, stream::VALIDATION),
        1,
    ));
    for _ in 0..cfg.steps {
        let (volumes, labels) = paired_batch(source, negatives, cfg.batch_size, &mut rng)?;
        let x = stack(&volumes)?;
        let (y, mut cache) = model.net.forward(
            &mut model.params,
            &x,
            Mode::Train,
            &mut rng as &mut dyn RngCore,
        )?;
        let (_, grad) = bce_loss(&y, &labels)?;
        model.params.zero_grad();
        model.net.backward(&mut cache, &mut model.params, &grad)?;
        adam_step(&mut opt, &mut model.params);
    }
    for t in &mut model.params.tensors {
        t.grad = None;
    }
    Ok(model)
}

/// Area under the ROC curve (Mann-Whitney statistic, ties count half).
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}
