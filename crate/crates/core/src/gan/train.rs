use log::{debug, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{build_discriminator, build_generator, Architecture};
use super::{GanError, Result};
use crate::nn::{adam_step, bce_loss, AdamConfig, AdamState, Mode, Params, Sequential, Tensor};
use crate::rng::{self, stream};
use crate::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanHyperParams {
    pub latent_dim: usize,
    pub epochs: usize,
    /// Real samples per discriminator step (matched by as many fakes).
    pub batch_size: usize,
    pub lr_discriminator: f64,
    pub lr_gan: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub checkpoint_every_n_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
}

impl Default for GanHyperParams {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            epochs: 1500,
            batch_size: 8,
            lr_discriminator: 0.00005,
            lr_gan: 0.0003,
            beta1: 0.5,
            beta2: 0.999,
            dropout_rate: 0.15,
            leaky_slope: 0.1,
            checkpoint_every_n_epochs: 50,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl GanHyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GanError::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 || self.batch_size == 0 {
            return bad("latent_dim and batch_size must be positive");
        }
        if self.checkpoint_every_n_epochs == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        if !(self.lr_discriminator > 0.0 && self.lr_gan > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.architecture.generator.contains(&0) || self.architecture.discriminator.contains(&0)
        {
            return bad("channel widths must be positive");
        }
        Ok(())
    }
}

/// A generator snapshot taken during training.
#[derive(Debug, Clone, PartialEq)]
pub struct GanCheckpoint {
    pub epoch: usize,
    pub generator_params: Params,
    pub fd_score: Option<f64>,
    pub mi_rejection_count: Option<usize>,
}

/// Mean losses and discriminator outputs over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

#[derive(Debug, Clone)]
pub struct GanRun {
    pub generator_net: Sequential,
    /// The untrained generator (epoch 0); not a screening candidate.
    pub initial: GanCheckpoint,
    pub checkpoints: Vec<GanCheckpoint>,
    pub history: Vec<EpochStats>,
    pub final_params: Params,
}

impl GanRun {
    pub fn generator(&self, checkpoint: &GanCheckpoint) -> Generator {
        Generator::new(
            self.generator_net.clone(),
            checkpoint.generator_params.clone(),
        )
    }
}

/// A generator network with a fixed parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    net: Sequential,
    params: Params,
}

impl Generator {
    pub fn new(net: Sequential, params: Params) -> Self {
        Self { net, params }
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_shape()[0]
    }

    /// Output dims as (x, y, z).
    pub fn dims(&self) -> [usize; 3] {
        let s = self.net.output_shape();
        [s[3], s[2], s[1]]
    }

    pub fn generate(&self, count: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Volume>> {
        generate_samples(self, count, rng)
    }
}

/// Keeps generated voxels strictly inside (0, 1) even where the sigmoid
/// saturates.
const OUTPUT_MARGIN: f64 = 1e-12;

/// Eval-mode samples from independent standard-normal latent draws.
pub fn generate_samples(
    gen: &Generator,
    count: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<Volume>> {
    const CHUNK: usize = 64;
    let latent = gen.latent_dim();
    let dims = gen.dims();
    let voxels: usize = dims.iter().product();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = (count - out.len()).min(CHUNK);
        let z = latent_batch(n, latent, rng);
        let y = gen.net.forward_eval(&gen.params, &z)?;
        for chunk in y.data().chunks_exact(voxels) {
            let v = chunk
                .iter()
                .map(|x| x.clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN))
                .collect();
            out.push(Volume::from_voxels(dims, v));
        }
    }
    Ok(out)
}

fn latent_batch(n: usize, latent: usize, rng: &mut dyn rand::RngCore) -> Tensor {
    let data = (0..n * latent)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(vec![n, latent], data).expect("non-empty latent batch")
}

fn real_batch(positives: &[Volume], n: usize, rng: &mut impl Rng) -> Tensor {
    let [nx, ny, nz] = positives[0].dims();
    let mut data = Vec::with_capacity(n * nx * ny * nz);
    for _ in 0..n {
        data.extend_from_slice(positives[rng.gen_range(0..positives.len())].voxels());
    }
    Tensor::new(vec![n, 1, nz, ny, nx], data).expect("non-empty real batch")
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.batch();
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data).expect("matching sample shapes")
}

fn snapshot(params: &Params) -> Params {
    let mut p = params.clone();
    for t in &mut p.tensors {
        t.grad = None;
    }
    p
}

/// Adversarial training on `positives`.
///
/// An epoch is `max(1, N / batch_size)` steps. Each step updates the
/// discriminator once on `batch_size` reals (label 1) plus `batch_size`
/// fakes (label 0), then the generator once through the updated, frozen
/// discriminator toward label 1 using the same latent draws. The generator
/// is snapshotted at every positive multiple of the checkpoint interval.
pub fn train_gan(
    positives: &[Volume],
    hp: &GanHyperParams,
    mut progress: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<GanRun> {
    hp.validate()?;
    let first = positives.first().ok_or(GanError::EmptyDataset)?;
    let dims = first.dims();
    if let Some(v) = positives.iter().find(|v| v.dims() != dims) {
        return Err(GanError::DimMismatch(format!("{:?} vs {dims:?}", v.dims())));
    }
    if hp.epochs < hp.checkpoint_every_n_epochs {
        warn!(
            "{} epochs is shorter than the checkpoint interval {}; no checkpoints will be taken",
            hp.epochs, hp.checkpoint_every_n_epochs
        );
    }

    let g_net = build_generator(hp.latent_dim, dims, &hp.architecture, hp.leaky_slope)?;
    let d_net = build_discriminator(dims, &hp.architecture, hp.leaky_slope, hp.dropout_rate)?;
    let mut init_rng = rng::seeded(rng::derive_seed(hp.seed, stream::GAN_INIT));
    let mut g_params = g_net.init_params(&mut init_rng);
    let mut d_params = d_net.init_params(&mut init_rng);
    let mut g_opt = AdamState::new(AdamConfig::new(hp.lr_gan, hp.beta1, hp.beta2), &g_params);
    let mut d_opt = AdamState::new(
        AdamConfig::new(hp.lr_discriminator, hp.beta1, hp.beta2),
        &d_params,
    );
    let mut rng = rng::seeded(rng::derive_seed(hp.seed, stream::GAN_TRAIN));

    let b = hp.batch_size;
    let d_targets: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
    let g_targets = vec![1.0; b];
    let steps = (positives.len() / b).max(1);

    let initial = GanCheckpoint {
        epoch: 0,
        generator_params: snapshot(&g_params),
        fd_score: None,
        mi_rejection_count: None,
    };
    let mut checkpoints = Vec::new();
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        let mut sums = [0.0; 4];
        for step in 0..steps {
            let reals = real_batch(positives, b, &mut rng);
            let z = latent_batch(b, hp.latent_dim, &mut rng);
            let (fake, mut g_cache) = g_net.forward(&mut g_params, &z, Mode::Train, &mut rng)?;

            // Discriminator: reals then fakes in one batch.
            let d_in = concat_batches(&reals, &fake);
            let (d_out, mut d_cache) =
                d_net.forward(&mut d_params, &d_in, Mode::Train, &mut rng)?;
            let (d_loss, d_grad) = bce_loss(&d_out, &d_targets)?;
            if !d_loss.is_finite() {
                return Err(GanError::NonFinite {
                    what: "discriminator",
                    epoch,
                    step,
                });
            }
            d_params.zero_grad();
            d_net.backward(&mut d_cache, &mut d_params, &d_grad)?;
            adam_step(&mut d_opt, &mut d_params);

            // Generator through the frozen discriminator.
            let (g_out, mut dg_cache) =
                d_net.forward(&mut d_params, &fake, Mode::Train, &mut rng)?;
            let (g_loss, g_grad) = bce_loss(&g_out, &g_targets)?;
            if !g_loss.is_finite() {
                return Err(GanError::NonFinite {
                    what: "generator",
                    epoch,
                    step,
                });
            }
            let d_fake_grad = d_net.backward_input(&mut dg_cache, &d_params, &g_grad)?;
            g_params.zero_grad();
            g_net.backward(&mut g_cache, &mut g_params, &d_fake_grad)?;
            adam_step(&mut g_opt, &mut g_params);

            let scores = d_out.data();
            sums[0] += d_loss;
            sums[1] += g_loss;
            sums[2] += scores[..b].iter().sum::<f64>() / b as f64;
            sums[3] += scores[b..].iter().sum::<f64>() / b as f64;
        }
        let s = steps as f64;
        let stats = EpochStats {
            epoch,
            d_loss: sums[0] / s,
            g_loss: sums[1] / s,
            d_real: sums[2] / s,
            d_fake: sums[3] / s,
        };
        debug!(
            "epoch {epoch}: d_loss {:.4} g_loss {:.4} D(real) {:.3} D(fake) {:.3}",
            stats.d_loss, stats.g_loss, stats.d_real, stats.d_fake
        );
        if let Some(sink) = progress.as_deref_mut() {
            sink(&stats);
        }
        history.push(stats);
        if epoch % hp.checkpoint_every_n_epochs == 0 {
            checkpoints.push(GanCheckpoint {
                epoch,
                generator_params: snapshot(&g_params),
                fd_score: None,
                mi_rejection_count: None,
            });
        }
    }

    Ok(GanRun {
        generator_net: g_net,
        initial,
        checkpoints,
        history,
        final_params: snapshot(&g_params),
    })
}
