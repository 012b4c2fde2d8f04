//! Synthetic lesion phantoms.
//!
//! Stands in for clinical lesion crops: each positive region holds one
//! centered ellipsoidal lesion drawn from a small set of appearance classes,
//! each negative region holds textured background only. Lesion diameters are
//! lognormal (right-skewed, median below mean) and lesion counts per subject
//! are `1 + Geometric`, which reproduces the heavy skew of per-patient
//! metastasis counts.

use rand::Rng;
use rand_distr::{Distribution, Geometric, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Result, Volume, VolumeError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub volume_dims: [usize; 3],
    pub n_subjects: usize,
    pub lesions_per_subject_mean: f64,
    pub diameter_mean_mm: f64,
    pub diameter_sigma_mm: f64,
    pub n_modes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            volume_dims: [16, 16, 16],
            n_subjects: 50,
            lesions_per_subject_mean: 4.29,
            diameter_mean_mm: 5.45,
            diameter_sigma_mm: 2.67,
            n_modes: 3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VolumeError::InvalidConfig(m.to_string()));
        if self.volume_dims.iter().any(|&d| d == 0) {
            return bad("volume_dims must be positive");
        }
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1");
        }
        if self.n_modes == 0 {
            return bad("n_modes must be at least 1");
        }
        if !(self.diameter_mean_mm > 0.0) {
            return bad("diameter_mean_mm must be positive");
        }
        if !(self.diameter_sigma_mm >= 0.0) {
            return bad("diameter_sigma_mm must be non-negative");
        }
        if !(self.lesions_per_subject_mean >= 1.0) {
            return bad("lesions_per_subject_mean must be at least 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Appearance class of a phantom lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionMode {
    /// Uniformly bright sphere.
    Solid,
    /// Bright shell around a dim core.
    RimEnhancing,
    /// Faint sphere barely above background.
    LowContrast,
    /// Bright prolate ellipsoid.
    Elongated,
}

impl LesionMode {
    /// Class `k` cycles through the four profiles; classes past the fourth
    /// differ from earlier ones by their elongation axis.
    pub fn for_class(k: usize) -> (LesionMode, usize) {
        let mode = match k % 4 {
            0 => LesionMode::Solid,
            1 => LesionMode::RimEnhancing,
            2 => LesionMode::LowContrast,
            _ => LesionMode::Elongated,
        };
        (mode, (k / 4) % 3)
    }
}

const BACKGROUND_LEVEL: f64 = 0.25;
const TEXTURE_SIGMA_VOXELS: f64 = 0.8;

pub fn generate_phantom_dataset(cfg: &PhantomConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, rng::stream::PHANTOM));

    let mean = cfg.diameter_mean_mm;
    let sd = cfg.diameter_sigma_mm;
    // Lognormal with the requested mean and standard deviation.
    let sigma2 = (1.0 + (sd * sd) / (mean * mean)).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    let diameters =
        LogNormal::new(mu, sigma2.sqrt()).map_err(|e| VolumeError::InvalidConfig(e.to_string()))?;
    let extra_lesions = Geometric::new(1.0 / cfg.lesions_per_subject_mean)
        .map_err(|e| VolumeError::InvalidConfig(e.to_string()))?;

    let mut ds = LabeledDataset::default();
    let mut negative_subjects = Vec::new();
    for subject in 0..cfg.n_subjects {
        let count = 1 + extra_lesions.sample(&mut rng) as usize;
        for _ in 0..count {
            let class = rng.gen_range(0..cfg.n_modes);
            let diameter = diameters.sample(&mut rng);
            let mut v = textured_background(cfg, &mut rng);
            paint_lesion(&mut v, class, diameter);
            ds.positives.push(v);
            ds.subject_ids.push(subject as u32);
            ds.positive_modes.push(class);
            ds.diameters_mm.push(diameter);
        }
        for _ in 0..count {
            ds.negatives.push(textured_background(cfg, &mut rng));
            negative_subjects.push(subject as u32);
        }
    }
    ds.subject_ids.extend(negative_subjects);
    Ok(ds)
}

fn textured_background(cfg: &PhantomConfig, rng: &mut impl Rng) -> Volume {
    let dims = cfg.volume_dims;
    let n: usize = dims.iter().product();
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut v = Volume::from_voxels(dims, white);
    let kernel = gaussian_kernel(TEXTURE_SIGMA_VOXELS);
    smooth_separable(&mut v, &kernel);
    // Smoothed unit white noise has std (sum w^2)^(3/2) away from the edges.
    let norm = kernel.iter().map(|w| w * w).sum::<f64>().powf(1.5);
    for x in v.voxels_mut() {
        *x = (BACKGROUND_LEVEL + cfg.noise_sigma * *x / norm).clamp(0.0, 1.0);
    }
    v
}

fn paint_lesion(v: &mut Volume, class: usize, diameter_mm: f64) {
    let (mode, axis) = LesionMode::for_class(class);
    let dims = v.dims();
    let spacing = v.spacing();
    let radius = diameter_mm / 2.0;
    let mut semi_axes = [radius; 3];
    if mode == LesionMode::Elongated {
        semi_axes = [radius * 0.8; 3];
        semi_axes[axis] = radius * 1.6;
    }
    let center = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let mut rho2 = 0.0;
                for a in 0..3 {
                    let d = (p[a] - center[a]) * spacing[a] / semi_axes[a];
                    rho2 += d * d;
                }
                let rho = rho2.sqrt();
                // Partial-volume edge roughly one voxel wide.
                let cover = ((1.0 - rho) * radius + 0.5).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                let contrast = match mode {
                    LesionMode::Solid => 0.55,
                    LesionMode::LowContrast => 0.22,
                    LesionMode::Elongated => 0.45,
                    LesionMode::RimEnhancing => {
                        if rho > 0.55 {
                            0.65
                        } else {
                            0.08
                        }
                    }
                };
                let i = v.index(x, y, z);
                let vox = &mut v.voxels_mut()[i];
                *vox = (*vox + cover * contrast).clamp(0.0, 1.0);
            }
        }
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// In-place separable convolution along x, y, z with edge clamping.
pub(crate) fn smooth_separable(v: &mut Volume, kernel: &[f64]) {
    let dims = v.dims();
    let r = (kernel.len() / 2) as i64;
    let mut buf = vec![0.0; v.len()];
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let src = v.voxels();
        for (i, out) in buf.iter_mut().enumerate() {
            let coord = ((i / stride) % dims[axis]) as i64;
            let base = i - coord as usize * stride;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let c = (coord + t as i64 - r).clamp(0, n - 1) as usize;
                acc += w * src[base + c * stride];
            }
            *out = acc;
        }
        v.voxels_mut().copy_from_slice(&buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig {
            volume_dims: [8, 8, 8],
            n_subjects: 12,
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn mean_diameter_tracks_target() {
        let cfg = PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 150,
            seed: 11,
            ..PhantomConfig::default()
        };
        let ds = generate_phantom_dataset(&cfg).unwrap();
        assert!(ds.diameters_mm.len() >= 500, "{}", ds.diameters_mm.len());
        let mean = ds.diameters_mm.iter().sum::<f64>() / ds.diameters_mm.len() as f64;
        assert!((mean - 5.45).abs() <= 0.545, "mean diameter {mean}");
        let mut sorted = ds.diameters_mm.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!(median < mean, "median {median} mean {mean}");
    }

    #[test]
    fn single_mode_labels_are_identical() {
        let ds = generate_phantom_dataset(&PhantomConfig {
            n_modes: 1,
            ..small(3)
        })
        .unwrap();
        assert!(ds.positive_modes.iter().all(|&m| m == 0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_phantom_dataset(&small(5)).unwrap();
        let b = generate_phantom_dataset(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom_dataset(&small(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn structure_and_range() {
        let ds = generate_phantom_dataset(&small(9)).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.positives.len(), ds.negatives.len());
        assert_eq!(ds.subjects().len(), 12);
        for v in ds.positives.iter().chain(&ds.negatives) {
            assert!(v.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // Lesion centers are brighter than background on average.
        let center = |v: &Volume| v.get(3, 3, 3) + v.get(4, 4, 4);
        let pos: f64 = ds.positives.iter().map(center).sum::<f64>() / ds.positives.len() as f64;
        let neg: f64 = ds.negatives.iter().map(center).sum::<f64>() / ds.negatives.len() as f64;
        assert!(pos > neg + 0.1, "pos {pos} neg {neg}");
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(generate_phantom_dataset(&PhantomConfig {
            n_modes: 0,
            ..small(1)
        })
        .is_err());
        assert!(generate_phantom_dataset(&PhantomConfig {
            diameter_mean_mm: 0.0,
            ..small(1)
        })
        .is_err());
    }
}
