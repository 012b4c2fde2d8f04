use serde::{Deserialize, Serialize};

use super::{GanError, Result};
use crate::nn::{LayerSpec, Sequential};

/// Channel widths of the two stages of each network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channels on the seed grid and after the first upsampling.
    pub generator: [usize; 2],
    /// Channels after the first and second downsampling.
    pub discriminator: [usize; 2],
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator: [128, 64],
            discriminator: [32, 64],
        }
    }
}

impl Architecture {
    /// Narrower networks for 8³ test runs.
    pub fn small() -> Self {
        Self {
            generator: [64, 32],
            discriminator: [16, 32],
        }
    }
}

fn check_dims(dims: [usize; 3]) -> Result<[usize; 3]> {
    if dims.iter().any(|&d| d == 0 || d % 4 != 0) {
        return Err(GanError::UnsupportedDims(dims));
    }
    Ok(dims)
}

fn up(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv3dTranspose {
        in_channels,
        out_channels,
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

fn down(in_channels: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv3d {
        in_channels,
        out_channels,
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

/// Latent vector to a single-channel volume of `out_dims` (x, y, z) with
/// values in (0, 1).
pub fn build_generator(
    latent_dim: usize,
    out_dims: [usize; 3],
    arch: &Architecture,
    slope: f64,
) -> Result<Sequential> {
    let [nx, ny, nz] = check_dims(out_dims)?;
    let seed = [nz / 4, ny / 4, nx / 4];
    let [c1, c2] = arch.generator;
    let seed_len = c1 * seed.iter().product::<usize>();
    Ok(Sequential::new(
        vec![latent_dim],
        vec![
            LayerSpec::Dense {
                in_features: latent_dim,
                out_features: seed_len,
            },
            LayerSpec::Reshape {
                shape: vec![c1, seed[0], seed[1], seed[2]],
            },
            LayerSpec::batch_norm(c1),
            LayerSpec::LeakyRelu { slope },
            up(c1, c2),
            LayerSpec::batch_norm(c2),
            LayerSpec::LeakyRelu { slope },
            up(c2, 1),
            LayerSpec::Sigmoid,
        ],
    )?)
}

/// Single-channel volume of `in_dims` to a realness score in (0, 1).
pub fn build_discriminator(
    in_dims: [usize; 3],
    arch: &Architecture,
    slope: f64,
    dropout: f64,
) -> Result<Sequential> {
    let [nx, ny, nz] = check_dims(in_dims)?;
    let [c1, c2] = arch.discriminator;
    let flat = c2 * (nx / 4) * (ny / 4) * (nz / 4);
    Ok(Sequential::new(
        vec![1, nz, ny, nx],
        vec![
            down(1, c1),
            LayerSpec::LeakyRelu { slope },
            LayerSpec::Dropout { rate: dropout },
            down(c1, c2),
            LayerSpec::LeakyRelu { slope },
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: flat,
                out_features: 1,
            },
            LayerSpec::Sigmoid,
        ],
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let g = build_generator(100, [16; 3], &Architecture::default(), 0.1).unwrap();
        assert_eq!(g.output_shape(), &[1, 16, 16, 16]);
        let g = build_generator(100, [8; 3], &Architecture::small(), 0.1).unwrap();
        assert_eq!(g.output_shape(), &[1, 8, 8, 8]);
        let g = build_generator(10, [12, 8, 4], &Architecture::small(), 0.1).unwrap();
        assert_eq!(g.output_shape(), &[1, 4, 8, 12]);
        let d = build_discriminator([16; 3], &Architecture::default(), 0.1, 0.15).unwrap();
        assert_eq!(d.output_shape(), &[1]);
    }

    #[test]
    fn rejects_unsupported_dims() {
        assert!(matches!(
            build_generator(100, [10, 8, 8], &Architecture::small(), 0.1),
            Err(GanError::UnsupportedDims(_))
        ));
        assert!(matches!(
            build_discriminator([0, 8, 8], &Architecture::small(), 0.1, 0.1),
            Err(GanError::UnsupportedDims(_))
        ));
    }
}
