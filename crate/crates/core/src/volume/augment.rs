use rand::Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{gaussian_kernel, smooth_separable};
use super::Volume;

/// On-the-fly augmentation of positive training regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Peak displacement of the elastic field, in voxels.
    pub elastic_alpha: f64,
    /// Width of the Gaussian that smooths the displacement field, in voxels.
    pub elastic_sigma: f64,
    pub gamma_range: [f64; 2],
    pub enable_flips: bool,
    pub enable_rotations: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            elastic_alpha: 2.0,
            elastic_sigma: 2.0,
            gamma_range: [0.7, 1.5],
            enable_flips: true,
            enable_rotations: true,
        }
    }
}

impl AugmentParams {
    /// Parameters under which [`augment`] is the identity.
    pub fn identity() -> Self {
        Self {
            elastic_alpha: 0.0,
            elastic_sigma: 1.0,
            gamma_range: [1.0, 1.0],
            enable_flips: false,
            enable_rotations: false,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.gamma_range[0] > 0.0
            && self.gamma_range[0] <= self.gamma_range[1]
            && self.elastic_alpha >= 0.0
            && self.elastic_sigma > 0.0
    }
}

/// Random elastic deformation, gamma correction, flips and 90° rotations,
/// applied in that order. Input is expected in `[0, 1]`; output stays there.
pub fn augment<R: Rng + ?Sized>(v: &Volume, params: &AugmentParams, rng: &mut R) -> Volume {
    debug_assert!(params.is_valid(), "invalid augmentation parameters");
    let mut out = if params.elastic_alpha > 0.0 {
        elastic_deform(v, params.elastic_alpha, params.elastic_sigma, rng)
    } else {
        v.clone()
    };

    let [g_lo, g_hi] = params.gamma_range;
    let gamma = if g_lo < g_hi {
        rng.gen_range(g_lo..=g_hi)
    } else {
        g_lo
    };
    if gamma != 1.0 {
        for x in out.voxels_mut() {
            *x = x.clamp(0.0, 1.0).powf(gamma);
        }
    }

    if params.enable_flips {
        for axis in 0..3 {
            if rng.gen_bool(0.5) {
                out = flip(&out, axis);
            }
        }
    }
    if params.enable_rotations {
        let quarter_turns = rng.gen_range(0..4u8);
        let axis = rng.gen_range(0..3usize);
        for _ in 0..quarter_turns {
            out = rotate90(&out, axis);
        }
    }
    out
}

fn elastic_deform<R: Rng + ?Sized>(v: &Volume, alpha: f64, sigma: f64, rng: &mut R) -> Volume {
    let dims = v.dims();
    let n = v.len();
    let kernel = gaussian_kernel(sigma);
    let mut fields = Vec::with_capacity(3);
    for _ in 0..3 {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut f = Volume::from_voxels(dims, raw);
        smooth_separable(&mut f, &kernel);
        fields.push(f);
    }
    let mut voxels = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = v.index(x, y, z);
                let dx = alpha * fields[0].voxels()[i];
                let dy = alpha * fields[1].voxels()[i];
                let dz = alpha * fields[2].voxels()[i];
                voxels.push(v.sample_clamped(x as f64 + dx, y as f64 + dy, z as f64 + dz));
            }
        }
    }
    Volume::new(dims, v.spacing(), voxels).expect("same dims")
}

fn flip(v: &Volume, axis: usize) -> Volume {
    let [nx, ny, nz] = v.dims();
    let mut voxels = Vec::with_capacity(v.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (sx, sy, sz) = match axis {
                    0 => (nx - 1 - x, y, z),
                    1 => (x, ny - 1 - y, z),
                    _ => (x, y, nz - 1 - z),
                };
                voxels.push(v.get(sx, sy, sz));
            }
        }
    }
    Volume::new(v.dims(), v.spacing(), voxels).expect("same dims")
}

/// Quarter turn about `axis`; the two in-plane dims (and spacings) swap.
fn rotate90(v: &Volume, axis: usize) -> Volume {
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let src_dims = v.dims();
    let mut dims = src_dims;
    dims.swap(a, b);
    let mut spacing = v.spacing();
    spacing.swap(a, b);
    let mut voxels = Vec::with_capacity(v.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                // Destination (.., p_a, p_b, ..) reads source (.., p_b, n_b - 1 - p_a, ..).
                let dst = [x, y, z];
                let mut src = dst;
                src[a] = dst[b];
                src[b] = src_dims[b] - 1 - dst[a];
                voxels.push(v.get(src[0], src[1], src[2]));
            }
        }
    }
    Volume::new(dims, spacing, voxels).expect("permuted dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n: usize = dims.iter().product();
        Volume::from_voxels(dims, (0..n).map(|i| i as f64 / (n - 1) as f64).collect())
    }

    fn sorted(v: &Volume) -> Vec<f64> {
        let mut s = v.voxels().to_vec();
        s.sort_by(f64::total_cmp);
        s
    }

    #[test]
    fn identity_params_leave_volume_unchanged() {
        let v = ramp([4, 5, 6]);
        let mut rng = seeded(1);
        for _ in 0..5 {
            assert_eq!(augment(&v, &AugmentParams::identity(), &mut rng), v);
        }
    }

    #[test]
    fn flips_and_rotations_permute_voxels() {
        let v = ramp([3, 4, 5]);
        let params = AugmentParams {
            enable_flips: true,
            enable_rotations: true,
            ..AugmentParams::identity()
        };
        let mut rng = seeded(2);
        for _ in 0..20 {
            let out = augment(&v, &params, &mut rng);
            assert_eq!(sorted(&out), sorted(&v));
        }
    }

    #[test]
    fn gamma_power_law() {
        let v = Volume::from_voxels([1, 1, 2], vec![0.5, 1.0]);
        let params = AugmentParams {
            gamma_range: [2.0, 2.0],
            ..AugmentParams::identity()
        };
        let out = augment(&v, &params, &mut seeded(3));
        assert_eq!(out.voxels(), &[0.25, 1.0]);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let v = ramp([2, 3, 4]);
        for axis in 0..3 {
            let mut r = v.clone();
            for _ in 0..4 {
                r = rotate90(&r, axis);
            }
            assert_eq!(r, v);
            assert_ne!(rotate90(&v, axis), v);
        }
    }

    #[test]
    fn full_augmentation_stays_in_unit_range() {
        let v = ramp([6, 6, 6]);
        let mut rng = seeded(4);
        for _ in 0..10 {
            let out = augment(&v, &AugmentParams::default(), &mut rng);
            assert_eq!(out.len(), v.len());
            assert!(out.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn elastic_deformation_moves_voxels() {
        let v = ramp([6, 6, 6]);
        let params = AugmentParams {
            elastic_alpha: 3.0,
            ..AugmentParams::identity()
        };
        let out = augment(&v, &params, &mut seeded(5));
        assert_ne!(out, v);
    }
}
