use super::{Result, Volume, VolumeError};

/// Affine min-max normalization to `[0, 1]`.
///
/// The minimum maps to exactly 0 and the maximum to exactly 1, so applying
/// the map twice is a bitwise no-op.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(VolumeError::ConstantVolume(lo));
    }
    let range = hi - lo;
    let voxels = v.voxels().iter().map(|&x| (x - lo) / range).collect();
    Volume::new(v.dims(), v.spacing(), voxels)
}

/// Resamples onto an isotropic grid of `target_mm` spacing.
///
/// Output dims are `round(extent / target_mm)` per axis. Output voxel centers
/// are mapped back into input voxel coordinates and sampled trilinearly with
/// edge clamping.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0 && target_mm.is_finite()) {
        return Err(VolumeError::Invalid(format!(
            "target spacing must be positive, got {target_mm}"
        )));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = (dims[a] as f64 * spacing[a] / target_mm).round() as usize;
    }
    if out_dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::DegenerateExtent(out_dims));
    }
    // Ratio of output to input spacing; exactly 1 when already at target, which
    // makes the identity resample land on integer coordinates.
    let ratio = [
        target_mm / spacing[0],
        target_mm / spacing[1],
        target_mm / spacing[2],
    ];
    let map = |j: usize, a: usize| (j as f64 + 0.5) * ratio[a] - 0.5;
    let mut voxels = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        let uz = map(z, 2);
        for y in 0..out_dims[1] {
            let uy = map(y, 1);
            for x in 0..out_dims[0] {
                voxels.push(v.sample_clamped(map(x, 0), uy, uz));
            }
        }
    }
    Volume::new(out_dims, [target_mm; 3], voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = Volume::from_voxels([3, 1, 1], vec![0.0, 5.0, 10.0]);
        assert_eq!(normalize_volume(&v).unwrap().voxels(), &[0.0, 0.5, 1.0]);

        let v = Volume::from_voxels([3, 1, 1], vec![2.0, 4.0, 8.0]);
        let n = normalize_volume(&v).unwrap();
        assert_eq!(n.voxels()[0], 0.0);
        assert!((n.voxels()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(n.voxels()[2], 1.0);

        let unit = Volume::from_voxels([4, 1, 1], vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(normalize_volume(&unit).unwrap(), unit);
    }

    #[test]
    fn constant_volume_is_rejected() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 3.0);
        assert!(matches!(
            normalize_volume(&v),
            Err(VolumeError::ConstantVolume(_))
        ));
    }

    #[test]
    fn identity_resample_is_bitwise() {
        let voxels: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let v = Volume::from_voxels([5, 4, 3], voxels);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn constant_volume_resamples_to_constant() {
        let v = Volume::filled([4, 3, 5], [1.5, 0.7, 2.0], 0.42);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [6, 2, 10]);
        assert!(r.voxels().iter().all(|&x| x == 0.42));
    }

    #[test]
    fn linear_ramp_matches_closed_form() {
        // n samples at 2 mm along x, value i/(n-1); resampled to 1 mm.
        let n = 6;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let v = Volume::new([n, 1, 1], [2.0, 1.0, 1.0], ramp).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [12, 1, 1]);
        for (j, &got) in r.voxels().iter().enumerate() {
            // Center of output voxel j sits at (j + 0.5) mm, i.e. input
            // coordinate (j + 0.5) / 2 - 0.5.
            let u = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let expected = u / (n - 1) as f64;
            assert!((got - expected).abs() < 1e-12, "j={j}: {got} vs {expected}");
        }
    }

    #[test]
    fn degenerate_extent_errors() {
        let v = Volume::filled([1, 1, 1], [1.0; 3], 1.0);
        assert!(matches!(
            resample_isotropic(&v, 5.0),
            Err(VolumeError::DegenerateExtent(_))
        ));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(vals in proptest::collection::vec(-1e3f64..1e3, 8)) {
            let v = Volume::from_voxels([2, 2, 2], vals);
            if let Ok(once) = normalize_volume(&v) {
                let twice = normalize_volume(&once).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn resample_to_own_spacing_reproduces(
            vals in proptest::collection::vec(0f64..1.0, 27),
            s in 0.3f64..3.0,
        ) {
            let v = Volume::new([3, 3, 3], [s; 3], vals).unwrap();
            let r = resample_isotropic(&v, s).unwrap();
            prop_assert_eq!(r.dims(), v.dims());
            for (a, b) in r.voxels().iter().zip(v.voxels()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
