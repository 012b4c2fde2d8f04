//! Volumetric data model.
//!
//! A [`Volume`] is a dense scalar grid with physical spacing. Voxels are
//! stored x-fastest: the flat index of `(x, y, z)` is `x + nx * (y + ny * z)`.
//! The same flattening is used by the networks (as `[C, z, y, x]`) and by the
//! Fréchet statistics, so a volume and its flattened vector are always in
//! one-to-one correspondence.

mod augment;
mod folds;
pub mod io;
mod phantom;
mod preprocess;

pub use augment::{augment, AugmentParams};
pub use folds::{split_folds, Fold};
pub use phantom::{generate_phantom_dataset, LesionMode, PhantomConfig};
pub use preprocess::{normalize_volume, resample_isotropic};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume has constant intensity {0}; normalization is undefined")]
    ConstantVolume(f64),
    #[error("resampling would produce an empty axis (dims {0:?})")]
    DegenerateExtent([usize; 3]),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("too few subjects: {subjects} distinct subjects for {k} folds")]
    TooFewSubjects { subjects: usize, k: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad dataset manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("zero-sized axis in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(VolumeError::DimMismatch(format!(
                "{} voxels for dims {dims:?} (expected {n})",
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    /// Isotropic 1 mm volume; panics if `voxels` does not match `dims`.
    pub fn from_voxels(dims: [usize; 3], voxels: Vec<f64>) -> Self {
        Self::new(dims, [1.0; 3], voxels).expect("voxel count must match dims")
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![value; n]).expect("valid dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    /// Trilinear sample at continuous voxel coordinates, clamping to the grid.
    pub fn sample_clamped(&self, x: f64, y: f64, z: f64) -> f64 {
        let [nx, ny, nz] = self.dims;
        let (x0, x1, fx) = bracket(x, nx);
        let (y0, y1, fy) = bracket(y, ny);
        let (z0, z1, fz) = bracket(z, nz);
        let c00 = lerp(self.get(x0, y0, z0), self.get(x1, y0, z0), fx);
        let c10 = lerp(self.get(x0, y1, z0), self.get(x1, y1, z0), fx);
        let c01 = lerp(self.get(x0, y0, z1), self.get(x1, y0, z1), fx);
        let c11 = lerp(self.get(x0, y1, z1), self.get(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Exact for t = 0 and for a == b.
    a + (b - a) * t
}

/// Returns the two bracketing grid indices and the fractional weight for a
/// continuous coordinate, with edge clamping.
#[inline]
fn bracket(u: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, max) };
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Labeled lesion / background regions with their subject ids.
///
/// `subject_ids` lists positives first, then negatives. `positive_modes` and
/// `diameters_mm` are per-positive annotations and may be empty for data that
/// does not come from the phantom generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub positives: Vec<Volume>,
    pub negatives: Vec<Volume>,
    pub subject_ids: Vec<u32>,
    #[serde(default)]
    pub positive_modes: Vec<usize>,
    #[serde(default)]
    pub diameters_mm: Vec<f64>,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        if self.subject_ids.len() != self.positives.len() + self.negatives.len() {
            return Err(VolumeError::DimMismatch(format!(
                "{} subject ids for {} regions",
                self.subject_ids.len(),
                self.positives.len() + self.negatives.len()
            )));
        }
        if let Some(first) = self.positives.iter().chain(&self.negatives).next() {
            let dims = first.dims();
            if self
                .positives
                .iter()
                .chain(&self.negatives)
                .any(|v| v.dims() != dims)
            {
                return Err(VolumeError::DimMismatch(
                    "regions have differing dims".into(),
                ));
            }
        }
        for (name, len) in [
            ("positive_modes", self.positive_modes.len()),
            ("diameters_mm", self.diameters_mm.len()),
        ] {
            if len != 0 && len != self.positives.len() {
                return Err(VolumeError::DimMismatch(format!(
                    "{name} has {len} entries for {} positives",
                    self.positives.len()
                )));
            }
        }
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn positive_subjects(&self) -> &[u32] {
        &self.subject_ids[..self.positives.len()]
    }

    pub fn negative_subjects(&self) -> &[u32] {
        &self.subject_ids[self.positives.len()..]
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s = self.subject_ids.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .next()
            .map(Volume::dims)
    }

    /// Keeps only the regions whose subject satisfies `keep`.
    pub fn filter_subjects(&self, mut keep: impl FnMut(u32) -> bool) -> LabeledDataset {
        let mut out = LabeledDataset::default();
        let mut neg_subjects = Vec::new();
        for (i, v) in self.positives.iter().enumerate() {
            let s = self.subject_ids[i];
            if keep(s) {
                out.positives.push(v.clone());
                out.subject_ids.push(s);
                if let Some(&m) = self.positive_modes.get(i) {
                    out.positive_modes.push(m);
                }
                if let Some(&d) = self.diameters_mm.get(i) {
                    out.diameters_mm.push(d);
                }
            }
        }
        let np = self.positives.len();
        for (i, v) in self.negatives.iter().enumerate() {
            let s = self.subject_ids[np + i];
            if keep(s) {
                out.negatives.push(v.clone());
                neg_subjects.push(s);
            }
        }
        out.subject_ids.extend(neg_subjects);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn index_is_x_fastest() {
        let v = Volume::from_voxels([2, 3, 4], (0..24).map(f64::from).collect());
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 6.0);
    }

    #[test]
    fn trilinear_sample_clamps_and_interpolates() {
        let v = Volume::from_voxels([2, 1, 1], vec![0.0, 1.0]);
        assert_eq!(v.sample_clamped(0.25, 0.0, 0.0), 0.25);
        assert_eq!(v.sample_clamped(-3.0, 0.0, 0.0), 0.0);
        assert_eq!(v.sample_clamped(9.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn filter_keeps_annotations_aligned() {
        let vol = |x| Volume::from_voxels([1, 1, 1], vec![x]);
        let ds = LabeledDataset {
            positives: vec![vol(1.0), vol(2.0)],
            negatives: vec![vol(3.0), vol(4.0)],
            subject_ids: vec![0, 1, 1, 0],
            positive_modes: vec![0, 1],
            diameters_mm: vec![5.0, 6.0],
        };
        let sub = ds.filter_subjects(|s| s == 1);
        sub.validate().unwrap();
        assert_eq!(sub.positives, vec![vol(2.0)]);
        assert_eq!(sub.negatives, vec![vol(3.0)]);
        assert_eq!(sub.subject_ids, vec![1, 1]);
        assert_eq!(sub.positive_modes, vec![1]);
        assert_eq!(sub.diameters_mm, vec![6.0]);
    }
}
