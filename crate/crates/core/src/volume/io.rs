//! Binary volume container and dataset manifests.
//!
//! Container layout, little-endian:
//!
//! ```text
//! "CGV1" | u32 version (=1) | u32 nx | u32 ny | u32 nz
//!        | f64 sx | f64 sy | f64 sz | nx*ny*nz f64 voxels (x fastest)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Result, Volume, VolumeError};

pub const VOLUME_MAGIC: [u8; 4] = *b"CGV1";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 3 * 8;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * v.len());
    buf.extend_from_slice(&VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in v.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.voxels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 {
        return Err(VolumeError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != VOLUME_MAGIC {
        return Err(VolumeError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::TruncatedFile {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let spacing = [f64_at(20), f64_at(28), f64_at(36)];
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolumeError::DimMismatch(format!("dims {dims:?} overflow")))?;
    let expected = count
        .checked_mul(8)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| VolumeError::DimMismatch(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(VolumeError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VolumeError::DimMismatch(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let voxels = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, voxels).map_err(|e| match e {
        VolumeError::Invalid(m) => VolumeError::DimMismatch(m),
        other => other,
    })
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Pos,
    Neg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub label: RegionLabel,
    pub subject: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub regions: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every region as a container file under `dir/regions/` plus
/// `dir/manifest.json`. Returns the paths of all files written.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &LabeledDataset) -> Result<Vec<PathBuf>> {
    ds.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("regions"))?;
    let mut written = Vec::new();
    let mut regions = Vec::with_capacity(ds.region_count());
    let np = ds.positives.len();
    for (i, v) in ds.positives.iter().enumerate() {
        let rel = format!("regions/pos_{i:05}.cgv");
        write_volume(dir.join(&rel), v)?;
        written.push(dir.join(&rel));
        regions.push(ManifestEntry {
            path: rel,
            label: RegionLabel::Pos,
            subject: ds.subject_ids[i],
            mode: ds.positive_modes.get(i).copied(),
            diameter_mm: ds.diameters_mm.get(i).copied(),
        });
    }
    for (i, v) in ds.negatives.iter().enumerate() {
        let rel = format!("regions/neg_{i:05}.cgv");
        write_volume(dir.join(&rel), v)?;
        written.push(dir.join(&rel));
        regions.push(ManifestEntry {
            path: rel,
            label: RegionLabel::Neg,
            subject: ds.subject_ids[np + i],
            mode: None,
            diameter_mm: None,
        });
    }
    let manifest = DatasetManifest {
        format_version: 1,
        regions,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VolumeError::BadManifest(e.to_string()))?;
    fs::write(&path, json)?;
    written.push(path);
    Ok(written)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| VolumeError::BadManifest(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(VolumeError::BadManifest(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let mut ds = LabeledDataset::default();
    let mut neg_subjects = Vec::new();
    let mut modes = Vec::new();
    let mut diameters = Vec::new();
    for entry in &manifest.regions {
        let v = read_volume(dir.join(&entry.path))?;
        match entry.label {
            RegionLabel::Pos => {
                ds.positives.push(v);
                ds.subject_ids.push(entry.subject);
                modes.push(entry.mode);
                diameters.push(entry.diameter_mm);
            }
            RegionLabel::Neg => {
                ds.negatives.push(v);
                neg_subjects.push(entry.subject);
            }
        }
    }
    ds.subject_ids.extend(neg_subjects);
    if modes.iter().all(Option::is_some) {
        ds.positive_modes = modes.into_iter().flatten().collect();
    }
    if diameters.iter().all(Option::is_some) {
        ds.diameters_mm = diameters.into_iter().flatten().collect();
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = encode_volume(&Volume::filled([2, 2, 2], [1.0; 3], 0.5));
        bytes[0] = b'X';
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::BadMagic(_))
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        let bytes = encode_volume(&Volume::filled([2, 2, 2], [1.0; 3], 0.5));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_volume(cut),
            Err(VolumeError::TruncatedFile { .. })
        ));
        assert!(matches!(
            decode_volume(&bytes[..10]),
            Err(VolumeError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn zero_dim_header_is_dim_mismatch() {
        let mut bytes = encode_volume(&Volume::filled([1, 1, 1], [1.0; 3], 0.5));
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(HEADER_LEN);
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::DimMismatch(_))
        ));
    }

    #[test]
    fn header_layout_is_fixed() {
        let v = Volume::new([3, 1, 2], [0.5, 1.0, 2.0], vec![1.0; 6]).unwrap();
        let b = encode_volume(&v);
        assert_eq!(&b[..4], b"CGV1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[20..28].try_into().unwrap()), 0.5);
        assert_eq!(b.len(), HEADER_LEN + 6 * 8);
    }

    #[test]
    fn dataset_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::volume::generate_phantom_dataset(&crate::volume::PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 4,
            ..Default::default()
        })
        .unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bitwise(
            dims in (1usize..5, 1usize..5, 1usize..5),
            spacing in (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0),
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let dims = [dims.0, dims.1, dims.2];
            let mut rng = crate::rng::seeded(seed);
            let n = dims.iter().product();
            let voxels = (0..n).map(|_| rng.gen::<f64>() * 1e6 - 5e5).collect();
            let v = Volume::new(dims, [spacing.0, spacing.1, spacing.2], voxels).unwrap();
            let back = decode_volume(&encode_volume(&v)).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            for (a, b) in back.voxels().iter().zip(v.voxels()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in back.spacing().iter().zip(v.spacing()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
