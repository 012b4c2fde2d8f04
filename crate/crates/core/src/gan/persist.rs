//! Checkpoint files: parameters in the `CGP1` container plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{GanCheckpoint, GanHyperParams};
use super::{GanError, Result};
use crate::nn::{read_params, write_params, Sequential};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub epoch: usize,
    pub fd_score: Option<f64>,
    #[serde(default)]
    pub mi_rejection_count: Option<usize>,
    pub seed: u64,
    pub hyperparameters: GanHyperParams,
    pub generator: Sequential,
}

/// Writes `<stem>.cgp` and `<stem>.json`; returns both paths.
pub fn write_checkpoint(
    stem: impl AsRef<Path>,
    net: &Sequential,
    ckpt: &GanCheckpoint,
    hp: &GanHyperParams,
) -> Result<[PathBuf; 2]> {
    let stem = stem.as_ref();
    let params_path = stem.with_extension("cgp");
    let sidecar_path = stem.with_extension("json");
    write_params(&params_path, &ckpt.generator_params)?;
    let sidecar = CheckpointSidecar {
        epoch: ckpt.epoch,
        fd_score: ckpt.fd_score,
        mi_rejection_count: ckpt.mi_rejection_count,
        seed: hp.seed,
        hyperparameters: hp.clone(),
        generator: net.clone(),
    };
    let json =
        serde_json::to_string_pretty(&sidecar).map_err(|e| GanError::BadSidecar(e.to_string()))?;
    fs::write(&sidecar_path, json)?;
    Ok([params_path, sidecar_path])
}

pub fn read_checkpoint(stem: impl AsRef<Path>) -> Result<(CheckpointSidecar, GanCheckpoint)> {
    let stem = stem.as_ref();
    let text = fs::read_to_string(stem.with_extension("json"))?;
    let sidecar: CheckpointSidecar =
        serde_json::from_str(&text).map_err(|e| GanError::BadSidecar(e.to_string()))?;
    let params = read_params(stem.with_extension("cgp"), &sidecar.generator)?;
    let ckpt = GanCheckpoint {
        epoch: sidecar.epoch,
        generator_params: params,
        fd_score: sidecar.fd_score,
        mi_rejection_count: sidecar.mi_rejection_count,
    };
    Ok((sidecar, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{build_generator, Architecture};

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_generator(
            4,
            [4; 3],
            &Architecture {
                generator: [2, 2],
                discriminator: [2, 2],
            },
            0.1,
        )
        .unwrap();
        let ckpt = GanCheckpoint {
            epoch: 50,
            generator_params: net.init_params(&mut crate::rng::seeded(3)),
            fd_score: Some(0.125),
            mi_rejection_count: Some(2),
        };
        let hp = GanHyperParams::default();
        write_checkpoint(dir.path().join("g0"), &net, &ckpt, &hp).unwrap();
        let (side, back) = read_checkpoint(dir.path().join("g0")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(side.generator, net);
        assert_eq!(side.hyperparameters, hp);
    }
}
