use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grow::{CandidateLog, Component, Ensemble, EnsembleConfig};
use super::screen::ScreenStats;
use super::{EnsembleError, Result};
use crate::gan::Generator;
use crate::nn::{read_params, write_params, Sequential};

pub const ENSEMBLE_MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: EnsembleConfig,
    root_seed: u64,
    next_candidate: u64,
    components: Vec<ComponentEntry>,
    log: Vec<CandidateLog>,
}

#[derive(Serialize, Deserialize)]
struct ComponentEntry {
    file: String,
    epoch: usize,
    fd_score: f64,
    seed: u64,
    screen: ScreenStats,
    generator: Sequential,
}

/// Writes `dir/manifest.json` and one parameter file per component under
/// `dir/components/`.
pub fn save_ensemble(ens: &Ensemble, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("components"))?;
    let mut components = Vec::with_capacity(ens.len());
    for (i, c) in ens.components().iter().enumerate() {
        let file = format!("components/{i:04}.cgp");
        write_params(dir.join(&file), c.generator.params())?;
        components.push(ComponentEntry {
            file,
            epoch: c.epoch,
            fd_score: c.fd_score,
            seed: c.seed,
            screen: c.screen,
            generator: c.generator.net().clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ens.config.clone(),
        root_seed: ens.root_seed,
        next_candidate: ens.next_candidate(),
        components,
        log: ens.log.clone(),
    };
    let path = dir.join(ENSEMBLE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EnsembleError::BadManifest(e.to_string()))?;
    fs::write(&path, json)?;
    Ok(path)
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<Ensemble> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(ENSEMBLE_MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| EnsembleError::BadManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(EnsembleError::BadManifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let mut components = Vec::with_capacity(manifest.components.len());
    for entry in manifest.components {
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(EnsembleError::MissingCheckpointFile(path));
        }
        let params = read_params(&path, &entry.generator)?;
        components.push(Component {
            generator: Generator::new(entry.generator, params),
            epoch: entry.epoch,
            fd_score: entry.fd_score,
            seed: entry.seed,
            screen: entry.screen,
        });
    }
    Ok(Ensemble::from_parts(
        manifest.config,
        manifest.root_seed,
        components,
        manifest.next_candidate,
        manifest.log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::grow;
    use crate::gan::{Architecture, GanHyperParams};
    use crate::metrics::{HistogramSpec, MiScreen};
    use crate::rng;
    use crate::volume::{generate_phantom_dataset, PhantomConfig};

    #[test]
    fn round_trip_preserves_sample_stream() {
        let pos = generate_phantom_dataset(&PhantomConfig {
            volume_dims: [4, 4, 4],
            n_subjects: 6,
            ..Default::default()
        })
        .unwrap()
        .positives;
        let hp = GanHyperParams {
            latent_dim: 8,
            epochs: 2,
            batch_size: 4,
            checkpoint_every_n_epochs: 1,
            architecture: Architecture {
                generator: [4, 2],
                discriminator: [2, 4],
            },
            ..Default::default()
        };
        let cfg = EnsembleConfig {
            omega: 1e9,
            phi: f64::INFINITY,
            m_samples: 8,
            ..Default::default()
        };
        let mut ens = Ensemble::new(cfg, 9).unwrap();
        grow(&mut ens, &pos, &hp, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&ens, dir.path()).unwrap();
        let back = load_ensemble(dir.path()).unwrap();
        assert_eq!(back, ens);
        let screen = MiScreen::new(&pos, HistogramSpec::default()).unwrap();
        let a = ens.sample_many(&screen, 5, &mut rng::seeded(1)).unwrap();
        let b = back.sample_many(&screen, 5, &mut rng::seeded(1)).unwrap();
        assert_eq!(a, b);

        fs::remove_file(dir.path().join("components/0001.cgp")).unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(EnsembleError::MissingCheckpointFile(_))
        ));
        fs::write(dir.path().join(ENSEMBLE_MANIFEST), "{").unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(EnsembleError::BadManifest(_))
        ));
    }
}
