use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{PipelineError, Result};
use crate::embedding::TsneConfig;
use crate::ensemble::{CalibrationConfig, EnsembleConfig};
use crate::gan::{Architecture, GanHyperParams};
use crate::rng::{self, stream};
use crate::validation::ValidationConfig;
use crate::volume::PhantomConfig;

/// Grid-size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 8^3 volumes, narrow networks, data-calibrated thresholds.
    Test,
    /// 12^3 volumes, default networks, data-calibrated thresholds.
    Desk,
    /// 16^3 volumes with the reference training schedule.
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "test" => Ok(Scale::Test),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(format!(
                "unknown scale {other:?} (expected test, desk or paper)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationStage {
    pub classifier: ValidationConfig,
    /// Folds of the subject-wise split; fold 0 is the held-out test set of
    /// the single-split stages.
    pub folds: usize,
    pub max_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStage {
    /// PCA components before t-SNE (reduced when there are fewer samples).
    pub pca_components: usize,
    pub tsne: TsneConfig,
    /// Real positives embedded (and as many ensemble samples).
    pub max_points: usize,
    pub k_neighbors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Every stage seed derives from this.
    pub root_seed: u64,
    pub phantom: PhantomConfig,
    pub gan: GanHyperParams,
    pub ensemble: EnsembleConfig,
    pub calibration: Option<CalibrationConfig>,
    /// Components added by one `grow` invocation.
    pub grow_count: usize,
    pub sample_count: usize,
    pub validation: ValidationStage,
    pub embedding: EmbeddingStage,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let dims = match scale {
            Scale::Test => 8,
            Scale::Desk => 12,
            Scale::Paper => 16,
        };
        let gan = match scale {
            Scale::Paper => GanHyperParams::default(),
            Scale::Desk => GanHyperParams {
                epochs: 300,
                checkpoint_every_n_epochs: 25,
                ..Default::default()
            },
            Scale::Test => GanHyperParams {
                epochs: 300,
                checkpoint_every_n_epochs: 25,
                architecture: Architecture::small(),
                ..Default::default()
            },
        };
        let calibration = match scale {
            Scale::Paper => CalibrationConfig {
                omega_multiplier: Some(3.0),
                phi_quantile: None,
            },
            _ => CalibrationConfig {
                omega_multiplier: Some(3.0),
                phi_quantile: Some(0.95),
            },
        };
        let ensemble = EnsembleConfig {
            growth_increment: if scale == Scale::Paper { 10 } else { 2 },
            m_samples: if scale == Scale::Paper { 2000 } else { 500 },
            ..Default::default()
        };
        let mut cfg = RunConfig {
            root_seed: 0,
            phantom: PhantomConfig {
                volume_dims: [dims; 3],
                n_subjects: 50,
                n_modes: 4,
                ..Default::default()
            },
            grow_count: ensemble.growth_increment,
            gan,
            ensemble,
            calibration: Some(calibration),
            sample_count: 100,
            validation: ValidationStage {
                classifier: ValidationConfig::default(),
                folds: 5,
                max_rounds: 5,
            },
            embedding: EmbeddingStage {
                pca_components: 50,
                tsne: TsneConfig::default(),
                max_points: 300,
                k_neighbors: 10,
            },
        };
        cfg.derive_seeds();
        cfg
    }

    /// Overwrites the per-stage seeds with children of `root_seed`.
    pub fn derive_seeds(&mut self) {
        self.phantom.seed = rng::derive_seed(self.root_seed, stream::PHANTOM);
        self.gan.seed = rng::derive_seed(self.root_seed, stream::GAN_TRAIN);
        self.embedding.tsne.seed = rng::derive_seed(self.root_seed, stream::EMBEDDING);
    }

    /// The preset for `scale` overlaid with the JSON document at `path`
    /// (objects merge key by key; other values replace).
    pub fn load(path: Option<&Path>, scale: Scale, seed_override: Option<u64>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(scale)).expect("config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                PipelineError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(seed) = seed_override {
            cfg.root_seed = seed;
        }
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: String| Err(PipelineError::Config(e));
        if let Err(e) = self.phantom.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.gan.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.ensemble.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.validation.classifier.validate() {
            return bad(e.to_string());
        }
        if self.grow_count == 0 || self.sample_count == 0 {
            return bad("grow_count and sample_count must be at least 1".into());
        }
        if self.validation.folds < 2 || self.validation.max_rounds == 0 {
            return bad("validation needs at least 2 folds and 1 round".into());
        }
        if self.embedding.pca_components == 0 || self.embedding.k_neighbors == 0 {
            return bad("pca_components and k_neighbors must be at least 1".into());
        }
        if self.phantom.volume_dims.iter().any(|d| d % 4 != 0) {
            return bad(format!(
                "volume dims {:?} must be multiples of 4",
                self.phantom.volume_dims
            ));
        }
        Ok(())
    }

    /// Canonical JSON: every default materialized.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
