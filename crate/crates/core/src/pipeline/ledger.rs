use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::{PipelineError, Result};

pub const LEDGER_FILE: &str = "ledger.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputDigest>,
}

/// Provenance record of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config_hash: String,
    pub toolkit_version: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl RunLedger {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            config_hash: sha256_hex(config.to_json().as_bytes()),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            stages: Vec::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(LEDGER_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        if !path.is_file() {
            return Err(PipelineError::MissingUpstream(path));
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// The run directory's ledger, or a fresh one. A ledger written under a
    /// different configuration is refused.
    pub fn open(run_dir: &Path, config: &RunConfig) -> Result<Self> {
        if !Self::path(run_dir).is_file() {
            return Ok(Self::new(config));
        }
        let existing = Self::load(run_dir)?;
        let fresh = Self::new(config);
        if existing.config_hash != fresh.config_hash {
            return Err(PipelineError::Config(format!(
                "{} was produced by a different configuration (hash {} vs {})",
                run_dir.display(),
                existing.config_hash,
                fresh.config_hash
            )));
        }
        Ok(existing)
    }

    /// Records (or replaces) a stage with digests of `outputs`.
    pub fn record(
        &mut self,
        run_dir: &Path,
        name: &str,
        seconds: f64,
        outputs: &[PathBuf],
    ) -> Result<()> {
        let mut digests = Vec::with_capacity(outputs.len());
        for p in outputs {
            let rel = p.strip_prefix(run_dir).unwrap_or(p);
            digests.push(OutputDigest {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                sha256: file_digest(p)?,
            });
        }
        digests.sort_by(|a, b| a.path.cmp(&b.path));
        let record = StageRecord {
            name: name.to_string(),
            wall_clock_seconds: seconds,
            outputs: digests,
        };
        match self.stages.iter_mut().find(|s| s.name == name) {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
        Ok(())
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        let json = serde_json::to_string_pretty(self).expect("ledger serializes");
        std::fs::write(Self::path(run_dir), json)?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// `(stage, path, digest)` for every recorded output.
    pub fn digests(&self) -> Vec<(String, String, String)> {
        self.stages
            .iter()
            .flat_map(|s| {
                s.outputs
                    .iter()
                    .map(move |o| (s.name.clone(), o.path.clone(), o.sha256.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Scale;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn records_replace_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::preset(Scale::Test);
        let mut ledger = RunLedger::open(dir.path(), &cfg).unwrap();
        let f = dir.path().join("sub").join("a.txt");
        std::fs::create_dir_all(f.parent().unwrap()).unwrap();
        std::fs::write(&f, "x").unwrap();
        ledger.record(dir.path(), "s", 1.0, &[f.clone()]).unwrap();
        std::fs::write(&f, "y").unwrap();
        ledger.record(dir.path(), "s", 2.0, &[f]).unwrap();
        assert_eq!(ledger.stages.len(), 1);
        assert_eq!(ledger.stages[0].outputs[0].path, "sub/a.txt");
        assert_eq!(ledger.stages[0].outputs[0].sha256, sha256_hex(b"y"));
        ledger.save(dir.path()).unwrap();
        assert_eq!(RunLedger::open(dir.path(), &cfg).unwrap(), ledger);
        let mut other = cfg.clone();
        other.root_seed = 1;
        assert!(matches!(
            RunLedger::open(dir.path(), &other),
            Err(PipelineError::Config(_))
        ));
    }
}
