//! `provenance.json` manifests written next to every stage's artifacts.

use std::path::Path;

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::Result;

pub const FILE: &str = "provenance.json";

/// Enough to re-run a stage: the exact config, its hash, the seed, the
/// code version and the inputs consumed.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<String>,
}

impl Provenance {
    pub fn new(stage: &str, cfg: &PipelineConfig, inputs: &[&Path]) -> Self {
        Provenance {
            stage: stage.to_string(),
            version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            config: cfg.to_text(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_manifest_carries_hash_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        Provenance::new("pretrain", &cfg, &[Path::new("data")]).write(dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(FILE)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], cfg.hash());
        assert_eq!(v["stage"], "pretrain");
        assert_eq!(PipelineConfig::parse(v["config"].as_str().unwrap()).unwrap(), cfg);
    }
}
