use std::path::{Path, PathBuf};

use saff::pipeline::PipelineConfig;
use saff::{Error, Result};
use serde::Serialize;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Machine-readable record of one invocation. Contains no timestamps so that
/// reruns with the same configuration produce identical bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub saff_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            saff_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            train_seed: cfg.train.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
    }
}
