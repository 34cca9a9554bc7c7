//! Per-stage run manifests: config hash, software version, seeds, timings,
//! and checksums of inputs and outputs. Downstream stages verify upstream
//! output checksums before consuming them.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub elapsed_ms: u128,
    /// Checksums of files read, keyed by path relative to the output root.
    pub inputs: BTreeMap<String, String>,
    /// Checksums of files written, keyed likewise.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("checksumming {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

pub struct StageWriter {
    root: PathBuf,
    manifest: StageManifest,
    started: std::time::Instant,
}

impl StageWriter {
    pub fn new(root: &Path, stage: &str, config_hash: &str, seed: u64) -> Self {
        StageWriter {
            root: root.to_path_buf(),
            manifest: StageManifest {
                stage: stage.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: config_hash.to_string(),
                seed,
                elapsed_ms: 0,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            started: std::time::Instant::now(),
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().to_string()
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let sum = sha256_file(path)?;
        self.manifest.inputs.insert(self.rel(path), sum);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let sum = sha256_file(path)?;
        self.manifest.outputs.insert(self.rel(path), sum);
        Ok(())
    }

    /// Write the stage manifest atomically into the stage directory.
    pub fn finish(mut self, stage_dir: &Path) -> Result<()> {
        self.manifest.elapsed_ms = self.started.elapsed().as_millis();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        spfmm::io::write_atomic(&stage_dir.join("stage_manifest.json"), json.as_bytes())
            .context("writing stage manifest")?;
        Ok(())
    }
}

/// Load a stage manifest and verify every recorded output still matches its
/// checksum; a mismatch means the upstream artifacts are stale or corrupted.
pub fn verify_stage(root: &Path, stage_dir: &Path) -> Result<StageManifest> {
    let path = stage_dir.join("stage_manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| {
        format!("missing stage manifest {} (run the upstream stage first)", path.display())
    })?;
    let manifest: StageManifest = serde_json::from_str(&text)?;
    for (rel, recorded) in &manifest.outputs {
        let actual = sha256_file(&root.join(rel))?;
        if &actual != recorded {
            bail!(
                "stale upstream artifact {rel}: checksum {actual} does not match manifest {recorded}"
            );
        }
    }
    Ok(manifest)
}
