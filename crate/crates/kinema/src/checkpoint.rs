//! Checkpoint persistence: a directory with `manifest.json` (run metadata,
//! config snapshot, optional latent statistics and schedule, and the SHA-256
//! of the weights payload) next to `weights.bin`. Loading verifies the hash
//! and, when the caller supplies its expected configuration, the structural
//! config match.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use kinema_grad::io::{read_params, write_params};
use kinema_grad::nn::Params;

use crate::autoencoder::LatentStats;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// "autoencoder" or "diffusion:<role>".
    pub kind: String,
    pub step: u64,
    pub wall_seconds: f64,
    /// Most recent raw loss values (newest last).
    pub loss_tail: Vec<f64>,
    /// Snapshot of the configuration that built the weights; loading
    /// compares this structurally.
    pub config: serde_json::Value,
    /// Present on autoencoder checkpoints once training completed.
    pub latent_stats: Option<LatentStats>,
    /// Present on diffusion checkpoints.
    pub schedule: Option<ScheduleParams>,
    /// Hex SHA-256 of `weights.bin`; filled in by [`save_checkpoint`].
    #[serde(default)]
    pub weights_sha256: String,
}

/// Serialize any config section for a manifest snapshot or comparison.
pub fn config_value<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    serde_json::to_value(cfg)
        .map_err(|e| Error::config(format!("config not serializable: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, ps: &Params) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    write_params(&mut bytes, ps)?;
    let mut m = manifest.clone();
    m.weights_sha256 = sha256_hex(&bytes);
    let text = serde_json::to_string_pretty(&m)
        .map_err(|e| Error::ingest(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::ingest(format!("{}: bad manifest: {e}", path.display())))
}

/// Load a checkpoint, verifying the weights hash against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Params)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    let got = sha256_hex(&bytes);
    if got != manifest.weights_sha256 {
        return Err(Error::ingest(format!(
            "{}: weights hash mismatch (manifest {}, payload {got}); checkpoint is corrupted",
            dir.display(),
            manifest.weights_sha256
        )));
    }
    let ps = read_params(&mut bytes.as_slice())?;
    Ok((manifest, ps))
}

/// Structural config match between a manifest and the caller's expectation.
pub fn check_config_match(
    manifest: &CheckpointManifest,
    expected: &serde_json::Value,
    what: &str,
) -> Result<()> {
    if &manifest.config != expected {
        return Err(Error::config(format!(
            "{what} checkpoint was built under a different configuration; \
             refusing to load (stored {}, expected {})",
            manifest.config, expected
        )));
    }
    Ok(())
}
