//! Checkpoint persistence: a raw little-endian f32 blob with the flat
//! parameter vector, next to a JSON sidecar describing what the blob is.
//!
//! `save_checkpoint("run/ckpt_epoch3", ...)` writes `run/ckpt_epoch3.params.f32`
//! and `run/ckpt_epoch3.json`. Loading rebuilds the layout from the stored
//! backbone config and refuses blobs whose length or layout digest disagree.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Network;
use super::{BackboneConfig, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: BackboneConfig,
    pub step: u64,
    pub param_count: usize,
    pub layout_digest: String,
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".params.f32");
    std::path::PathBuf::from(p)
}

fn meta_path(prefix: &Path) -> std::path::PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}

/// Write `params` under the given path prefix. Values are narrowed to f32;
/// vectors produced by `Network::init_params` and EMA/SGD updates of such
/// vectors are not exactly representable in general, so round-tripping is
/// exact only up to f32 rounding (init vectors round-trip bit-exactly).
pub fn save_checkpoint(
    prefix: &Path,
    network: &Network,
    params: &ParamVector,
    step: u64,
) -> Result<()> {
    if params.len() != network.param_count() {
        return Err(Error::config(format!(
            "checkpoint of {} values for a {}-parameter network",
            params.len(),
            network.param_count()
        )));
    }
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut blob = Vec::with_capacity(params.len() * 4);
    for &v in &params.values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(blob_path(prefix), blob)?;

    let meta = CheckpointMeta {
        config: network.config().clone(),
        step,
        param_count: params.len(),
        layout_digest: network.layout().digest(),
    };
    fs::write(meta_path(prefix), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Read a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(prefix: &Path) -> Result<(ParamVector, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(meta_path(prefix))?)?;
    let network = Network::new(meta.config.clone())?;
    if network.layout().digest() != meta.layout_digest {
        return Err(Error::config(format!(
            "checkpoint layout digest {} does not match config-derived {}",
            meta.layout_digest,
            network.layout().digest()
        )));
    }
    if meta.param_count != network.param_count() {
        return Err(Error::config(format!(
            "checkpoint declares {} params, config implies {}",
            meta.param_count,
            network.param_count()
        )));
    }
    let blob = fs::read(blob_path(prefix))?;
    if blob.len() != meta.param_count * 4 {
        return Err(Error::config(format!(
            "checkpoint blob is {} bytes, expected {}",
            blob.len(),
            meta.param_count * 4
        )));
    }
    let mut values = Vec::with_capacity(meta.param_count);
    for chunk in blob.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
        values.push(v as f64);
    }
    Ok((ParamVector { values }, meta))
}
