//! Probe checkpoints: a JSON descriptor plus a raw little-endian `f64` sidecar.
//!
//! For `model.json` the sidecar is `model.json.params`. It holds the parameter
//! groups back to back in the order listed under `layout` in the descriptor
//! (alpha, w_cls, b_cls, w_att, b_att), matrices row-major `n_classes x dim`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ProbeConfig, ProbeError, ProbeParams};

const FORMAT: &str = "tsprobe-checkpoint";
const VERSION: u32 = 1;
const GROUPS: [&str; 5] = ["alpha", "w_cls", "b_cls", "w_att", "b_att"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    version: u32,
    config: ProbeConfig,
    params_file: String,
    layout: Vec<LayoutEntry>,
    #[serde(default)]
    info: serde_json::Value,
}

/// A loaded checkpoint. `info` carries free-form training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ProbeConfig,
    pub params: ProbeParams,
    pub info: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".params");
    path.with_file_name(name)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    checkpoint.params.check_shapes(&checkpoint.config)?;
    if !checkpoint.params.is_finite() {
        return Err(ProbeError::NonFinite("parameters").into());
    }
    let sidecar = sidecar_path(path);
    let descriptor = Descriptor {
        format: FORMAT.into(),
        version: VERSION,
        config: checkpoint.config,
        params_file: sidecar.file_name().unwrap().to_string_lossy().into_owned(),
        layout: GROUPS
            .iter()
            .zip(checkpoint.params.slices())
            .map(|(name, s)| LayoutEntry { name: (*name).into(), len: s.len() })
            .collect(),
        info: checkpoint.info.clone(),
    };
    let bytes: Vec<u8> = checkpoint.params.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&sidecar, bytes).map_err(|source| CheckpointError::Io { path: sidecar.clone(), source })?;
    let mut text = serde_json::to_string_pretty(&descriptor)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    let descriptor: Descriptor = serde_json::from_str(&fs::read_to_string(path).map_err(io(path))?)?;
    if descriptor.format != FORMAT || descriptor.version != VERSION {
        return Err(CheckpointError::Invalid(format!(
            "unsupported format {:?} version {}",
            descriptor.format, descriptor.version
        )));
    }
    let sidecar = path.with_file_name(&descriptor.params_file);
    let bytes = fs::read(&sidecar).map_err(io(&sidecar))?;
    let mut params = ProbeParams::zeros(&descriptor.config);
    let names: Vec<&str> = descriptor.layout.iter().map(|e| e.name.as_str()).collect();
    if names != GROUPS {
        return Err(CheckpointError::Invalid(format!("unexpected layout {names:?}")));
    }
    for (entry, group) in descriptor.layout.iter().zip(params.slices()) {
        if entry.len != group.len() {
            return Err(CheckpointError::Invalid(format!(
                "{} has {} entries, config implies {}",
                entry.name,
                entry.len,
                group.len()
            )));
        }
    }
    if bytes.len() != 8 * params.len() {
        return Err(CheckpointError::Invalid(format!(
            "sidecar is {} bytes, expected {}",
            bytes.len(),
            8 * params.len()
        )));
    }
    for (v, chunk) in params.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    if !params.is_finite() {
        return Err(ProbeError::NonFinite("parameters").into());
    }
    Ok(Checkpoint { config: descriptor.config, params, info: descriptor.info })
}
