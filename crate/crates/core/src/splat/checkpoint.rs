//! `SPL2` binary checkpoints and their JSON provenance sidecar.
//!
//! Layout (little-endian): magic `SPL2`, `u32` version (1), `u32` splat
//! count, `u32` floats per record (11), then one record per splat of eleven
//! `f32`: x, y, log s₁, log s₂, θ, color logits r, g, b, opacity logit,
//! depth key, reserved (0).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Splat, SplatSet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPL2";
pub const CHECKPOINT_VERSION: u32 = 1;
const RECORD_FLOATS: u32 = 11;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"SPL2\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported record width {0}")]
    RecordWidth(u32),
    #[error("truncated checkpoint: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Training provenance stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub loss: String,
    pub gamma: f64,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Full configuration stamp of the producing run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn encode_splats(splats: &SplatSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + splats.len() * 44);
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((splats.len() as u32).to_le_bytes());
    out.extend(RECORD_FLOATS.to_le_bytes());
    for s in splats.iter() {
        let p = s.params();
        for v in p.iter().chain([s.depth_key, 0.0].iter()) {
            out.extend((*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_splats(bytes: &[u8]) -> Result<SplatSet, CheckpointError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(CheckpointError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let n = word(8) as usize;
    let width = word(12);
    if width != RECORD_FLOATS {
        return Err(CheckpointError::RecordWidth(width));
    }
    let expected = HEADER_LEN + n * RECORD_FLOATS as usize * 4;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let splats = bytes[HEADER_LEN..expected]
        .chunks_exact(RECORD_FLOATS as usize * 4)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            let params = std::array::from_fn(f);
            Splat::from_params(&params, f(9))
        })
        .collect();
    Ok(splats)
}

pub fn save_splats(splats: &SplatSet, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_splats(splats)).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_splats(path: impl AsRef<Path>) -> Result<SplatSet, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_splats(&bytes)
}

/// `<path>.meta.json`
pub fn meta_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the binary checkpoint and its `.meta.json` sidecar.
pub fn save_checkpoint(
    splats: &SplatSet,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    save_splats(splats, path)?;
    let side = meta_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json + "\n").map_err(|source| CheckpointError::Io { path: side, source })
}

pub fn load_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta, CheckpointError> {
    let side = meta_path(path);
    let text = fs::read_to_string(&side).map_err(|source| CheckpointError::Io {
        path: side.clone(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
