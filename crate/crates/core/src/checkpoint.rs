//! Checkpoint files: a versioned, checksummed CBOR encoding of [`TrainState`].
//!
//! Layout: magic `SNCK`, `u32` version, `u64` payload length (little endian),
//! the payload, then its SHA-256.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::train::TrainState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 16;
const DIGEST: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut payload = Vec::new();
    ciborium::into_writer(state, &mut payload).expect("train state serializes");
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn decode(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let corrupt = |m: &str| CheckpointError::CorruptCheckpoint(m.to_string());
    if bytes.len() < HEADER || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER + DIGEST))
        .ok_or_else(|| corrupt("payload length overflows"))?;
    if bytes.len() != expected {
        return Err(CheckpointError::CorruptCheckpoint(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER..expected - DIGEST];
    if Sha256::digest(payload).as_slice() != &bytes[expected - DIGEST..] {
        return Err(corrupt("payload checksum mismatch"));
    }
    ciborium::from_reader(payload).map_err(|e| CheckpointError::CorruptCheckpoint(e.to_string()))
}

/// Writes through a temporary sibling file, then renames over `path`.
pub fn save(path: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(state)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
