//! File helpers shared by the pipeline stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dkdl_core::checkpoint::Checkpoint;
use dkdl_core::model::Model;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Writes through a sibling temporary file and a rename so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: BTreeMap<String, String>) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model, metadata).encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    Checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint { path: path.to_owned(), source: e })
}

pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.to_model().map_err(|e| Error::Checkpoint { path: path.to_owned(), source: e })?;
    Ok((model, ckpt))
}
