//! Checkpoints: parameters as flat little-endian f64 in registration order,
//! next to a JSON manifest naming every entry's shape and offset plus a
//! SHA-256 of the binary and the model configuration it belongs to.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    /// SHA-256 hex of the parameter binary.
    sha256: String,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the binary, in f64 elements.
    offset: usize,
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save(store: &ParamStore, model: &ModelConfig, bin_path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::with_capacity(store.scalar_count() * 8);
    let mut offset = 0usize;
    for (name, value) in store.iter() {
        entries.push(Entry {
            name: name.to_owned(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len();
        for &v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sha256 = format!("{:x}", Sha256::digest(&bytes));
    fs::write(bin_path, &bytes).map_err(|e| Error::WriteFile {
        path: bin_path.to_path_buf(),
        source: e,
    })?;
    let manifest = Manifest {
        model: model.clone(),
        sha256,
        entries,
    };
    let mpath = manifest_path(bin_path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::WriteFile {
        path: mpath,
        source: e,
    })
}

/// The model configuration a checkpoint was trained with. Read this first to
/// build a matching parameter store, then [`restore`] into it.
pub fn read_model_config(bin_path: &Path) -> Result<ModelConfig> {
    let mpath = manifest_path(bin_path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::ReadFile {
        path: mpath.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&mpath, format!("manifest: {e}")))?;
    Ok(manifest.model)
}

/// Overwrites every entry of `store` from the checkpoint. The store must
/// hold exactly the checkpoint's entry names and shapes. The binary's hash
/// is verified before anything is written.
pub fn restore(store: &mut ParamStore, bin_path: &Path) -> Result<ModelConfig> {
    let mpath = manifest_path(bin_path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::ReadFile {
        path: mpath.clone(),
        source: e,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&mpath, format!("manifest: {e}")))?;
    let bytes = fs::read(bin_path).map_err(|e| Error::ReadFile {
        path: bin_path.to_path_buf(),
        source: e,
    })?;
    let sha = format!("{:x}", Sha256::digest(&bytes));
    if sha != manifest.sha256 {
        return Err(corrupt(
            bin_path,
            format!("hash mismatch: manifest {} vs binary {sha}", manifest.sha256),
        ));
    }
    if bytes.len() % 8 != 0 {
        return Err(corrupt(bin_path, "binary length is not a multiple of 8"));
    }
    let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if total * 8 != bytes.len() {
        return Err(corrupt(
            bin_path,
            format!("binary holds {} values but manifest declares {total}", bytes.len() / 8),
        ));
    }
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    if names.len() != manifest.entries.len()
        || names.iter().zip(manifest.entries.iter()).any(|(a, e)| *a != e.name)
    {
        return Err(corrupt(
            bin_path,
            format!(
                "parameter names differ from the running model (checkpoint has {} entries, model has {})",
                manifest.entries.len(),
                names.len()
            ),
        ));
    }
    for entry in &manifest.entries {
        let want = store.value(&entry.name).shape().to_vec();
        if want != entry.shape {
            return Err(corrupt(
                bin_path,
                format!("{}: shape {:?} vs model {:?}", entry.name, entry.shape, want),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let b: [u8; 8] = bytes[start + i * 8..start + (i + 1) * 8].try_into().unwrap();
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(corrupt(bin_path, format!("{}: non-finite value", entry.name)));
            }
            vals.push(v);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| corrupt(bin_path, format!("{}: {e}", entry.name)))?;
        store.set(&entry.name, arr);
    }
    Ok(manifest.model)
}
