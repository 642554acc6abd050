//! On-disk formats. Tensors are raw little-endian `f32`, row-major, with
//! shapes kept in JSON next to them.

mod manifest;
mod tensor;
mod weights;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{
    load_scene, read_manifest, write_scene, GtBoxEntry, IntrinsicsEntry, SceneManifest, ViewEntry, EXTRINSICS_CONVENTION,
    SCHEMA_VERSION,
};
pub use tensor::{
    read_location_token, read_patches, read_pooled, read_tensor_file, sidecar_path, write_location_token, write_patches,
    write_pooled, write_tensor_file, Tensor, TensorFile,
};
pub use weights::{read_weights, write_weights, ModelWeights, WEIGHTS_MAGIC};

pub(crate) fn encode_f32(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw `f32` blob whose element count must equal `count`.
pub(crate) fn read_f32_blob(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != 4 * count {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {count} floats, found {}", 4 * count, bytes.len()),
        ));
    }
    Ok(decode_f32(&bytes))
}

pub(crate) fn to_json_bytes<T: serde::Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub(crate) fn from_json_bytes<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(path, e.to_string()))
}
