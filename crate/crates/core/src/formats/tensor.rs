//! Named tensor blobs: `<blob>` holds the concatenated `f32` data and
//! `<blob>.json` lists each tensor's name, shape and byte offset.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{encode_f32, from_json_bytes, read_bytes, to_json_bytes, write_bytes};
use crate::decoder::LocationToken;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::lift::{Patch3DSet, PatchSource};
use crate::pooling::{PoolStrategy, PooledTokens};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub tensors: Vec<Tensor>,
    pub meta: Value,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, path: &Path, name: &str, cols: Option<usize>) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        let ok = match cols {
            Some(c) => t.shape.len() == 2 && t.shape[1] == c,
            None => t.shape.len() == 2 || t.shape.len() == 1,
        };
        if !ok {
            return Err(Error::format(path, format!("tensor {name} has shape {:?}", t.shape)));
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    dtype: String,
    tensors: Vec<SidecarEntry>,
    #[serde(default)]
    meta: Value,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(file.tensors.len());
    for t in &file.tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::invalid(format!(
                "tensor {} declares shape {:?} but holds {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        entries.push(SidecarEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
        });
        encode_f32(t.data.iter().copied(), &mut blob);
    }
    let sidecar = Sidecar {
        kind: file.kind.clone(),
        dtype: "f32".into(),
        tensors: entries,
        meta: file.meta.clone(),
    };
    let side = sidecar_path(path);
    write_bytes(path, &blob)?;
    write_bytes(&side, &to_json_bytes(&side, &sidecar)?)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let side = sidecar_path(path);
    let sidecar: Sidecar = from_json_bytes(&side, &read_bytes(&side)?)?;
    if sidecar.dtype != "f32" {
        return Err(Error::format(&side, format!("unsupported dtype {}", sidecar.dtype)));
    }
    let blob = read_bytes(path)?;
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(sidecar.tensors.len());
    for e in sidecar.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::format(path, format!("tensor {} starts at byte {}, expected {expected}", e.name, e.offset)));
        }
        expected += 4 * n;
        if expected > blob.len() {
            return Err(Error::format(path, format!("tensor {} runs past the end of the blob", e.name)));
        }
        let data = super::decode_f32(&blob[e.offset..expected]);
        tensors.push(Tensor::new(e.name, e.shape, data));
    }
    if expected != blob.len() {
        return Err(Error::format(
            path,
            format!("blob holds {} bytes, sidecar declares {expected}", blob.len()),
        ));
    }
    Ok(TensorFile {
        kind: sidecar.kind,
        tensors,
        meta: sidecar.meta,
    })
}

fn points_tensor(name: &str, points: &[Point3]) -> Tensor {
    Tensor::new(name, vec![points.len(), 3], points.iter().flatten().copied().collect())
}

fn matrix_tensor(name: &str, m: &Array2<f64>) -> Tensor {
    Tensor::new(name, vec![m.nrows(), m.ncols()], m.iter().copied().collect())
}

fn to_points(t: &Tensor) -> Vec<Point3> {
    t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn to_matrix(path: &Path, t: &Tensor) -> Result<Array2<f64>> {
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|e| Error::format(path, e.to_string()))
}

fn expect_kind(path: &Path, file: &TensorFile, kind: &str) -> Result<()> {
    if file.kind != kind {
        return Err(Error::format(path, format!("expected a {kind} blob, found {}", file.kind)));
    }
    Ok(())
}

pub fn write_patches(path: &Path, patches: &Patch3DSet) -> Result<()> {
    let source: Vec<f64> = patches
        .source
        .iter()
        .flat_map(|s| [s.view as f64, s.row as f64, s.col as f64])
        .collect();
    let file = TensorFile {
        kind: "patch3d".into(),
        tensors: vec![
            matrix_tensor("features", &patches.features),
            points_tensor("positions", &patches.positions),
            Tensor::new("source", vec![patches.len(), 3], source),
        ],
        meta: Value::Null,
    };
    write_tensor_file(path, &file)
}

pub fn read_patches(path: &Path) -> Result<Patch3DSet> {
    let file = read_tensor_file(path)?;
    expect_kind(path, &file, "patch3d")?;
    let features = to_matrix(path, file.require(path, "features", None)?)?;
    let positions = to_points(file.require(path, "positions", Some(3))?);
    let source = file
        .require(path, "source", Some(3))?
        .data
        .chunks_exact(3)
        .map(|c| PatchSource {
            view: c[0] as u32,
            row: c[1] as u32,
            col: c[2] as u32,
        })
        .collect();
    Patch3DSet::new(features, positions, source).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pooled(path: &Path, tokens: &PooledTokens) -> Result<()> {
    let meta = serde_json::to_value(tokens.strategy).map_err(|e| Error::format(path, e.to_string()))?;
    let file = TensorFile {
        kind: "pooled".into(),
        tensors: vec![
            matrix_tensor("features", &tokens.features),
            points_tensor("positions", &tokens.positions),
            Tensor::new("counts", vec![tokens.len()], tokens.counts.iter().map(|&c| c as f64).collect()),
        ],
        meta,
    };
    write_tensor_file(path, &file)
}

pub fn read_pooled(path: &Path) -> Result<PooledTokens> {
    let file = read_tensor_file(path)?;
    expect_kind(path, &file, "pooled")?;
    let features = to_matrix(path, file.require(path, "features", None)?)?;
    let positions = to_points(file.require(path, "positions", Some(3))?);
    let counts: Vec<usize> = file.require(path, "counts", None)?.data.iter().map(|&c| c as usize).collect();
    let strategy: PoolStrategy = serde_json::from_value(file.meta.clone()).map_err(|e| Error::format(path, e.to_string()))?;
    if features.nrows() != positions.len() || counts.len() != positions.len() {
        return Err(Error::format(path, "pooled tensors disagree on the token count"));
    }
    Ok(PooledTokens {
        features,
        positions,
        counts,
        strategy,
    })
}

pub fn write_location_token(path: &Path, loc: &LocationToken) -> Result<()> {
    let file = TensorFile {
        kind: "location_token".into(),
        tensors: vec![Tensor::new("embedding", vec![loc.embedding.len()], loc.embedding.clone())],
        meta: Value::Null,
    };
    write_tensor_file(path, &file)
}

pub fn read_location_token(path: &Path) -> Result<LocationToken> {
    let file = read_tensor_file(path)?;
    expect_kind(path, &file, "location_token")?;
    let t = file
        .get("embedding")
        .ok_or_else(|| Error::format(path, "missing tensor embedding"))?;
    LocationToken::new(t.data.clone()).map_err(|e| Error::format(path, e.to_string()))
}
