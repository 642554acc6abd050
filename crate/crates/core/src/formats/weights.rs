//! Weight files: the magic `VXLWGT01`, a little-endian `u64` header
//! length, a JSON header mapping tensor names to `{shape, dtype, offset}`
//! (plus a `__metadata__` entry), then the `f32` data.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{decode_f32, encode_f32, read_bytes, write_bytes};
use crate::decoder::{AttentionWeights, DecoderWeights, LayerWeights};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpWeights};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"VXLWGT01";

/// Every learned tensor of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Patch position encoder, 3 -> d -> d.
    pub pos_mlp: MlpWeights,
    pub decoder: DecoderWeights,
    pub seed: u64,
}

impl ModelWeights {
    /// Seeded uniform initialization of every tensor.
    pub fn init(seed: u64, dim: usize, layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos_mlp = MlpWeights::init(&mut rng, 3, dim, dim);
        let decoder = DecoderWeights::init(&mut rng, layers, dim);
        Self { pos_mlp, decoder, seed }
    }

    pub fn dim(&self) -> usize {
        self.pos_mlp.d_out()
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        push_mlp(&mut out, "pos_mlp", &self.pos_mlp);
        push_mlp(&mut out, "decoder.query_pos", &self.decoder.query_pos);
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let p = format!("decoder.layers.{l}");
            push_attention(&mut out, &format!("{p}.cross"), &layer.cross);
            push_mlp(&mut out, &format!("{p}.rel_pe"), &layer.rel_pe);
            push_attention(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            out.push((format!("{p}.sigma_w"), vec![layer.sigma_w.len()], layer.sigma_w.to_vec()));
            out.push((format!("{p}.sigma_b"), vec![1], vec![layer.sigma_b]));
        }
        push_mlp(&mut out, "decoder.box_head", &self.decoder.box_head);
        out
    }

    fn activations(&self) -> BTreeMap<String, &'static str> {
        let mut a = BTreeMap::new();
        a.insert("pos_mlp".to_string(), self.pos_mlp.activation.as_str());
        a.insert("decoder.query_pos".to_string(), self.decoder.query_pos.activation.as_str());
        a.insert("decoder.box_head".to_string(), self.decoder.box_head.activation.as_str());
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            a.insert(format!("decoder.layers.{l}.rel_pe"), layer.rel_pe.activation.as_str());
        }
        a
    }
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, m: &MlpWeights) {
    out.push((format!("{prefix}.w1"), vec![m.w1.nrows(), m.w1.ncols()], m.w1.iter().copied().collect()));
    out.push((format!("{prefix}.b1"), vec![m.b1.len()], m.b1.to_vec()));
    out.push((format!("{prefix}.w2"), vec![m.w2.nrows(), m.w2.ncols()], m.w2.iter().copied().collect()));
    out.push((format!("{prefix}.b2"), vec![m.b2.len()], m.b2.to_vec()));
}

fn push_attention(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, a: &AttentionWeights) {
    for (name, m) in [("query", &a.query), ("key", &a.key), ("value", &a.value), ("out", &a.out)] {
        out.push((format!("{prefix}.{name}"), vec![m.nrows(), m.ncols()], m.iter().copied().collect()));
    }
}

pub fn write_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    let tensors = weights.named_tensors();
    let mut header = serde_json::Map::new();
    let mut data = Vec::new();
    for (name, shape, values) in &tensors {
        header.insert(name.clone(), json!({"shape": shape, "dtype": "f32", "offset": data.len()}));
        encode_f32(values.iter().copied(), &mut data);
    }
    header.insert(
        "__metadata__".into(),
        json!({
            "seed": weights.seed,
            "layers": weights.decoder.layers.len(),
            "dim": weights.dim(),
            "activations": weights.activations(),
        }),
    );
    let header = serde_json::to_vec(&Value::Object(header)).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + data.len());
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    write_bytes(path, &bytes)
}

struct Reader<'a> {
    path: &'a Path,
    header: &'a serde_json::Map<String, Value>,
    data: &'a [u8],
    activations: BTreeMap<String, String>,
}

impl Reader<'_> {
    fn err(&self, msg: String) -> Error {
        Error::format(self.path, msg)
    }

    fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self
            .header
            .get(name)
            .ok_or_else(|| self.err(format!("missing tensor {name}")))?;
        let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())
            .map_err(|e| self.err(format!("bad shape for {name}: {e}")))?;
        let offset = entry["offset"]
            .as_u64()
            .ok_or_else(|| self.err(format!("bad offset for {name}")))? as usize;
        if entry["dtype"] != "f32" {
            return Err(self.err(format!("tensor {name} is not f32")));
        }
        let len = 4 * shape.iter().product::<usize>();
        let end = offset.checked_add(len).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| self.err(format!("tensor {name} runs past the end of the file")))?;
        Ok((shape, decode_f32(&self.data[offset..end])))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 2 {
            return Err(self.err(format!("tensor {name} should be a matrix, has shape {shape:?}")));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data).expect("length checked"))
    }

    fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 1 {
            return Err(self.err(format!("tensor {name} should be a vector, has shape {shape:?}")));
        }
        Ok(Array1::from(data))
    }

    fn mlp(&self, prefix: &str) -> Result<MlpWeights> {
        let act = match self.activations.get(prefix) {
            Some(s) => Activation::parse(s).ok_or_else(|| self.err(format!("unknown activation {s}")))?,
            None => Activation::default(),
        };
        MlpWeights::new(
            self.matrix(&format!("{prefix}.w1"))?,
            self.vector(&format!("{prefix}.b1"))?,
            self.matrix(&format!("{prefix}.w2"))?,
            self.vector(&format!("{prefix}.b2"))?,
            act,
        )
        .map_err(|e| self.err(format!("{prefix}: {e}")))
    }

    fn attention(&self, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            query: self.matrix(&format!("{prefix}.query"))?,
            key: self.matrix(&format!("{prefix}.key"))?,
            value: self.matrix(&format!("{prefix}.value"))?,
            out: self.matrix(&format!("{prefix}.out"))?,
        })
    }
}

pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::format(path, "not a weight file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "header length runs past the end of the file"))?;
    let header: Value = serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::format(path, e.to_string()))?;
    let header = header
        .as_object()
        .ok_or_else(|| Error::format(path, "header is not a JSON object"))?;
    let meta = header.get("__metadata__").cloned().unwrap_or(Value::Null);
    let seed = meta["seed"].as_u64().unwrap_or(0);
    let activations: BTreeMap<String, String> = serde_json::from_value(meta["activations"].clone()).unwrap_or_default();
    let r = Reader {
        path,
        header,
        data: &bytes[hend..],
        activations,
    };
    let n_layers = (0..)
        .take_while(|l| header.contains_key(&format!("decoder.layers.{l}.cross.query")))
        .count();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = format!("decoder.layers.{l}");
        let sigma_b = r.vector(&format!("{p}.sigma_b"))?;
        if sigma_b.len() != 1 {
            return Err(r.err(format!("{p}.sigma_b must hold one value")));
        }
        layers.push(LayerWeights {
            cross: r.attention(&format!("{p}.cross"))?,
            rel_pe: r.mlp(&format!("{p}.rel_pe"))?,
            self_attn: r.attention(&format!("{p}.self_attn"))?,
            sigma_w: r.vector(&format!("{p}.sigma_w"))?,
            sigma_b: sigma_b[0],
        });
    }
    let weights = ModelWeights {
        pos_mlp: r.mlp("pos_mlp")?,
        decoder: DecoderWeights {
            layers,
            query_pos: r.mlp("decoder.query_pos")?,
            box_head: r.mlp("decoder.box_head")?,
        },
        seed,
    };
    if weights.pos_mlp.d_in() != 3 {
        return Err(r.err("pos_mlp must take 3D coordinates".into()));
    }
    Ok(weights)
}
