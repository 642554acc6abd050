//! Plain-loop reference implementation of the grounding decoder, written
//! independently of the library kernels. Neighbors come from a sort of all
//! tokens by (squared distance, index); attention is computed densely over
//! that neighbor list.

#![allow(dead_code)]

use voxlift::decoder::{AttentionWeights, DecoderConfig, DecoderWeights, LayerWeights};
use voxlift::{Activation, MlpWeights, Point3};

pub type Mat = Vec<Vec<f64>>;

pub fn vecmat(x: &[f64], w: &ndarray::Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.ncols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w[(i, j)];
        }
    }
    out
}

pub fn mlp(m: &MlpWeights, x: &[f64]) -> Vec<f64> {
    let mut h = vecmat(x, &m.w1);
    for (v, b) in h.iter_mut().zip(m.b1.iter()) {
        *v += b;
        *v = match m.activation {
            Activation::Relu => v.max(0.0),
            other => other.apply(*v),
        };
    }
    let mut o = vecmat(&h, &m.w2);
    for (v, b) in o.iter_mut().zip(m.b2.iter()) {
        *v += b;
    }
    o
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn sorted_neighbors(q: &Point3, points: &[Point3], k: usize) -> Vec<usize> {
    let d2 = |p: &Point3| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| d2(&points[a]).total_cmp(&d2(&points[b])).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Cross-attention weights of one query over the given neighbor list.
pub fn cross_weights(
    value: &[f64],
    pos_enc: &[f64],
    pos: &Point3,
    feats: &Mat,
    points: &[Point3],
    nbrs: &[usize],
    layer: &LayerWeights,
) -> Vec<f64> {
    let c = value.len();
    let x: Vec<f64> = value.iter().zip(pos_enc).map(|(a, b)| a + b).collect();
    let q = vecmat(&x, &layer.cross.query);
    let logits: Vec<f64> = nbrs
        .iter()
        .map(|&j| {
            let rel = [points[j][0] - pos[0], points[j][1] - pos[1], points[j][2] - pos[2]];
            let pe = mlp(&layer.rel_pe, &rel);
            let k = vecmat(&feats[j], &layer.cross.key);
            let a: Vec<f64> = q.iter().zip(&pe).map(|(u, v)| u + v).collect();
            let b: Vec<f64> = k.iter().zip(&pe).map(|(u, v)| u + v).collect();
            dot(&a, &b) / (c as f64).sqrt()
        })
        .collect();
    softmax(&logits)
}

pub fn cross_layer(values: &Mat, pos_enc: &Mat, qpos: &[Point3], feats: &Mat, points: &[Point3], k: usize, layer: &LayerWeights) -> Mat {
    (0..values.len())
        .map(|i| {
            let nbrs = sorted_neighbors(&qpos[i], points, k);
            let w = cross_weights(&values[i], &pos_enc[i], &qpos[i], feats, points, &nbrs, layer);
            let mut agg = vec![0.0; values[i].len()];
            for (&j, wj) in nbrs.iter().zip(&w) {
                let v = vecmat(&feats[j], &layer.cross.value);
                for (a, b) in agg.iter_mut().zip(&v) {
                    *a += wj * b;
                }
            }
            let d = vecmat(&agg, &layer.cross.out);
            values[i].iter().zip(&d).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Row-stochastic self-attention matrix over queries plus the location token.
pub fn self_weights(values: &Mat, pos_enc: &Mat, qpos: &[Point3], loc: &[f64], attn: &AttentionWeights, sigma_w: &[f64], sigma_b: f64) -> Mat {
    let n = values.len();
    let c = loc.len();
    let mut seq: Mat = (0..n).map(|i| values[i].iter().zip(&pos_enc[i]).map(|(a, b)| a + b).collect()).collect();
    seq.push(loc.to_vec());
    let mut raw = values.clone();
    raw.push(loc.to_vec());
    let qs: Mat = seq.iter().map(|x| vecmat(x, &attn.query)).collect();
    let ks: Mat = seq.iter().map(|x| vecmat(x, &attn.key)).collect();
    (0..=n)
        .map(|i| {
            let sigma = softplus(dot(&raw[i], sigma_w) + sigma_b);
            let logits: Vec<f64> = (0..=n)
                .map(|j| {
                    let d = if i < n && j < n { dist(&qpos[i], &qpos[j]) } else { 0.0 };
                    dot(&qs[i], &ks[j]) / (c as f64).sqrt() - sigma * d
                })
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn self_layer(values: &Mat, pos_enc: &Mat, qpos: &[Point3], loc: &[f64], layer: &LayerWeights) -> (Mat, Vec<f64>) {
    let sw: Vec<f64> = layer.sigma_w.to_vec();
    let a = self_weights(values, pos_enc, qpos, loc, &layer.self_attn, &sw, layer.sigma_b);
    let mut raw = values.clone();
    raw.push(loc.to_vec());
    let vs: Mat = raw.iter().map(|x| vecmat(x, &layer.self_attn.value)).collect();
    let mut out: Mat = (0..raw.len())
        .map(|i| {
            let mut agg = vec![0.0; loc.len()];
            for (j, v) in vs.iter().enumerate() {
                for (s, x) in agg.iter_mut().zip(v) {
                    *s += a[i][j] * x;
                }
            }
            let d = vecmat(&agg, &layer.self_attn.out);
            raw[i].iter().zip(&d).map(|(x, y)| x + y).collect()
        })
        .collect();
    let loc = out.pop().unwrap();
    (out, loc)
}

pub struct RefOutput {
    pub boxes_per_layer: Vec<Vec<([f64; 3], [f64; 3])>>,
    pub scores: Vec<f64>,
}

/// Full forward pass with query seeds given explicitly.
pub fn forward(
    feats: &Mat,
    points: &[Point3],
    seeds: &[usize],
    loc: &[f64],
    cfg: &DecoderConfig,
    w: &DecoderWeights,
) -> RefOutput {
    let qpos: Vec<Point3> = seeds.iter().map(|&i| points[i]).collect();
    let pos_enc: Mat = qpos.iter().map(|p| mlp(&w.query_pos, p)).collect();
    let mut values: Mat = vec![vec![0.0; cfg.dim]; qpos.len()];
    let mut loc = loc.to_vec();
    let mut boxes_per_layer = Vec::new();
    for l in 0..cfg.layers {
        let k = cfg.knn_schedule[l].min(points.len());
        values = cross_layer(&values, &pos_enc, &qpos, feats, points, k, &w.layers[l]);
        let (v, new_loc) = self_layer(&values, &pos_enc, &qpos, &loc, &w.layers[l]);
        values = v;
        loc = new_loc;
        boxes_per_layer.push(
            values
                .iter()
                .zip(&qpos)
                .map(|(v, p)| {
                    let r = mlp(&w.box_head, v);
                    (
                        [p[0] + r[0], p[1] + r[1], p[2] + r[2]],
                        [softplus(r[3]) + 1e-4, softplus(r[4]) + 1e-4, softplus(r[5]) + 1e-4],
                    )
                })
                .collect(),
        );
    }
    let scores = values
        .iter()
        .map(|v| {
            let n = dot(v, v).sqrt() * dot(&loc, &loc).sqrt();
            if n == 0.0 {
                0.0
            } else {
                dot(v, &loc) / n
            }
        })
        .collect();
    RefOutput { boxes_per_layer, scores }
}
