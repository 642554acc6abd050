//! Grounding decoder.
//!
//! Instance queries are seeded by farthest point sampling over the scene
//! tokens, start with zero values, and carry a learned encoding of their
//! 3D position. Each layer runs k-NN cross-attention into the scene tokens
//! followed by distance-adaptive self-attention over the queries plus the
//! location token; a shared two-layer box head reads boxes out after every
//! layer.
//!
//! Row vectors multiply weight matrices on the right: a projection `W`
//! maps `x` to `x · W`. A single attention head is used and every sublayer
//! is residual without normalization.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{dist, Point3};
use crate::lift::Patch3DSet;
use crate::nn::{cosine, dot, project_row, rows_to_array, softmax_in_place, softplus, uniform_init, MlpWeights};
use crate::objective::Box3D;
use crate::pooling::PooledTokens;
use crate::spatial::{fps, knn, KnnResult};

/// Added to softplus sizes so boxes are never degenerate.
pub const MIN_BOX_SIZE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Highest-scoring query only.
    #[default]
    Single,
    /// Every query scoring at or above the threshold.
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub queries: usize,
    pub knn_schedule: Vec<usize>,
    pub dim: usize,
    pub selection_threshold: f64,
    pub selection: SelectionMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            queries: 512,
            knn_schedule: vec![16, 32, 64, 128],
            dim: 64,
            selection_threshold: 0.5,
            selection: SelectionMode::Single,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.knn_schedule.len() == self.layers,
            "k schedule has {} entries for {} layers",
            self.knn_schedule.len(),
            self.layers
        );
        ensure!(self.knn_schedule.iter().all(|&k| k >= 1), "every k must be at least 1");
        ensure!(self.queries >= 1, "need at least one query");
        ensure!(self.dim >= 1, "embedding dimension must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.selection_threshold),
            "selection threshold {} outside [0, 1]",
            self.selection_threshold
        );
        Ok(())
    }
}

/// Query/key/value/output projections of one attention block, each `C x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub out: Array2<f64>,
}

impl AttentionWeights {
    pub fn identity(dim: usize) -> Self {
        Self {
            query: Array2::eye(dim),
            key: Array2::eye(dim),
            value: Array2::eye(dim),
            out: Array2::eye(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Array2::zeros((dim, dim)),
            key: Array2::zeros((dim, dim)),
            value: Array2::zeros((dim, dim)),
            out: Array2::zeros((dim, dim)),
        }
    }

    fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            query: uniform_init(rng, (dim, dim), dim),
            key: uniform_init(rng, (dim, dim), dim),
            value: uniform_init(rng, (dim, dim), dim),
            out: uniform_init(rng, (dim, dim), dim),
        }
    }

    fn matrices(&self) -> [&Array2<f64>; 4] {
        [&self.query, &self.key, &self.value, &self.out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub cross: AttentionWeights,
    /// Relative position encoder, 3 -> C.
    pub rel_pe: MlpWeights,
    pub self_attn: AttentionWeights,
    /// Per-query distance penalty `softplus(sigma_w · x + sigma_b)`.
    pub sigma_w: Array1<f64>,
    pub sigma_b: f64,
}

impl LayerWeights {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let cross = AttentionWeights::init(rng, dim);
        let rel_pe = MlpWeights::init(rng, 3, dim, dim);
        let self_attn = AttentionWeights::init(rng, dim);
        let sigma_w = uniform_init(rng, (1, dim), dim).into_shape_with_order(dim).unwrap();
        Self {
            cross,
            rel_pe,
            self_attn,
            sigma_w,
            sigma_b: 0.0,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for m in self.cross.matrices().into_iter().chain(self.self_attn.matrices()) {
            ensure!(m.dim() == (dim, dim), "attention projection is {:?}, expected ({dim}, {dim})", m.dim());
            ensure!(m.iter().all(|v| v.is_finite()), "attention weights must be finite");
        }
        self.rel_pe.validate()?;
        ensure!(
            self.rel_pe.d_in() == 3 && self.rel_pe.d_out() == dim,
            "relative position encoder must map 3 -> {dim}"
        );
        ensure!(self.sigma_w.len() == dim, "sigma weights have {} entries, expected {dim}", self.sigma_w.len());
        ensure!(
            self.sigma_b.is_finite() && self.sigma_w.iter().all(|v| v.is_finite()),
            "sigma head must be finite"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub layers: Vec<LayerWeights>,
    /// Query position encoder, 3 -> C.
    pub query_pos: MlpWeights,
    /// Box head, C -> C -> 6.
    pub box_head: MlpWeights,
}

impl DecoderWeights {
    pub fn init<R: Rng>(rng: &mut R, layers: usize, dim: usize) -> Self {
        let layers = (0..layers).map(|_| LayerWeights::init(rng, dim)).collect();
        let query_pos = MlpWeights::init(rng, 3, dim, dim);
        let box_head = MlpWeights::init(rng, dim, dim, 6);
        Self {
            layers,
            query_pos,
            box_head,
        }
    }

    pub fn dim(&self) -> usize {
        self.query_pos.d_out()
    }

    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        let dim = cfg.dim;
        ensure!(
            self.layers.len() >= cfg.layers,
            "weights hold {} layers, config asks for {}",
            self.layers.len(),
            cfg.layers
        );
        for l in &self.layers[..cfg.layers] {
            l.validate(dim)?;
        }
        self.query_pos.validate()?;
        ensure!(
            self.query_pos.d_in() == 3 && self.query_pos.d_out() == dim,
            "query position encoder must map 3 -> {dim}"
        );
        self.box_head.validate()?;
        ensure!(
            self.box_head.d_in() == dim && self.box_head.d_out() == 6,
            "box head must map {dim} -> 6"
        );
        Ok(())
    }
}

/// Scene tokens the decoder attends to.
pub trait SceneTokens {
    fn token_features(&self) -> ArrayView2<'_, f64>;
    fn token_positions(&self) -> &[Point3];
}

impl SceneTokens for Patch3DSet {
    fn token_features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
    fn token_positions(&self) -> &[Point3] {
        &self.positions
    }
}

impl SceneTokens for PooledTokens {
    fn token_features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
    fn token_positions(&self) -> &[Point3] {
        &self.positions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    pub values: Array2<f64>,
    pub positions: Vec<Point3>,
    pub pos_enc: Array2<f64>,
}

impl QueryState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn attention_input(&self, i: usize) -> Vec<f64> {
        self.values
            .row(i)
            .iter()
            .zip(self.pos_enc.row(i).iter())
            .map(|(v, p)| v + p)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationToken {
    pub embedding: Vec<f64>,
}

impl LocationToken {
    pub fn new(embedding: Vec<f64>) -> Result<Self> {
        ensure!(embedding.iter().all(|v| v.is_finite()), "location token must be finite");
        Ok(Self { embedding })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutput {
    /// Boxes from every layer; the last entry is the final prediction.
    pub boxes_per_layer: Vec<Vec<Box3D>>,
    /// Cosine similarity of each final query with the final location token.
    pub scores: Vec<f64>,
    /// Chosen queries, best score first.
    pub selected: Vec<usize>,
}

impl GroundingOutput {
    pub fn final_boxes(&self) -> &[Box3D] {
        self.boxes_per_layer.last().map(|b| b.as_slice()).unwrap_or(&[])
    }

    /// Selected boxes from the last layer, best first.
    pub fn selected_boxes(&self) -> Vec<Box3D> {
        let boxes = self.final_boxes();
        self.selected.iter().filter_map(|&i| boxes.get(i).copied()).collect()
    }
}

/// Seeds queries at FPS-sampled token positions with zero values.
pub fn init_queries<T: SceneTokens + ?Sized>(tokens: &T, cfg: &DecoderConfig, weights: &DecoderWeights) -> Result<QueryState> {
    let positions_all = tokens.token_positions();
    ensure!(!positions_all.is_empty(), "cannot seed queries from an empty token set");
    ensure!(
        tokens.token_features().ncols() == cfg.dim,
        "tokens have dimension {}, decoder expects {}",
        tokens.token_features().ncols(),
        cfg.dim
    );
    let n = cfg.queries.min(positions_all.len());
    let picks = fps(positions_all, n, 0)?;
    let positions: Vec<Point3> = picks.iter().map(|&i| positions_all[i]).collect();
    let pos_enc = crate::lift::pos_encode(&weights.query_pos, &positions)?;
    Ok(QueryState {
        values: Array2::zeros((n, cfg.dim)),
        positions,
        pos_enc,
    })
}

/// Neighbor tables for every query, shared across layers by slicing the
/// widest one.
pub fn query_neighbors<T: SceneTokens + ?Sized>(state: &QueryState, tokens: &T, k: usize) -> Result<KnnResult> {
    knn(&state.positions, tokens.token_positions(), k)
}

fn check_tokens<T: SceneTokens + ?Sized>(state: &QueryState, tokens: &T) -> Result<()> {
    let c = state.values.ncols();
    ensure!(
        tokens.token_features().ncols() == c,
        "tokens have dimension {}, queries have {c}",
        tokens.token_features().ncols()
    );
    ensure!(
        tokens.token_features().nrows() == tokens.token_positions().len(),
        "token features and positions disagree in count"
    );
    ensure!(state.pos_enc.dim() == state.values.dim(), "query encodings and values disagree in shape");
    Ok(())
}

struct CrossRow {
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

fn cross_rows<T: SceneTokens + ?Sized>(
    state: &QueryState,
    tokens: &T,
    neighbors: &KnnResult,
    k: usize,
    layer: &LayerWeights,
    keys: &Array2<f64>,
) -> Vec<CrossRow> {
    let c = state.values.ncols();
    let scale = 1.0 / (c as f64).sqrt();
    let k = k.min(neighbors.k());
    let positions = tokens.token_positions();
    (0..state.len())
        .into_par_iter()
        .map(|i| {
            let q = project_row(&state.attention_input(i), &layer.cross.query);
            let p_i = state.positions[i];
            let nbrs: Vec<usize> = neighbors.indices.row(i).iter().take(k).copied().collect();
            let mut logits: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let p_j = positions[j];
                    let rel = [p_j[0] - p_i[0], p_j[1] - p_i[1], p_j[2] - p_i[2]];
                    let pe = layer.rel_pe.forward_row(&rel);
                    let key = keys.row(j);
                    let mut s = 0.0;
                    for t in 0..c {
                        s += (q[t] + pe[t]) * (key[t] + pe[t]);
                    }
                    s * scale
                })
                .collect();
            softmax_in_place(&mut logits);
            CrossRow {
                neighbors: nbrs,
                weights: logits,
            }
        })
        .collect()
}

fn project_all(x: ArrayView2<'_, f64>, w: &Array2<f64>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|r| project_row(&x.row(r).to_vec(), w))
        .collect();
    rows_to_array(rows, w.ncols())
}

/// Attention weights of each query over its `k` nearest tokens, in
/// neighbor order.
pub fn cross_attention_weights<T: SceneTokens + ?Sized>(
    state: &QueryState,
    tokens: &T,
    neighbors: &KnnResult,
    k: usize,
    layer: &LayerWeights,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    check_tokens(state, tokens)?;
    let keys = project_all(tokens.token_features(), &layer.cross.key);
    Ok(cross_rows(state, tokens, neighbors, k, layer, &keys)
        .into_iter()
        .map(|r| (r.neighbors, r.weights))
        .collect())
}

/// One k-NN cross-attention sublayer; returns the updated query values.
///
/// `neighbors` must come from [`query_neighbors`] with at least `k`
/// columns (or all tokens).
pub fn knn_cross_attention<T: SceneTokens + ?Sized>(
    state: &QueryState,
    tokens: &T,
    neighbors: &KnnResult,
    k: usize,
    layer: &LayerWeights,
) -> Result<Array2<f64>> {
    check_tokens(state, tokens)?;
    ensure!(k >= 1, "k must be at least 1");
    ensure!(neighbors.indices.nrows() == state.len(), "neighbor table rows do not match queries");
    ensure!(
        neighbors.k() >= k.min(tokens.token_positions().len()),
        "neighbor table has {} columns, k = {k}",
        neighbors.k()
    );
    let c = state.values.ncols();
    let feats = tokens.token_features();
    let keys = project_all(feats, &layer.cross.key);
    let vals = project_all(feats, &layer.cross.value);
    let rows = cross_rows(state, tokens, neighbors, k, layer, &keys);
    let updated: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut agg = vec![0.0; c];
            for (&j, &w) in row.neighbors.iter().zip(&row.weights) {
                for (a, &v) in agg.iter_mut().zip(vals.row(j).iter()) {
                    *a += w * v;
                }
            }
            let delta = project_row(&agg, &layer.cross.out);
            state.values.row(i).iter().zip(&delta).map(|(v, d)| v + d).collect()
        })
        .collect();
    Ok(rows_to_array(updated, c))
}

fn self_attention_sequence(state: &QueryState, loc: &LocationToken) -> Vec<Vec<f64>> {
    let mut seq: Vec<Vec<f64>> = (0..state.len()).map(|i| state.attention_input(i)).collect();
    seq.push(loc.embedding.clone());
    seq
}

/// Per-row distance penalty scale; the last entry belongs to the location
/// token.
pub fn self_attention_sigma(state: &QueryState, loc: &LocationToken, layer: &LayerWeights) -> Vec<f64> {
    let w = layer.sigma_w.as_slice().expect("contiguous");
    (0..state.len())
        .map(|i| softplus(dot(&state.values.row(i).to_vec(), w) + layer.sigma_b))
        .chain(std::iter::once(softplus(dot(&loc.embedding, w) + layer.sigma_b)))
        .collect()
}

/// Pre-softmax logits over the `N + 1` sequence (queries, then the
/// location token): `Q_i·K_j / sqrt(C) - sigma_i · D_ij`, with `D = 0` on
/// the location token's row and column.
pub fn self_attention_logits(state: &QueryState, loc: &LocationToken, layer: &LayerWeights) -> Result<Array2<f64>> {
    let c = state.values.ncols();
    ensure!(loc.embedding.len() == c, "location token has dimension {}, queries have {c}", loc.embedding.len());
    let n = state.len();
    let seq = self_attention_sequence(state, loc);
    let qs: Vec<Vec<f64>> = seq.par_iter().map(|x| project_row(x, &layer.self_attn.query)).collect();
    let ks: Vec<Vec<f64>> = seq.par_iter().map(|x| project_row(x, &layer.self_attn.key)).collect();
    let sigma = self_attention_sigma(state, loc, layer);
    let scale = 1.0 / (c as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            (0..=n)
                .map(|j| {
                    let d = if i < n && j < n {
                        dist(&state.positions[i], &state.positions[j])
                    } else {
                        0.0
                    };
                    dot(&qs[i], &ks[j]) * scale - sigma[i] * d
                })
                .collect()
        })
        .collect();
    Ok(rows_to_array(rows, n + 1))
}

/// Row-stochastic attention matrix of the self-attention sublayer.
pub fn self_attention_weights(state: &QueryState, loc: &LocationToken, layer: &LayerWeights) -> Result<Array2<f64>> {
    let mut logits = self_attention_logits(state, loc, layer)?;
    for mut row in logits.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous"));
    }
    Ok(logits)
}

/// Distance-adaptive self-attention; returns updated query values and the
/// updated location token.
pub fn distance_adaptive_self_attention(
    state: &QueryState,
    loc: &LocationToken,
    layer: &LayerWeights,
) -> Result<(Array2<f64>, LocationToken)> {
    let c = state.values.ncols();
    let n = state.len();
    let attn = self_attention_weights(state, loc, layer)?;
    let value_inputs: Vec<Vec<f64>> = (0..n)
        .map(|i| state.values.row(i).to_vec())
        .chain(std::iter::once(loc.embedding.clone()))
        .collect();
    let vs: Vec<Vec<f64>> = value_inputs.par_iter().map(|x| project_row(x, &layer.self_attn.value)).collect();
    let updated: Vec<Vec<f64>> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut agg = vec![0.0; c];
            for (j, v) in vs.iter().enumerate() {
                let w = attn[(i, j)];
                for (a, &x) in agg.iter_mut().zip(v) {
                    *a += w * x;
                }
            }
            let delta = project_row(&agg, &layer.self_attn.out);
            value_inputs[i].iter().zip(&delta).map(|(v, d)| v + d).collect()
        })
        .collect();
    let mut rows = updated;
    let new_loc = LocationToken {
        embedding: rows.pop().expect("sequence includes the location token"),
    };
    Ok((rows_to_array(rows, c), new_loc))
}

/// Decodes one box per query: center offset from the query position and
/// softplus sizes.
pub fn box_head(values: ArrayView2<'_, f64>, positions: &[Point3], head: &MlpWeights) -> Result<Vec<Box3D>> {
    ensure!(values.nrows() == positions.len(), "box head got {} values for {} positions", values.nrows(), positions.len());
    ensure!(
        head.d_in() == values.ncols() && head.d_out() == 6,
        "box head must map {} -> 6",
        values.ncols()
    );
    Ok((0..values.nrows())
        .into_par_iter()
        .map(|i| decode_box(&head.forward_row(&values.row(i).to_vec()), &positions[i]))
        .collect())
}

#[inline]
pub(crate) fn decode_box(raw: &[f64], position: &Point3) -> Box3D {
    Box3D {
        center: [position[0] + raw[0], position[1] + raw[1], position[2] + raw[2]],
        size: [
            softplus(raw[3]) + MIN_BOX_SIZE,
            softplus(raw[4]) + MIN_BOX_SIZE,
            softplus(raw[5]) + MIN_BOX_SIZE,
        ],
    }
}

/// Query values after every layer plus the final location token.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub initial: QueryState,
    pub layer_values: Vec<Array2<f64>>,
    pub final_loc: LocationToken,
}

impl DecoderTrace {
    pub fn final_values(&self) -> &Array2<f64> {
        self.layer_values.last().unwrap_or(&self.initial.values)
    }
}

/// Runs every decoder layer, keeping intermediate query values.
pub fn run_decoder<T: SceneTokens + ?Sized>(
    tokens: &T,
    loc: &LocationToken,
    cfg: &DecoderConfig,
    weights: &DecoderWeights,
) -> Result<DecoderTrace> {
    cfg.validate()?;
    weights.validate(cfg)?;
    ensure!(
        loc.embedding.len() == cfg.dim,
        "location token has dimension {}, decoder expects {}",
        loc.embedding.len(),
        cfg.dim
    );
    let initial = init_queries(tokens, cfg, weights)?;
    let max_k = cfg.knn_schedule.iter().copied().max().unwrap_or(1);
    let neighbors = if cfg.layers > 0 {
        Some(query_neighbors(&initial, tokens, max_k)?)
    } else {
        None
    };
    let mut state = initial.clone();
    let mut loc = loc.clone();
    let mut layer_values = Vec::with_capacity(cfg.layers);
    for (l, &k) in cfg.knn_schedule.iter().enumerate().take(cfg.layers) {
        let layer = &weights.layers[l];
        let nbrs = neighbors.as_ref().expect("computed when layers > 0");
        state.values = knn_cross_attention(&state, tokens, nbrs, k, layer)?;
        let (values, new_loc) = distance_adaptive_self_attention(&state, &loc, layer)?;
        state.values = values;
        loc = new_loc;
        layer_values.push(state.values.clone());
    }
    Ok(DecoderTrace {
        initial,
        layer_values,
        final_loc: loc,
    })
}

/// Scores queries against the location token and picks the grounded ones.
pub fn select_queries(scores: &[f64], cfg: &DecoderConfig) -> Vec<usize> {
    match cfg.selection {
        SelectionMode::Single => {
            let mut best: Option<usize> = None;
            for (i, &s) in scores.iter().enumerate() {
                if best.is_none_or(|b| s > scores[b]) {
                    best = Some(i);
                }
            }
            best.into_iter().collect()
        }
        SelectionMode::Multi => {
            let mut picked: Vec<usize> = (0..scores.len())
                .filter(|&i| scores[i] >= cfg.selection_threshold)
                .collect();
            picked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            picked
        }
    }
}

/// Full decoder pass: boxes from every layer, query scores and selection.
pub fn grounding_forward<T: SceneTokens + ?Sized>(
    tokens: &T,
    loc: &LocationToken,
    cfg: &DecoderConfig,
    weights: &DecoderWeights,
) -> Result<GroundingOutput> {
    let trace = run_decoder(tokens, loc, cfg, weights)?;
    let positions = &trace.initial.positions;
    let boxes_per_layer = trace
        .layer_values
        .iter()
        .map(|v| box_head(v.view(), positions, &weights.box_head))
        .collect::<Result<Vec<_>>>()?;
    let values = trace.final_values();
    let scores: Vec<f64> = (0..values.nrows())
        .map(|i| cosine(&values.row(i).to_vec(), &trace.final_loc.embedding))
        .collect();
    let selected = select_queries(&scores, cfg);
    Ok(GroundingOutput {
        boxes_per_layer,
        scores,
        selected,
    })
}
