//! Box-head optimization with every other decoder weight frozen.
//!
//! Query values do not depend on the box head, so each scene's decoder pass
//! runs once up front; every step then re-decodes boxes, re-matches them to
//! ground truth and backpropagates the mean matched DIoU loss through the
//! two-layer head.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{diou_loss, info_nce_multi, match_boxes, Box3D, DEFAULT_TEMPERATURE};
use crate::decoder::{decode_box, run_decoder, DecoderConfig, DecoderWeights, LocationToken};
use crate::error::{ensure, Error, Result};
use crate::geometry::Point3;
use crate::nn::{sigmoid, MlpWeights};
use crate::pooling::PooledTokens;

/// One training scene: pooled tokens, the conditioning token and the
/// ground truth. `targets` index into `gt` and name the boxes the location
/// token refers to.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub tokens: PooledTokens,
    pub loc: LocationToken,
    pub gt: Vec<Box3D>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub temperature: f64,
    /// Average the loss over every layer's boxes instead of the last only.
    pub aux_loss: bool,
    /// Treat every query matched to a target as an InfoNCE positive.
    pub multi_positive: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.02,
            momentum: 0.95,
            temperature: DEFAULT_TEMPERATURE,
            aux_loss: false,
            multi_positive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub diou_loss: f64,
    pub infonce_loss: f64,
}

/// Gradients shaped like [`MlpWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &MlpWeights) -> Self {
        Self {
            w1: Array2::zeros(mlp.w1.dim()),
            b1: Array1::zeros(mlp.b1.len()),
            w2: Array2::zeros(mlp.w2.dim()),
            b2: Array1::zeros(mlp.b2.len()),
        }
    }

    /// `(name, flat values)` in weight-file order.
    pub fn named(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("box_head.w1", self.w1.iter().copied().collect()),
            ("box_head.b1", self.b1.to_vec()),
            ("box_head.w2", self.w2.iter().copied().collect()),
            ("box_head.b2", self.b2.to_vec()),
        ]
    }

    fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    fn add_scaled(&mut self, other: &MlpGradients, s: f64) {
        self.w1.scaled_add(s, &other.w1);
        self.b1.scaled_add(s, &other.b1);
        self.w2.scaled_add(s, &other.w2);
        self.b2.scaled_add(s, &other.b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub diou_loss: f64,
    pub infonce_loss: f64,
    pub gradients: MlpGradients,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub box_head: MlpWeights,
}

/// Frozen decoder outputs for one scene.
#[derive(Debug, Clone)]
pub(crate) struct FrozenScene {
    positions: Vec<Point3>,
    layer_values: Vec<Array2<f64>>,
    final_loc: Vec<f64>,
    gt: Vec<Box3D>,
    targets: Vec<usize>,
}

pub(crate) fn freeze_scene(scene: &TrainScene, cfg: &DecoderConfig, weights: &DecoderWeights) -> Result<FrozenScene> {
    ensure!(!scene.gt.is_empty(), "training scene has no ground-truth boxes");
    ensure!(
        scene.targets.iter().all(|&t| t < scene.gt.len()),
        "target index out of range"
    );
    ensure!(cfg.layers >= 1, "box-head training needs at least one decoder layer");
    let trace = run_decoder(&scene.tokens, &scene.loc, cfg, weights)?;
    Ok(FrozenScene {
        positions: trace.initial.positions.clone(),
        layer_values: trace.layer_values,
        final_loc: trace.final_loc.embedding,
        gt: scene.gt.clone(),
        targets: scene.targets.clone(),
    })
}

/// Loss and box-head gradient over a batch of frozen scenes.
pub(crate) fn frozen_loss(
    scenes: &[FrozenScene],
    head: &MlpWeights,
    opts: &TrainOptions,
) -> Result<LossReport> {
    ensure!(!scenes.is_empty(), "no training scenes");
    let per_scene: Vec<Result<LossReport>> = scenes.par_iter().map(|s| scene_loss(s, head, opts)).collect();
    let mut total = LossReport {
        diou_loss: 0.0,
        infonce_loss: 0.0,
        gradients: MlpGradients::zeros_like(head),
    };
    let w = 1.0 / scenes.len() as f64;
    // fixed accumulation order: ascending scene index
    for r in per_scene {
        let r = r?;
        total.diou_loss += w * r.diou_loss;
        total.infonce_loss += w * r.infonce_loss;
        total.gradients.add_scaled(&r.gradients, w);
    }
    Ok(total)
}

fn scene_loss(scene: &FrozenScene, head: &MlpWeights, opts: &TrainOptions) -> Result<LossReport> {
    let layers: Vec<&Array2<f64>> = if opts.aux_loss {
        scene.layer_values.iter().collect()
    } else {
        scene.layer_values.last().into_iter().collect()
    };
    let mut grads = MlpGradients::zeros_like(head);
    let mut diou_total = 0.0;
    let layer_w = 1.0 / layers.len() as f64;
    let mut final_pairs = Vec::new();
    for values in &layers {
        let traces: Vec<_> = (0..values.nrows())
            .map(|i| head.forward_traced(&values.row(i).to_vec()))
            .collect();
        let boxes: Vec<Box3D> = traces
            .iter()
            .zip(&scene.positions)
            .map(|(t, p)| decode_box(&t.output, p))
            .collect();
        let assignment = match_boxes(&boxes, &scene.gt)?;
        let pair_w = layer_w / assignment.pairs.len() as f64;
        for &(q, g) in &assignment.pairs {
            let (loss, dbox) = diou_loss(&boxes[q], &scene.gt[g]);
            diou_total += pair_w * loss;
            let raw = &traces[q].output;
            let mut dout = [0.0; 6];
            for a in 0..3 {
                dout[a] = dbox[a] * pair_w;
                dout[3 + a] = dbox[3 + a] * sigmoid(raw[3 + a]) * pair_w;
            }
            backprop_row(head, &values.row(q).to_vec(), &traces[q], &dout, &mut grads);
        }
        final_pairs = assignment.pairs;
    }

    // Similarity between matched target queries and the location token.
    let values = scene.layer_values.last().expect("at least one layer");
    let mut positives: Vec<usize> = scene
        .targets
        .iter()
        .filter_map(|&t| final_pairs.iter().find(|p| p.1 == t).map(|p| p.0))
        .collect();
    if !opts.multi_positive {
        positives.truncate(1);
    }
    let infonce = if positives.is_empty() {
        0.0
    } else {
        match info_nce_multi(values.view(), &scene.final_loc, &positives, opts.temperature) {
            Ok(out) => out.loss,
            // zero-norm queries make the similarity undefined; report nothing
            Err(Error::InvalidArgument(_)) => f64::NAN,
            Err(e) => return Err(e),
        }
    };
    Ok(LossReport {
        diou_loss: diou_total,
        infonce_loss: infonce,
        gradients: grads,
    })
}

fn backprop_row(head: &MlpWeights, x: &[f64], trace: &crate::nn::MlpTrace, dout: &[f64; 6], grads: &mut MlpGradients) {
    let hidden = &trace.hidden;
    for (h, &hv) in hidden.iter().enumerate() {
        if hv != 0.0 {
            for o in 0..6 {
                grads.w2[(h, o)] += hv * dout[o];
            }
        }
    }
    for o in 0..6 {
        grads.b2[o] += dout[o];
    }
    let mut dpre = vec![0.0; hidden.len()];
    for (h, d) in dpre.iter_mut().enumerate() {
        let dh: f64 = (0..6).map(|o| head.w2[(h, o)] * dout[o]).sum();
        *d = dh * head.activation.derivative(trace.hidden_pre[h]);
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (h, &d) in dpre.iter().enumerate() {
                grads.w1[(i, h)] += xi * d;
            }
        }
    }
    for (h, &d) in dpre.iter().enumerate() {
        grads.b1[h] += d;
    }
}

/// Mean matched DIoU loss (and monitoring InfoNCE) for the current box head.
pub fn box_head_loss(
    scenes: &[TrainScene],
    cfg: &DecoderConfig,
    weights: &DecoderWeights,
    opts: &TrainOptions,
) -> Result<LossReport> {
    let frozen = scenes
        .iter()
        .map(|s| freeze_scene(s, cfg, weights))
        .collect::<Result<Vec<_>>>()?;
    frozen_loss(&frozen, &weights.box_head, opts)
}

/// Gradient descent on the box head, with optional heavy-ball momentum
/// (`v = momentum * v + g`, `w -= lr * v`). `losses[s]` is measured before
/// the update of step `s`.
pub fn train_box_head(
    scenes: &[TrainScene],
    cfg: &DecoderConfig,
    weights: &DecoderWeights,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    ensure!(opts.steps >= 1, "training needs at least one step");
    ensure!(opts.lr >= 0.0 && opts.lr.is_finite(), "learning rate must be non-negative");
    ensure!((0.0..1.0).contains(&opts.momentum), "momentum must lie in [0, 1)");
    let frozen = scenes
        .iter()
        .map(|s| freeze_scene(s, cfg, weights))
        .collect::<Result<Vec<_>>>()?;
    let mut head = weights.box_head.clone();
    let mut velocity = MlpGradients::zeros_like(&head);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let report = frozen_loss(&frozen, &head, opts)?;
        if !report.diou_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("DIoU loss became {}", report.diou_loss),
            });
        }
        losses.push(StepLoss {
            step,
            diou_loss: report.diou_loss,
            infonce_loss: report.infonce_loss,
        });
        velocity.scale(opts.momentum);
        velocity.add_scaled(&report.gradients, 1.0);
        head.w1.scaled_add(-opts.lr, &velocity.w1);
        head.b1.scaled_add(-opts.lr, &velocity.b1);
        head.w2.scaled_add(-opts.lr, &velocity.w2);
        head.b2.scaled_add(-opts.lr, &velocity.b2);
    }
    Ok(TrainReport { losses, box_head: head })
}
