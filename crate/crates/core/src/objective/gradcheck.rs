//! Central-difference checks of the analytic loss gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{box_head_loss, diou_loss, info_nce, Box3D, TrainOptions, TrainScene, DEFAULT_TEMPERATURE};
use crate::decoder::{box_head, run_decoder, DecoderConfig, DecoderWeights, LocationToken};
use crate::error::{ensure, Result};
use crate::geometry::Point3;
use crate::pooling::{PoolStrategy, PooledTokens};

/// Step for the five-point differences.
pub const FD_STEP: f64 = 1e-5;

/// InfoNCE logits are cosines over the temperature, so values reach tens
/// and roundoff dominates at small steps; this larger step keeps both
/// roundoff and the O(h^4) truncation error far below tolerance.
pub const FD_STEP_INFONCE: f64 = 3e-4;

/// Trials resample until every kink (touching faces, ReLU inputs) lies at
/// least this far from the evaluation point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Denominator floor in [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradcheckOp {
    Diou,
    Infonce,
    Boxhead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub op: GradcheckOp,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Trial holding the largest error.
    pub worst_trial: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Five-point central difference, error O(h^4).
fn central<F: FnMut(f64) -> f64>(x: f64, h: f64, mut f: F) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

fn random_box<R: Rng>(rng: &mut R) -> Box3D {
    let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let s = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
    Box3D { center: c, size: s }
}

/// Smallest gap between parallel faces of the two boxes.
fn face_gap(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let mut gap = f64::INFINITY;
    for ax in 0..3 {
        for x in [alo[ax], ahi[ax]] {
            for y in [blo[ax], bhi[ax]] {
                gap = gap.min((x - y).abs());
            }
        }
    }
    gap
}

fn diou_trial<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let (pred, gt) = diou_pair(rng);
        if face_gap(&pred, &gt) >= KINK_MARGIN {
            return diou_error(&pred, &gt);
        }
    }
}

fn diou_pair<R: Rng>(rng: &mut R) -> (Box3D, Box3D) {
    let gt = random_box(rng);
    let pred = if rng.random_bool(0.5) {
        // overlapping pair so the IoU term is active
        let mut p = gt;
        for a in 0..3 {
            p.center[a] += rng.random_range(-0.3..0.3) * gt.size[a];
            p.size[a] *= rng.random_range(0.6..1.5);
        }
        p
    } else {
        random_box(rng)
    };
    (pred, gt)
}

fn diou_error(pred: &Box3D, gt: &Box3D) -> f64 {
    let (_, grad) = diou_loss(pred, gt);
    let params = pred.params();
    let mut worst: f64 = 0.0;
    for (i, &g) in grad.iter().enumerate() {
        let numeric = central(params[i], FD_STEP, |v| {
            let mut p = params;
            p[i] = v;
            diou_loss(&Box3D::from_params(p), gt).0
        });
        worst = worst.max(relative_error(g, numeric));
    }
    worst
}

fn infonce_trial<R: Rng>(rng: &mut R) -> Result<f64> {
    let n = rng.random_range(2..9);
    let c = rng.random_range(2..9);
    let queries = Array2::from_shape_simple_fn((n, c), || rng.random_range(-1.0..1.0));
    let loc: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let positive = rng.random_range(0..n);
    let out = info_nce(queries.view(), &loc, positive, DEFAULT_TEMPERATURE)?;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for k in 0..c {
            let numeric = central(queries[(j, k)], FD_STEP_INFONCE, |v| {
                let mut q = queries.clone();
                q[(j, k)] = v;
                info_nce(q.view(), &loc, positive, DEFAULT_TEMPERATURE).map_or(f64::NAN, |o| o.loss)
            });
            worst = worst.max(relative_error(out.grad_queries[(j, k)], numeric));
        }
    }
    for k in 0..c {
        let numeric = central(loc[k], FD_STEP_INFONCE, |v| {
            let mut l = loc.clone();
            l[k] = v;
            info_nce(queries.view(), &l, positive, DEFAULT_TEMPERATURE).map_or(f64::NAN, |o| o.loss)
        });
        worst = worst.max(relative_error(out.grad_loc[k], numeric));
    }
    Ok(worst)
}

/// A small random training problem for box-head checks.
pub fn random_train_problem<R: Rng>(rng: &mut R, dim: usize) -> (Vec<TrainScene>, DecoderConfig, DecoderWeights) {
    let cfg = DecoderConfig {
        layers: 2,
        queries: 6,
        knn_schedule: vec![4, 8],
        dim,
        ..Default::default()
    };
    let weights = DecoderWeights::init(rng, 2, dim);
    let scenes = (0..2)
        .map(|_| {
            let m = 16;
            let positions: Vec<Point3> = (0..m)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)])
                .collect();
            let tokens = PooledTokens {
                features: Array2::from_shape_simple_fn((m, dim), || rng.random_range(-1.0..1.0)),
                positions,
                counts: vec![1; m],
                strategy: PoolStrategy::Fps { count: m, seed: 0 },
            };
            let loc = LocationToken {
                embedding: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let gt = (0..3).map(|_| random_box(rng)).collect();
            TrainScene {
                tokens,
                loc,
                gt,
                targets: vec![0],
            }
        })
        .collect();
    (scenes, cfg, weights)
}

/// Distance to the nearest kink of the box-head loss: the smallest
/// |pre-activation| of a hidden unit and the smallest face gap between a
/// decoded box and a ground-truth box, over every query of every layer.
fn kink_margin(scenes: &[TrainScene], cfg: &DecoderConfig, weights: &DecoderWeights) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for s in scenes {
        let trace = run_decoder(&s.tokens, &s.loc, cfg, weights)?;
        for values in &trace.layer_values {
            for row in values.rows() {
                let t = weights.box_head.forward_traced(&row.to_vec());
                margin = t.hidden_pre.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            for b in box_head(values.view(), &trace.initial.positions, &weights.box_head)? {
                for g in &s.gt {
                    margin = margin.min(face_gap(&b, g));
                }
            }
        }
    }
    Ok(margin)
}

fn boxhead_trial<R: Rng>(rng: &mut R) -> Result<f64> {
    let (scenes, cfg, weights) = loop {
        let problem = random_train_problem(rng, 8);
        if kink_margin(&problem.0, &problem.1, &problem.2)? >= KINK_MARGIN {
            break problem;
        }
    };
    let opts = TrainOptions {
        aux_loss: rng.random_bool(0.5),
        ..Default::default()
    };
    let report = box_head_loss(&scenes, &cfg, &weights, &opts)?;
    let loss_with = |w: &DecoderWeights| box_head_loss(&scenes, &cfg, w, &opts).map_or(f64::NAN, |r| r.diou_loss);
    let mut worst: f64 = 0.0;
    let grads = report.gradients.named();
    for (name, g) in grads {
        for (idx, &analytic) in g.iter().enumerate() {
            let numeric = central(0.0, FD_STEP, |delta| {
                let mut w = weights.clone();
                let head = &mut w.box_head;
                let slot = match name {
                    "box_head.w1" => head.w1.as_slice_mut().expect("standard layout").get_mut(idx),
                    "box_head.b1" => head.b1.as_slice_mut().expect("standard layout").get_mut(idx),
                    "box_head.w2" => head.w2.as_slice_mut().expect("standard layout").get_mut(idx),
                    _ => head.b2.as_slice_mut().expect("standard layout").get_mut(idx),
                };
                *slot.expect("index in range") += delta;
                loss_with(&w)
            });
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Runs `trials` seeded random checks and reports the worst relative error.
pub fn gradcheck(op: GradcheckOp, trials: usize, tol: f64, seed: u64) -> Result<GradcheckReport> {
    ensure!(trials >= 1, "gradcheck needs at least one trial");
    ensure!(tol > 0.0, "tolerance must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error: f64 = 0.0;
    let mut worst_trial = 0;
    for t in 0..trials {
        let e = match op {
            GradcheckOp::Diou => diou_trial(&mut rng),
            GradcheckOp::Infonce => infonce_trial(&mut rng)?,
            GradcheckOp::Boxhead => boxhead_trial(&mut rng)?,
        };
        // NaN counts as a failure
        if e > max_rel_error || e.is_nan() {
            max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            worst_trial = t;
        }
    }
    Ok(GradcheckReport {
        op,
        trials,
        max_rel_error,
        worst_trial,
        tol,
        pass: max_rel_error < tol,
    })
}
