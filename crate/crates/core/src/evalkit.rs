//! Grounding accuracy at IoU thresholds and pooling ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::lift::Patch3DSet;
use crate::objective::{iou3d, Box3D};
use crate::pooling::{fps_pool, voxel_pool};
use crate::spatial::covering_radius;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub best_iou: f64,
    /// Per threshold: 0/1 for single-target scenes, F1 for multi-target ones.
    pub hits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Threshold (as printed) to mean hit over scenes.
    pub acc_at: BTreeMap<String, f64>,
    pub per_scene: Vec<SceneEval>,
    pub n_scenes: usize,
}

impl EvalReport {
    pub fn accuracy(&self, threshold: f64) -> Option<f64> {
        self.acc_at.get(&threshold_key(threshold)).copied()
    }

    /// `scene_id,best_iou,hit_025,...` with one hit column per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,best_iou");
        for t in &self.thresholds {
            let _ = write!(out, ",hit_{:03}", (t * 100.0).round() as i64);
        }
        out.push('\n');
        for s in &self.per_scene {
            let _ = write!(out, "{},{}", s.scene_id, s.best_iou);
            for h in &s.hits {
                let _ = write!(out, ",{h}");
            }
            out.push('\n');
        }
        out
    }
}

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Greedy one-to-one matching by descending IoU; ties go to the lower
/// (pred, gt) index pair.
fn greedy_pairs(preds: &[Box3D], gts: &[Box3D]) -> Vec<f64> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = iou3d(p, g);
            if iou > 0.0 {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut ious = Vec::new();
    for (iou, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            ious.push(iou);
        }
    }
    ious
}

fn eval_scene(scene_id: &str, preds: &[Box3D], gts: &[Box3D], thresholds: &[f64]) -> SceneEval {
    if gts.len() == 1 {
        // single target: only the top selected box counts
        let best_iou = preds.first().map_or(0.0, |p| iou3d(p, &gts[0]));
        let hits = thresholds.iter().map(|&t| if best_iou >= t { 1.0 } else { 0.0 }).collect();
        return SceneEval {
            scene_id: scene_id.to_string(),
            best_iou,
            hits,
        };
    }
    let ious = greedy_pairs(preds, gts);
    let best_iou = ious.iter().copied().fold(0.0, f64::max);
    let denom = (preds.len() + gts.len()) as f64;
    let hits = thresholds
        .iter()
        .map(|&t| {
            if denom == 0.0 {
                return 1.0;
            }
            let tp = ious.iter().filter(|&&v| v >= t).count() as f64;
            2.0 * tp / denom
        })
        .collect();
    SceneEval {
        scene_id: scene_id.to_string(),
        best_iou,
        hits,
    }
}

/// Fraction of scenes whose prediction reaches each IoU threshold.
/// `preds[i]` lists scene `i`'s selected boxes, best first; `gts[i]` its
/// target boxes.
pub fn acc_at_iou(
    scene_ids: &[String],
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    thresholds: &[f64],
) -> Result<EvalReport> {
    ensure!(
        scene_ids.len() == preds.len() && preds.len() == gts.len(),
        "scene lists differ in length ({} ids, {} predictions, {} targets)",
        scene_ids.len(),
        preds.len(),
        gts.len()
    );
    ensure!(!thresholds.is_empty(), "need at least one IoU threshold");
    ensure!(
        thresholds.iter().all(|t| (0.0..=1.0).contains(t)),
        "IoU thresholds must lie in [0, 1]"
    );
    ensure!(gts.iter().all(|g| !g.is_empty()), "every scene needs a target box");
    let per_scene: Vec<SceneEval> = (0..scene_ids.len())
        .into_par_iter()
        .map(|i| eval_scene(&scene_ids[i], &preds[i], &gts[i], thresholds))
        .collect();
    let n = per_scene.len();
    let mut acc_at = BTreeMap::new();
    for (k, &t) in thresholds.iter().enumerate() {
        let total: f64 = per_scene.iter().map(|s| s.hits[k]).sum();
        acc_at.insert(threshold_key(t), if n == 0 { 0.0 } else { total / n as f64 });
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        acc_at,
        per_scene,
        n_scenes: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub parameter: f64,
    pub tokens: Vec<usize>,
    pub covering_radius: Vec<f64>,
    pub mean_tokens: f64,
    pub mean_covering_radius: f64,
}

fn row(strategy: &str, parameter: f64, stats: Vec<(usize, f64)>) -> AblationRow {
    let n = stats.len() as f64;
    let tokens: Vec<usize> = stats.iter().map(|s| s.0).collect();
    let covering_radius: Vec<f64> = stats.iter().map(|s| s.1).collect();
    AblationRow {
        strategy: strategy.to_string(),
        parameter,
        mean_tokens: tokens.iter().sum::<usize>() as f64 / n,
        mean_covering_radius: covering_radius.iter().sum::<f64>() / n,
        tokens,
        covering_radius,
    }
}

/// Token counts and covering radii for voxel pooling at each size and FPS
/// at each count (clamped to the scene's patch count).
pub fn pooling_ablation(scenes: &[Patch3DSet], voxel_sizes: &[f64], fps_counts: &[usize]) -> Result<Vec<AblationRow>> {
    ensure!(!scenes.is_empty(), "pooling ablation needs at least one scene");
    ensure!(
        !voxel_sizes.is_empty() || !fps_counts.is_empty(),
        "pooling ablation needs at least one configuration"
    );
    let mut rows = Vec::new();
    for &size in voxel_sizes {
        let stats = scenes
            .par_iter()
            .map(|s| {
                let pooled = voxel_pool(s, size)?;
                Ok((pooled.len(), covering_radius(&s.positions, &pooled.positions)?))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row("voxel", size, stats));
    }
    for &count in fps_counts {
        let stats = scenes
            .par_iter()
            .map(|s| {
                let pooled = fps_pool(s, count.min(s.len()), 0)?;
                Ok((pooled.len(), covering_radius(&s.positions, &pooled.positions)?))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row("fps", count as f64, stats));
    }
    Ok(rows)
}
