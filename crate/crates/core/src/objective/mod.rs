//! Box overlap, training losses with analytic gradients, and query to
//! ground-truth matching.
//!
//! Boxes are axis-aligned. Where two faces coincide the DIoU gradient
//! uses the midpoint of the one-sided derivatives, which is 0 for
//! identical boxes; disjoint boxes get no IoU gradient.

pub mod gradcheck;
mod matching;
mod train;

pub use matching::{assign_min_cost, hungarian, match_boxes, Assignment};
pub use train::{
    box_head_loss, train_box_head, LossReport, MlpGradients, StepLoss, TrainOptions, TrainReport, TrainScene,
};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::Point3;
use crate::nn::{dot, norm};

/// Default InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: Point3,
}

impl Box3D {
    pub fn new(center: Point3, size: Point3) -> Result<Self> {
        ensure!(
            size.iter().all(|&s| s > 0.0 && s.is_finite()),
            "box size {size:?} must be positive"
        );
        ensure!(center.iter().all(|c| c.is_finite()), "box center {center:?} must be finite");
        Ok(Self { center, size })
    }

    pub fn from_min_max(min: Point3, max: Point3) -> Result<Self> {
        Self::new(
            [
                (min[0] + max[0]) / 2.0,
                (min[1] + max[1]) / 2.0,
                (min[2] + max[2]) / 2.0,
            ],
            [max[0] - min[0], max[1] - min[1], max[2] - min[2]],
        )
    }

    #[inline]
    pub fn min(&self) -> Point3 {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    #[inline]
    pub fn max(&self) -> Point3 {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Interiors overlap (touching faces do not count).
    pub fn overlaps(&self, other: &Box3D) -> bool {
        let (alo, ahi, blo, bhi) = (self.min(), self.max(), other.min(), other.max());
        (0..3).all(|a| alo[a] < bhi[a] && blo[a] < ahi[a])
    }

    /// `[cx, cy, cz, sx, sy, sz]`.
    pub fn params(&self) -> [f64; 6] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
        ]
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Self {
            center: [p[0], p[1], p[2]],
            size: [p[3], p[4], p[5]],
        }
    }

    pub fn translated(&self, t: Point3) -> Self {
        Self {
            center: [self.center[0] + t[0], self.center[1] + t[1], self.center[2] + t[2]],
            size: self.size,
        }
    }
}

/// Intersection volume over union volume.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    for ax in 0..3 {
        let o = ahi[ax].min(bhi[ax]) - alo[ax].max(blo[ax]);
        if o <= 0.0 {
            return 0.0;
        }
        inter *= o;
    }
    let extent_volume = |lo: Point3, hi: Point3| (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]);
    let union = extent_volume(alo, ahi) + extent_volume(blo, bhi) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU minus squared center distance over the squared diagonal of the
/// smallest enclosing box.
pub fn diou(a: &Box3D, b: &Box3D) -> f64 {
    1.0 - diou_loss(a, b).0
}

/// Derivative of `max(x, y)` in `x`: 1 above, 0 below, 1/2 at a tie so
/// that a face lying exactly on another gets the midpoint subgradient.
fn step(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x < y {
        0.0
    } else {
        0.5
    }
}

/// `1 - DIoU(pred, gt)` and its gradient with respect to
/// `pred.params()`.
pub fn diou_loss(pred: &Box3D, gt: &Box3D) -> (f64, [f64; 6]) {
    let (plo, phi, glo, ghi) = (pred.min(), pred.max(), gt.min(), gt.max());

    // Per-axis overlap and its partials w.r.t. the pred's low/high faces.
    let mut ov = [0.0; 3];
    let mut dov_lo = [0.0; 3];
    let mut dov_hi = [0.0; 3];
    let mut disjoint = false;
    for a in 0..3 {
        let o = phi[a].min(ghi[a]) - plo[a].max(glo[a]);
        if o <= 0.0 {
            disjoint = true;
            ov[a] = 0.0;
        } else {
            ov[a] = o;
            dov_hi[a] = 1.0 - step(phi[a], ghi[a]);
            dov_lo[a] = -step(plo[a], glo[a]);
        }
    }
    if disjoint {
        dov_lo = [0.0; 3];
        dov_hi = [0.0; 3];
    }
    let inter = ov[0] * ov[1] * ov[2];
    // volumes from face extents so identical boxes give IoU exactly 1
    let pext = [phi[0] - plo[0], phi[1] - plo[1], phi[2] - plo[2]];
    let vp = pext[0] * pext[1] * pext[2];
    let vg = (ghi[0] - glo[0]) * (ghi[1] - glo[1]) * (ghi[2] - glo[2]);
    let union = vp + vg - inter;
    let iou = inter / union;

    // Enclosing box extents.
    let mut enc = [0.0; 3];
    let mut denc_lo = [0.0; 3];
    let mut denc_hi = [0.0; 3];
    for a in 0..3 {
        enc[a] = phi[a].max(ghi[a]) - plo[a].min(glo[a]);
        denc_hi[a] = step(phi[a], ghi[a]);
        denc_lo[a] = -step(glo[a], plo[a]);
    }
    let diag2 = enc[0] * enc[0] + enc[1] * enc[1] + enc[2] * enc[2];
    let mut cdist2 = 0.0;
    for a in 0..3 {
        let d = pred.center[a] - gt.center[a];
        cdist2 += d * d;
    }
    let penalty = cdist2 / diag2;
    let loss = 1.0 - iou + penalty;

    let mut grad = [0.0; 6];
    for a in 0..3 {
        let others_ov = ov[(a + 1) % 3] * ov[(a + 2) % 3];
        let others_size = pext[(a + 1) % 3] * pext[(a + 2) % 3];
        // d/d(center) = d/d(hi) + d/d(lo); d/d(size) = (d/d(hi) - d/d(lo)) / 2
        let dinter_dc = others_ov * (dov_hi[a] + dov_lo[a]);
        let dinter_ds = others_ov * 0.5 * (dov_hi[a] - dov_lo[a]);
        let dvp_ds = others_size;
        let diou_dc = (dinter_dc * union - inter * (-dinter_dc)) / (union * union);
        let diou_ds = (dinter_ds * union - inter * (dvp_ds - dinter_ds)) / (union * union);

        let ddiag_dc = 2.0 * enc[a] * (denc_hi[a] + denc_lo[a]);
        let ddiag_ds = 2.0 * enc[a] * 0.5 * (denc_hi[a] - denc_lo[a]);
        let dcd_dc = 2.0 * (pred.center[a] - gt.center[a]);
        let dpen_dc = (dcd_dc * diag2 - cdist2 * ddiag_dc) / (diag2 * diag2);
        let dpen_ds = -cdist2 * ddiag_ds / (diag2 * diag2);

        grad[a] = -diou_dc + dpen_dc;
        grad[3 + a] = -diou_ds + dpen_ds;
    }
    (loss, grad)
}

/// InfoNCE value and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_queries: Array2<f64>,
    pub grad_loc: Vec<f64>,
}

/// `-log softmax(cos(q_j, loc) / temperature)[positive]`.
pub fn info_nce(queries: ArrayView2<'_, f64>, loc: &[f64], positive: usize, temperature: f64) -> Result<InfoNceOutput> {
    info_nce_multi(queries, loc, &[positive], temperature)
}

/// InfoNCE averaged over several positives sharing one softmax.
pub fn info_nce_multi(
    queries: ArrayView2<'_, f64>,
    loc: &[f64],
    positives: &[usize],
    temperature: f64,
) -> Result<InfoNceOutput> {
    let n = queries.nrows();
    let c = queries.ncols();
    ensure!(temperature > 0.0 && temperature.is_finite(), "temperature must be positive");
    ensure!(n >= 1, "InfoNCE needs at least one query");
    ensure!(!positives.is_empty(), "InfoNCE needs a positive");
    ensure!(positives.iter().all(|&p| p < n), "positive index out of range for {n} queries");
    ensure!(loc.len() == c, "location token has dimension {}, queries have {c}", loc.len());
    let loc_norm = norm(loc);
    ensure!(loc_norm > 0.0, "location token has zero norm");

    let rows: Vec<Vec<f64>> = (0..n).map(|j| queries.row(j).to_vec()).collect();
    let q_norms: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
    ensure!(q_norms.iter().all(|&v| v > 0.0), "a query embedding has zero norm");
    let cos: Vec<f64> = rows
        .iter()
        .zip(&q_norms)
        .map(|(r, &qn)| dot(r, loc) / (qn * loc_norm))
        .collect();
    let s: Vec<f64> = cos.iter().map(|c| c / temperature).collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let np = positives.len() as f64;
    let mut loss = 0.0;
    // dL/ds_j = softmax_j - mean over positives of [j == p]
    let mut ds: Vec<f64> = probs.clone();
    for &p in positives {
        loss += log_z + (max - s[p]);
        ds[p] -= 1.0 / np;
    }
    loss /= np;

    let mut grad_queries = Array2::zeros((n, c));
    let mut grad_loc = vec![0.0; c];
    for j in 0..n {
        let g = ds[j] / temperature;
        if g == 0.0 {
            continue;
        }
        let qn = q_norms[j];
        for k in 0..c {
            let dcos_dq = loc[k] / (qn * loc_norm) - cos[j] * rows[j][k] / (qn * qn);
            let dcos_dl = rows[j][k] / (qn * loc_norm) - cos[j] * loc[k] / (loc_norm * loc_norm);
            grad_queries[(j, k)] = g * dcos_dq;
            grad_loc[k] += g * dcos_dl;
        }
    }
    Ok(InfoNceOutput {
        loss,
        grad_queries,
        grad_loc,
    })
}
