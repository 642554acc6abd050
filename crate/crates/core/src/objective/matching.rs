use ndarray::Array2;

use super::{diou_loss, Box3D};
use crate::error::{ensure, Result};

/// One-to-one pairing of `(query, gt)` indices, sorted by query index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    pub fn gt_for_query(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    pub fn query_for_gt(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs on a dense cost
/// matrix (shortest augmenting path with potentials, O(n²m)).
pub fn hungarian(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t = cost.t().to_owned();
        let mut pairs: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    let n = rows;
    let m = cols;
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

fn total(cost: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
}

/// Optimal pairs with `fixed` pairs forced and `banned` rows left out.
fn solve_constrained(cost: &Array2<f64>, fixed: &[(usize, usize)], banned: &[usize]) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.dim();
    let free_rows: Vec<usize> = (0..rows)
        .filter(|r| !banned.contains(r) && !fixed.iter().any(|f| f.0 == *r))
        .collect();
    let free_cols: Vec<usize> = (0..cols).filter(|c| !fixed.iter().any(|f| f.1 == *c)).collect();
    let sub = Array2::from_shape_fn((free_rows.len(), free_cols.len()), |(r, c)| cost[(free_rows[r], free_cols[c])]);
    let mut pairs: Vec<(usize, usize)> = fixed.to_vec();
    pairs.extend(hungarian(&sub).into_iter().map(|(r, c)| (free_rows[r], free_cols[c])));
    pairs.sort_unstable();
    pairs
}

/// Minimum-cost one-to-one assignment. Among assignments whose cost is
/// optimal (to 1e-12 relative), the one whose sorted pair list is
/// lexicographically smallest wins.
pub fn assign_min_cost(cost: &Array2<f64>) -> Result<Assignment> {
    let (rows, cols) = cost.dim();
    ensure!(rows > 0 && cols > 0, "assignment needs a nonempty cost matrix");
    ensure!(cost.iter().all(|c| c.is_finite()), "assignment costs must be finite");
    let want = rows.min(cols);
    let mut best = hungarian(cost);
    let opt = total(cost, &best);
    let tol = 1e-12 * opt.abs().max(1.0);

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut banned: Vec<usize> = Vec::new();
    for q in 0..rows {
        if fixed.len() == want {
            break;
        }
        let current = best.iter().find(|p| p.0 == q).map(|p| p.1);
        let limit = current.unwrap_or(cols);
        let mut improved = None;
        for g in 0..limit {
            if fixed.iter().any(|f| f.1 == g) {
                continue;
            }
            let mut trial_fixed = fixed.clone();
            trial_fixed.push((q, g));
            let trial = solve_constrained(cost, &trial_fixed, &banned);
            if trial.len() == want && total(cost, &trial) <= opt + tol {
                improved = Some((g, trial));
                break;
            }
        }
        match (improved, current) {
            (Some((g, trial)), _) => {
                best = trial;
                fixed.push((q, g));
            }
            (None, Some(g)) => fixed.push((q, g)),
            (None, None) => banned.push(q),
        }
    }
    let cost_total = total(cost, &best);
    Ok(Assignment {
        pairs: best,
        cost: cost_total,
    })
}

/// Matches predictions to ground truth on `1 - DIoU` cost.
pub fn match_boxes(preds: &[Box3D], gts: &[Box3D]) -> Result<Assignment> {
    ensure!(!preds.is_empty(), "no predicted boxes to match");
    ensure!(!gts.is_empty(), "no ground-truth boxes to match");
    let cost = Array2::from_shape_fn((preds.len(), gts.len()), |(i, j)| diou_loss(&preds[i], &gts[j]).0);
    assign_min_cost(&cost)
}
