//! Voxel hashing, exact k-nearest-neighbor search and farthest point
//! sampling.
//!
//! Distances are compared as squared Euclidean values and reported in
//! meters. Ties always go to the smaller point index, which makes the
//! grid-accelerated search return exactly what a brute-force scan does.

use std::cmp::Ordering;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{dist2, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

/// Voxel containing `p` on a grid anchored at the origin. Cells are closed
/// on the low side and open on the high side.
pub fn voxel_key(p: Point3, voxel_size: f64) -> Result<VoxelKey> {
    ensure!(
        voxel_size > 0.0 && voxel_size.is_finite(),
        "voxel size must be positive, got {voxel_size}"
    );
    Ok(voxel_key_unchecked(&p, voxel_size))
}

#[inline]
pub(crate) fn voxel_key_unchecked(p: &Point3, voxel_size: f64) -> VoxelKey {
    VoxelKey {
        ix: (p[0] / voxel_size).floor() as i64,
        iy: (p[1] / voxel_size).floor() as i64,
        iz: (p[2] / voxel_size).floor() as i64,
    }
}

/// `q x k` neighbor table, each row sorted by ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub indices: Array2<usize>,
    pub distances: Array2<f64>,
}

impl KnnResult {
    pub fn k(&self) -> usize {
        self.indices.ncols()
    }

    fn from_rows(rows: Vec<Vec<(f64, usize)>>, k: usize) -> Self {
        let q = rows.len();
        let mut indices = Array2::zeros((q, k));
        let mut distances = Array2::zeros((q, k));
        for (r, row) in rows.into_iter().enumerate() {
            for (c, (d2, i)) in row.into_iter().enumerate() {
                indices[(r, c)] = i;
                distances[(r, c)] = d2.sqrt();
            }
        }
        Self { indices, distances }
    }
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn check_knn_args(points: &[Point3], k: usize) -> Result<()> {
    ensure!(!points.is_empty(), "k-NN needs at least one point");
    ensure!(k >= 1, "k must be at least 1");
    Ok(())
}

fn brute_force_row(q: &Point3, points: &[Point3], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(q, p), i)).collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_distance_then_index);
        all.truncate(k);
    }
    all.sort_unstable_by(by_distance_then_index);
    all
}

/// Exact k-NN by scanning every point.
pub fn knn_brute_force(queries: &[Point3], points: &[Point3], k: usize) -> Result<KnnResult> {
    check_knn_args(points, k)?;
    let k = k.min(points.len());
    let rows = queries.par_iter().map(|q| brute_force_row(q, points, k)).collect();
    Ok(KnnResult::from_rows(rows, k))
}

/// Exact k-NN through a uniform grid.
pub fn knn_grid(queries: &[Point3], points: &[Point3], k: usize) -> Result<KnnResult> {
    check_knn_args(points, k)?;
    let grid = KnnGrid::build(points)?;
    grid.query_all(queries, k)
}

/// Exact k-NN, picking the grid for point sets where it pays off.
pub fn knn(queries: &[Point3], points: &[Point3], k: usize) -> Result<KnnResult> {
    if points.len() <= 256 {
        knn_brute_force(queries, points, k)
    } else {
        knn_grid(queries, points, k)
    }
}

/// Uniform bucket grid over a point set.
///
/// The cell edge is picked from the bounding-box density so that the grid
/// holds roughly two points per occupied cell and never more than `4m`
/// cells; it only affects speed.
#[derive(Debug, Clone)]
pub struct KnnGrid {
    points: Vec<Point3>,
    origin: Point3,
    cell: f64,
    dims: [i64; 3],
    cell_start: Vec<usize>,
    cell_points: Vec<usize>,
}

impl KnnGrid {
    pub fn build(points: &[Point3]) -> Result<Self> {
        ensure!(!points.is_empty(), "k-NN needs at least one point");
        ensure!(
            points.iter().flatten().all(|v| v.is_finite()),
            "k-NN points must be finite"
        );
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let max_ext = ext.iter().copied().fold(0.0, f64::max);
        let m = points.len();
        let mut cell = if max_ext > 0.0 {
            let active: Vec<f64> = ext.iter().copied().filter(|&e| e > max_ext * 1e-6).collect();
            let vol: f64 = active.iter().product();
            (vol * 2.0 / m as f64).powf(1.0 / active.len() as f64).max(max_ext * 1e-6)
        } else {
            1.0
        };
        let cells_for = |cell: f64| -> [i64; 3] {
            let mut d = [1i64; 3];
            for a in 0..3 {
                d[a] = ((ext[a] / cell).floor() as i64 + 1).max(1);
            }
            d
        };
        let mut dims = cells_for(cell);
        while (dims[0] as f64) * (dims[1] as f64) * (dims[2] as f64) > (4 * m + 8) as f64 {
            cell *= 1.5;
            dims = cells_for(cell);
        }
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut grid = Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cell_start: vec![0; n_cells + 1],
            cell_points: vec![0; m],
        };
        let cell_of: Vec<usize> = points.iter().map(|p| grid.flat(grid.clamped_cell(p))).collect();
        for &c in &cell_of {
            grid.cell_start[c + 1] += 1;
        }
        for c in 0..n_cells {
            grid.cell_start[c + 1] += grid.cell_start[c];
        }
        let mut fill = grid.cell_start.clone();
        for (i, &c) in cell_of.iter().enumerate() {
            grid.cell_points[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    fn raw_cell(&self, p: &Point3) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = f.clamp(-1e15, 1e15) as i64;
        }
        c
    }

    #[inline]
    fn clamped_cell(&self, p: &Point3) -> [i64; 3] {
        let mut c = self.raw_cell(p);
        for a in 0..3 {
            c[a] = c[a].clamp(0, self.dims[a] - 1);
        }
        c
    }

    #[inline]
    fn flat(&self, c: [i64; 3]) -> usize {
        ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize
    }

    pub fn query_all(&self, queries: &[Point3], k: usize) -> Result<KnnResult> {
        ensure!(k >= 1, "k must be at least 1");
        let k = k.min(self.points.len());
        let rows = queries.par_iter().map(|q| self.query_row(q, k)).collect();
        Ok(KnnResult::from_rows(rows, k))
    }

    fn query_row(&self, q: &Point3, k: usize) -> Vec<(f64, usize)> {
        let c = self.raw_cell(q);
        // shells closer than the grid box hold no cells
        let mut r = 0i64;
        for a in 0..3 {
            r = r.max(-c[a]).max(c[a] - (self.dims[a] - 1));
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        loop {
            let lo = [
                (c[0] - r).max(0),
                (c[1] - r).max(0),
                (c[2] - r).max(0),
            ];
            let hi = [
                (c[0] + r).min(self.dims[0] - 1),
                (c[1] + r).min(self.dims[1] - 1),
                (c[2] + r).min(self.dims[2] - 1),
            ];
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let cheb = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.cell_points[self.cell_start[f]..self.cell_start[f + 1]] {
                            let cand = (dist2(q, &self.points[i]), i);
                            insert_bounded(&mut best, cand, k);
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|a| c[a] - r <= 0 && c[a] + r >= self.dims[a] - 1);
            if covers_all {
                break;
            }
            if best.len() == k {
                // Anything unvisited lies outside the cube of cells c ± r.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if c[a] - r > 0 {
                        let face = self.origin[a] + (c[a] - r) as f64 * self.cell;
                        bound = bound.min(q[a] - face);
                    }
                    if c[a] + r < self.dims[a] - 1 {
                        let face = self.origin[a] + (c[a] + r + 1) as f64 * self.cell;
                        bound = bound.min(face - q[a]);
                    }
                }
                let bound = bound - 1e-9 * (1.0 + bound.abs());
                if bound > 0.0 && best[k - 1].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        best
    }
}

#[inline]
fn insert_bounded(best: &mut Vec<(f64, usize)>, cand: (f64, usize), k: usize) {
    if best.len() == k && by_distance_then_index(&cand, &best[k - 1]) != Ordering::Less {
        return;
    }
    let pos = best.partition_point(|e| by_distance_then_index(e, &cand) == Ordering::Less);
    best.insert(pos, cand);
    if best.len() > k {
        best.pop();
    }
}

/// Greedy max-min farthest point sampling starting from `seed_index`.
/// Returns indices in selection order.
pub fn fps(points: &[Point3], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    let m = points.len();
    ensure!(count >= 1, "fps needs a positive sample count");
    ensure!(count <= m, "fps cannot pick {count} of {m} points");
    ensure!(seed_index < m, "fps seed index {seed_index} out of range for {m} points");
    let mut selected = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; m];
    let mut taken = vec![false; m];
    let mut current = seed_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == count {
            break;
        }
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(&anchor, p);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !taken[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Largest distance from any point to its nearest point in `kept`.
pub fn covering_radius(points: &[Point3], kept: &[Point3]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let nn = knn(points, kept, 1)?;
    Ok(nn.distances.iter().copied().fold(0.0, f64::max))
}
