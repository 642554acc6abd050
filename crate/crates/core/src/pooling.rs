//! Token compression over 3D patches.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::Point3;
use crate::lift::Patch3DSet;
use crate::spatial::{fps, voxel_key_unchecked, VoxelKey};

/// Upper bound on voxel tokens after pooling.
pub const DEFAULT_TOKEN_CAP: usize = 3096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PoolStrategy {
    Voxel { voxel_size: f64 },
    /// Voxel pooling followed by FPS down to `cap` tokens.
    VoxelCapped { voxel_size: f64, cap: usize, seed: usize },
    Fps { count: usize, seed: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledTokens {
    pub features: Array2<f64>,
    pub positions: Vec<Point3>,
    /// Input tokens merged into each output token.
    pub counts: Vec<usize>,
    pub strategy: PoolStrategy,
}

impl PooledTokens {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Averages tokens sharing an origin-anchored voxel. Output tokens are
/// ordered by the index of their first member; sums run in ascending input
/// order.
pub fn voxel_pool(patches: &Patch3DSet, voxel_size: f64) -> Result<PooledTokens> {
    ensure!(!patches.is_empty(), "cannot pool an empty patch set");
    ensure!(
        voxel_size > 0.0 && voxel_size.is_finite(),
        "voxel size must be positive, got {voxel_size}"
    );
    let d = patches.dim();
    let mut slot: HashMap<VoxelKey, usize> = HashMap::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut pos_sums: Vec<[f64; 3]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (i, p) in patches.positions.iter().enumerate() {
        let key = voxel_key_unchecked(p, voxel_size);
        let g = *slot.entry(key).or_insert_with(|| {
            sums.push(vec![0.0; d]);
            pos_sums.push([0.0; 3]);
            counts.push(0);
            counts.len() - 1
        });
        for (s, &f) in sums[g].iter_mut().zip(patches.features.row(i).iter()) {
            *s += f;
        }
        for a in 0..3 {
            pos_sums[g][a] += p[a];
        }
        counts[g] += 1;
    }
    let t = counts.len();
    let mut features = Array2::zeros((t, d));
    let mut positions = Vec::with_capacity(t);
    for g in 0..t {
        let c = counts[g] as f64;
        for (dst, s) in features.row_mut(g).iter_mut().zip(&sums[g]) {
            *dst = s / c;
        }
        positions.push([pos_sums[g][0] / c, pos_sums[g][1] / c, pos_sums[g][2] / c]);
    }
    Ok(PooledTokens {
        features,
        positions,
        counts,
        strategy: PoolStrategy::Voxel { voxel_size },
    })
}

/// Voxel pooling with a token cap: when more than `cap` voxels are
/// occupied, FPS over voxel positions keeps `cap` of them.
pub fn voxel_pool_capped(patches: &Patch3DSet, voxel_size: f64, cap: usize, seed_index: usize) -> Result<PooledTokens> {
    ensure!(cap >= 1, "token cap must be positive");
    let pooled = voxel_pool(patches, voxel_size)?;
    if pooled.len() <= cap {
        return Ok(pooled);
    }
    ensure!(seed_index < pooled.len(), "fps seed index {seed_index} out of range");
    let keep = fps(&pooled.positions, cap, seed_index)?;
    Ok(PooledTokens {
        features: pooled.features.select(Axis(0), &keep),
        positions: keep.iter().map(|&i| pooled.positions[i]).collect(),
        counts: keep.iter().map(|&i| pooled.counts[i]).collect(),
        strategy: PoolStrategy::VoxelCapped {
            voxel_size,
            cap,
            seed: seed_index,
        },
    })
}

/// Keeps `count` tokens chosen by farthest point sampling, copied verbatim
/// in selection order.
pub fn fps_pool(patches: &Patch3DSet, count: usize, seed_index: usize) -> Result<PooledTokens> {
    ensure!(!patches.is_empty(), "cannot pool an empty patch set");
    let keep = fps(&patches.positions, count, seed_index)?;
    Ok(PooledTokens {
        features: patches.features.select(Axis(0), &keep),
        positions: keep.iter().map(|&i| patches.positions[i]).collect(),
        counts: vec![1; keep.len()],
        strategy: PoolStrategy::Fps {
            count,
            seed: seed_index,
        },
    })
}

/// Applies a strategy by tag.
pub fn pool(patches: &Patch3DSet, strategy: PoolStrategy) -> Result<PooledTokens> {
    match strategy {
        PoolStrategy::Voxel { voxel_size } => voxel_pool(patches, voxel_size),
        PoolStrategy::VoxelCapped { voxel_size, cap, seed } => voxel_pool_capped(patches, voxel_size, cap, seed),
        PoolStrategy::Fps { count, seed } => fps_pool(patches, count, seed),
    }
}
