//! Seeded synthetic RGB-D scenes: axis-aligned boxes on the floor of a
//! room, cameras on a circular orbit, exact depth by ray casting.
//!
//! The world is z-up; the room spans `[-x/2, x/2] x [-y/2, y/2] x [0, z]`.
//! Only boxes are rendered, so rays that miss every box read depth 0.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::LocationToken;
use crate::error::{ensure, Error, Result};
use crate::geometry::{nearest_pixel, patch_grid_dims, CameraView, DepthMap, Extrinsics, Intrinsics, Point3};
use crate::objective::Box3D;

/// Default orbit size.
pub const DEFAULT_VIEWS: usize = 32;

const FEATURE_NOISE: f64 = 0.05;
const BOX_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Random,
    #[default]
    BoxOnehotPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_boxes: usize,
    pub room_extent: Point3,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub patch: u32,
    pub feature_dim: usize,
    pub feature_mode: FeatureMode,
    /// Horizontal field of view in radians.
    pub hfov: f64,
    /// Box edge lengths are drawn from this range (meters).
    pub box_size_range: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_boxes: 4,
            room_extent: [4.0, 4.0, 2.5],
            n_views: DEFAULT_VIEWS,
            width: 336,
            height: 336,
            patch: 14,
            feature_dim: 64,
            feature_mode: FeatureMode::BoxOnehotPlusNoise,
            hfov: 70f64.to_radians(),
            box_size_range: (0.4, 1.2),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_boxes >= 1, "scene needs at least one box");
        ensure!(self.n_views >= 1, "scene needs at least one view");
        ensure!(self.feature_dim >= 1, "feature dimension must be positive");
        ensure!(
            self.room_extent.iter().all(|&e| e > 0.0 && e.is_finite()),
            "room extent must be positive"
        );
        let (lo, hi) = self.box_size_range;
        ensure!(lo > 0.0 && hi >= lo, "box size range must be positive and ordered");
        ensure!(
            hi < self.room_extent[0] && hi < self.room_extent[1] && hi <= self.room_extent[2],
            "largest box does not fit the room"
        );
        ensure!(self.hfov > 0.0 && self.hfov < std::f64::consts::PI, "field of view out of range");
        patch_grid_dims(self.width, self.height, self.patch)?;
        Ok(())
    }

    pub fn scene_id(&self) -> String {
        format!("scene_{:06}", self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<Box3D>,
    pub labels: Vec<u32>,
}

/// A generated or loaded scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub patch: u32,
    pub views: Vec<CameraView>,
    pub gt: GroundTruth,
    /// Ground-truth indices the scene's location token refers to.
    pub targets: Vec<usize>,
}

impl Scene {
    pub fn feature_dim(&self) -> Option<usize> {
        self.views.first().and_then(|v| v.features.as_ref()).map(|f| f.ncols())
    }

    pub fn target_boxes(&self) -> Vec<Box3D> {
        self.targets.iter().map(|&t| self.gt.boxes[t]).collect()
    }

    /// Location token standing in for the language model's output: the
    /// one-hot code the features of the first target box carry.
    pub fn location_token(&self, dim: usize) -> LocationToken {
        let mut e = vec![0.0; dim];
        if let Some(&t) = self.targets.first() {
            e[self.gt.labels[t] as usize % dim] = 1.0;
        }
        LocationToken { embedding: e }
    }
}

/// Depth and the index of the box each pixel hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub depth: DepthMap,
    pub hit: Vec<Option<u32>>,
}

/// Nearest positive ray parameter of `origin + t * dir` against a box,
/// using the slab method. A ray starting inside reports its exit distance.
pub fn ray_box(origin: &Point3, dir: &Point3, b: &Box3D) -> Option<f64> {
    let (lo, hi) = (b.min(), b.max());
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut t0 = (lo[a] - origin[a]) * inv;
        let mut t1 = (hi[a] - origin[a]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    if t_far < t_near {
        return None;
    }
    if t_near > 0.0 {
        Some(t_near)
    } else if t_far > 0.0 {
        Some(t_far)
    } else {
        None
    }
}

/// Per-pixel depth against every box; rays through integer pixel centers.
pub fn render_depth(intrinsics: &Intrinsics, extrinsics: &Extrinsics, boxes: &[Box3D]) -> DepthRender {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = extrinsics.origin();
    let rows: Vec<(Vec<f32>, Vec<Option<u32>>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut depth = Vec::with_capacity(w as usize);
            let mut hit = Vec::with_capacity(w as usize);
            for u in 0..w {
                let dir = extrinsics.camera_to_world_dir(intrinsics.ray(u as f64, v as f64));
                let mut best: Option<(f64, u32)> = None;
                for (bi, b) in boxes.iter().enumerate() {
                    if let Some(t) = ray_box(&origin, &dir, b) {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, bi as u32));
                        }
                    }
                }
                depth.push(best.map_or(0.0, |(t, _)| t as f32));
                hit.push(best.map(|(_, bi)| bi));
            }
            (depth, hit)
        })
        .collect();
    let mut data = Vec::with_capacity((w * h) as usize);
    let mut hit = Vec::with_capacity((w * h) as usize);
    for (d, hh) in rows {
        data.extend(d);
        hit.extend(hh);
    }
    DepthRender {
        depth: DepthMap {
            width: w,
            height: h,
            data,
        },
        hit,
    }
}

fn place_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let [ex, ey, ez] = spec.room_extent;
    let (smin, smax) = spec.box_size_range;
    let max_attempts = 10 * spec.n_boxes * 100;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.n_boxes);
    let mut attempts = 0;
    while boxes.len() < spec.n_boxes {
        if attempts >= max_attempts {
            return Err(Error::Capacity(format!(
                "placed {} of {} boxes in {max_attempts} attempts",
                boxes.len(),
                spec.n_boxes
            )));
        }
        attempts += 1;
        let size = [
            rng.random_range(smin..=smax),
            rng.random_range(smin..=smax),
            rng.random_range(smin..=smax.min(ez)),
        ];
        let cx = rng.random_range((-ex + size[0]) / 2.0..=(ex - size[0]) / 2.0);
        let cy = rng.random_range((-ey + size[1]) / 2.0..=(ey - size[1]) / 2.0);
        let candidate = Box3D {
            center: [cx, cy, size[2] / 2.0],
            size,
        };
        let grown = Box3D {
            center: candidate.center,
            size: [size[0] + 2.0 * BOX_GAP, size[1] + 2.0 * BOX_GAP, size[2] + 2.0 * BOX_GAP],
        };
        if boxes.iter().all(|b| !grown.overlaps(b)) {
            boxes.push(candidate);
        }
    }
    Ok(boxes)
}

fn orbit_cameras(spec: &SceneSpec) -> Result<Vec<Extrinsics>> {
    let [ex, ey, ez] = spec.room_extent;
    let radius = 0.5 * ex.hypot(ey) + 0.5;
    let height = 0.8 * ez;
    let target = [0.0, 0.0, 0.15 * ez];
    (0..spec.n_views)
        .map(|v| {
            let theta = std::f64::consts::TAU * v as f64 / spec.n_views as f64;
            let eye = [radius * theta.cos(), radius * theta.sin(), height];
            Extrinsics::look_at(eye, target, [0.0, 0.0, 1.0])
        })
        .collect()
}

fn view_features(
    spec: &SceneSpec,
    view_index: usize,
    intrinsics: &Intrinsics,
    render: &DepthRender,
) -> Result<Array2<f64>> {
    let (gw, gh) = patch_grid_dims(spec.width, spec.height, spec.patch)?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ view_index as u64);
    rng.set_stream(1);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
    let mut feats = Array2::zeros((gw * gh, d));
    let p = spec.patch as f64;
    for j in 0..gh {
        let py = nearest_pixel((j as f64 + 0.5) * p, intrinsics.height);
        for i in 0..gw {
            let px = nearest_pixel((i as f64 + 0.5) * p, intrinsics.width);
            let hit = render.hit[(py * intrinsics.width + px) as usize];
            let mut row = feats.row_mut(j * gw + i);
            match spec.feature_mode {
                FeatureMode::Random => {
                    for v in row.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
                FeatureMode::BoxOnehotPlusNoise => {
                    for v in row.iter_mut() {
                        *v = noise.sample(&mut rng);
                    }
                    if let Some(b) = hit {
                        row[b as usize % d] += 1.0;
                    }
                }
            }
        }
    }
    // features travel as f32 on disk
    feats.mapv_inplace(|v| v as f32 as f64);
    Ok(feats)
}

/// Builds a scene deterministically from its spec.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let boxes = place_boxes(spec, &mut rng)?;
    let intrinsics = Intrinsics::from_fov(spec.width, spec.height, spec.hfov);
    let cams = orbit_cameras(spec)?;
    let views = cams
        .into_par_iter()
        .enumerate()
        .map(|(vi, extrinsics)| {
            let render = render_depth(&intrinsics, &extrinsics, &boxes);
            let features = view_features(spec, vi, &intrinsics, &render)?;
            Ok(CameraView {
                intrinsics,
                extrinsics,
                depth: render.depth,
                features: Some(features),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..boxes.len() as u32).collect();
    Ok(Scene {
        scene_id: spec.scene_id(),
        patch: spec.patch,
        views,
        gt: GroundTruth { boxes, labels },
        targets: vec![0],
    })
}
