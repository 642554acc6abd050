//! Scene manifests: JSON describing the views, their raw depth and feature
//! blobs (paths relative to the manifest) and the ground-truth boxes.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{encode_f32, from_json_bytes, read_bytes, read_f32_blob, to_json_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::geometry::{patch_grid_dims, CameraView, DepthMap, Extrinsics, Intrinsics, Point3};
use crate::objective::Box3D;
use crate::scenegen::{GroundTruth, Scene};

pub const SCHEMA_VERSION: &str = "voxlift/1";
pub const EXTRINSICS_CONVENTION: &str = "camera_to_world";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub width: u32,
    pub height: u32,
    pub patch: u32,
    pub intrinsics: IntrinsicsEntry,
    pub camera_to_world: Vec<f64>,
    pub depth_blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_blob: Option<String>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBoxEntry {
    pub center: Point3,
    pub size: Point3,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: String,
    pub scene_id: String,
    pub views: Vec<ViewEntry>,
    pub gt_boxes: Vec<GtBoxEntry>,
    pub extrinsics_convention: String,
    /// Indices into `gt_boxes` the scene's location token refers to.
    #[serde(default = "default_targets")]
    pub targets: Vec<usize>,
}

fn default_targets() -> Vec<usize> {
    vec![0]
}

impl SceneManifest {
    pub fn target_boxes(&self) -> Result<Vec<Box3D>> {
        self.targets
            .iter()
            .map(|&t| {
                let g = self
                    .gt_boxes
                    .get(t)
                    .ok_or_else(|| Error::invalid(format!("target {t} out of range")))?;
                Box3D::new(g.center, g.size)
            })
            .collect()
    }
}

/// Writes `dir/<scene_id>/manifest.json` with one depth and one feature
/// blob per view. Returns the manifest path.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<PathBuf> {
    let root = dir.join(&scene.scene_id);
    let mut views = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        let depth_name = format!("depth_{i:03}.bin");
        let mut bytes = Vec::with_capacity(v.depth.data.len() * 4);
        encode_f32(v.depth.data.iter().map(|&z| z as f64), &mut bytes);
        write_bytes(&root.join(&depth_name), &bytes)?;
        let (feature_blob, feature_dim) = match &v.features {
            Some(f) => {
                let name = format!("features_{i:03}.bin");
                let mut bytes = Vec::with_capacity(f.len() * 4);
                encode_f32(f.iter().copied(), &mut bytes);
                write_bytes(&root.join(&name), &bytes)?;
                (Some(name), f.ncols())
            }
            None => (None, 0),
        };
        views.push(ViewEntry {
            width: v.intrinsics.width,
            height: v.intrinsics.height,
            patch: scene.patch,
            intrinsics: IntrinsicsEntry {
                fx: v.intrinsics.fx,
                fy: v.intrinsics.fy,
                cx: v.intrinsics.cx,
                cy: v.intrinsics.cy,
            },
            camera_to_world: v.extrinsics.to_row_major().to_vec(),
            depth_blob: depth_name,
            feature_blob,
            feature_dim,
        });
    }
    let manifest = SceneManifest {
        schema_version: SCHEMA_VERSION.into(),
        scene_id: scene.scene_id.clone(),
        views,
        gt_boxes: scene
            .gt
            .boxes
            .iter()
            .zip(&scene.gt.labels)
            .map(|(b, &label)| GtBoxEntry {
                center: b.center,
                size: b.size,
                label,
            })
            .collect(),
        extrinsics_convention: EXTRINSICS_CONVENTION.into(),
        targets: scene.targets.clone(),
    };
    let path = root.join("manifest.json");
    write_bytes(&path, &to_json_bytes(&path, &manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let m: SceneManifest = from_json_bytes(path, &read_bytes(path)?)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::format(path, format!("unknown schema version {}", m.schema_version)));
    }
    if m.extrinsics_convention != EXTRINSICS_CONVENTION {
        return Err(Error::format(
            path,
            format!("unsupported extrinsics convention {}", m.extrinsics_convention),
        ));
    }
    if m.views.is_empty() {
        return Err(Error::format(path, "manifest lists no views"));
    }
    if let Some(&t) = m.targets.iter().find(|&&t| t >= m.gt_boxes.len()) {
        return Err(Error::format(path, format!("target {t} out of range")));
    }
    Ok(m)
}

/// Loads a manifest and every blob it references.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let patch = m.views[0].patch;
    let mut views = Vec::with_capacity(m.views.len());
    for (i, v) in m.views.iter().enumerate() {
        let ctx = |e: Error| match e {
            Error::InvalidArgument(msg) => Error::format(path, format!("view {i}: {msg}")),
            other => other,
        };
        if v.patch != patch {
            return Err(Error::format(path, format!("view {i} uses patch {}, view 0 uses {patch}", v.patch)));
        }
        let intrinsics = Intrinsics {
            fx: v.intrinsics.fx,
            fy: v.intrinsics.fy,
            cx: v.intrinsics.cx,
            cy: v.intrinsics.cy,
            width: v.width,
            height: v.height,
        };
        intrinsics.validate().map_err(ctx)?;
        let extrinsics = Extrinsics::from_row_major(&v.camera_to_world).map_err(ctx)?;
        let depth_path = base.join(&v.depth_blob);
        let depth: Vec<f32> = read_f32_blob(&depth_path, (v.width * v.height) as usize)?
            .into_iter()
            .map(|z| z as f32)
            .collect();
        let depth = DepthMap::new(v.width, v.height, depth).map_err(ctx)?;
        let features = match &v.feature_blob {
            Some(name) => {
                let (gw, gh) = patch_grid_dims(v.width, v.height, v.patch).map_err(ctx)?;
                let fpath = base.join(name);
                let data = read_f32_blob(&fpath, gw * gh * v.feature_dim)?;
                Some(Array2::from_shape_vec((gw * gh, v.feature_dim), data).expect("length checked"))
            }
            None => None,
        };
        let view = CameraView {
            intrinsics,
            extrinsics,
            depth,
            features,
        };
        view.validate(patch).map_err(ctx)?;
        views.push(view);
    }
    let boxes = m
        .gt_boxes
        .iter()
        .map(|g| Box3D::new(g.center, g.size))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Scene {
        scene_id: m.scene_id.clone(),
        patch,
        views,
        gt: GroundTruth {
            boxes,
            labels: m.gt_boxes.iter().map(|g| g.label).collect(),
        },
        targets: m.targets.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate, SceneSpec};

    fn small_scene() -> Scene {
        generate(&SceneSpec {
            n_views: 2,
            width: 56,
            height: 42,
            feature_dim: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene();
        let path = write_scene(dir.path(), &scene).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back.scene_id, scene.scene_id);
        assert_eq!(back.gt, scene.gt);
        for (a, b) in back.views.iter().zip(&scene.views) {
            assert_eq!(a.intrinsics, b.intrinsics);
            assert_eq!(a.extrinsics, b.extrinsics);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn missing_blob_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), &small_scene()).unwrap();
        let gone = path.parent().unwrap().join("features_001.bin");
        std::fs::remove_file(&gone).unwrap();
        match load_scene(&path) {
            Err(Error::Io { path: p, .. }) => assert_eq!(p, gone),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_blob_length_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), &small_scene()).unwrap();
        std::fs::write(path.parent().unwrap().join("depth_000.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_scene(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_schema_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), &small_scene()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("voxlift/1", "voxlift/9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));
    }
}
