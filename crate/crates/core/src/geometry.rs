//! Pinhole camera math.
//!
//! Pixel coordinates place pixel `(u, v)` at its integer center, so the
//! principal point of a `W x H` image with a centered optical axis is
//! `((W - 1) / 2, (H - 1) / 2)`. Camera frames follow the usual vision
//! convention: x right, y down, z forward. Depth is the camera-frame z,
//! not the ray length.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// A world or camera-frame point in meters.
pub type Point3 = [f64; 3];

const RIGID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Intrinsics for a square-pixel camera with the given horizontal field
    /// of view (radians) and the principal point at the image center.
    pub fn from_fov(width: u32, height: u32, hfov: f64) -> Self {
        let f = width as f64 / (2.0 * (hfov / 2.0).tan());
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite(),
            "focal lengths must be positive and finite (fx={}, fy={})",
            self.fx,
            self.fy
        );
        ensure!(
            self.width > 0 && self.height > 0,
            "image size must be nonzero ({}x{})",
            self.width,
            self.height
        );
        ensure!(
            self.cx >= 0.0 && self.cx < self.width as f64,
            "cx={} outside [0, {})",
            self.cx,
            self.width
        );
        ensure!(
            self.cy >= 0.0 && self.cy < self.height as f64,
            "cy={} outside [0, {})",
            self.cy,
            self.height
        );
        Ok(())
    }

    /// Camera-frame point at depth `z` seen through continuous pixel `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3 {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    /// Ray direction through pixel `(u, v)` with unit z component, so the ray
    /// parameter equals depth.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Point3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    camera_to_world: Matrix4<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            camera_to_world: Matrix4::identity(),
        }
    }

    pub fn new(camera_to_world: Matrix4<f64>) -> Result<Self> {
        let ext = Self { camera_to_world };
        ext.validate()?;
        Ok(ext)
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(m)
    }

    /// Parses 16 row-major floats.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        ensure!(values.len() == 16, "camera_to_world needs 16 values, got {}", values.len());
        Self::new(Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.camera_to_world[(r, c)];
            }
        }
        out
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y
    /// points away from it).
    pub fn look_at(eye: Point3, target: Point3, up: Point3) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        ensure!(forward.norm() > 0.0, "look_at target coincides with eye");
        let forward = forward.normalize();
        let right = forward.cross(&Vector3::from(up));
        ensure!(right.norm() > 1e-9, "look_at up vector is parallel to the view direction");
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::from_rotation_translation(rotation, eye)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.camera_to_world;
        ensure!(m.iter().all(|v| v.is_finite()), "camera_to_world has non-finite entries");
        ensure!(
            m[(3, 0)] == 0.0 && m[(3, 1)] == 0.0 && m[(3, 2)] == 0.0 && m[(3, 3)] == 1.0,
            "camera_to_world last row must be (0, 0, 0, 1)"
        );
        let r = self.rotation();
        let gram = r.transpose() * r;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        ensure!(ortho_err <= RIGID_TOL, "rotation is not orthonormal (max |RᵀR - I| = {ortho_err:e})");
        let det = r.determinant();
        ensure!((det - 1.0).abs() <= RIGID_TOL, "rotation determinant {det} is not +1");
        Ok(())
    }

    /// Applies a rigid world-frame transform on the left: the camera moves
    /// with the world.
    pub fn transformed_by(&self, world_transform: &Extrinsics) -> Extrinsics {
        Extrinsics {
            camera_to_world: world_transform.camera_to_world * self.camera_to_world,
        }
    }

    #[inline]
    pub fn camera_to_world_point(&self, p: Point3) -> Point3 {
        let m = &self.camera_to_world;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)];
        }
        out
    }

    #[inline]
    pub fn camera_to_world_dir(&self, d: Point3) -> Point3 {
        let m = &self.camera_to_world;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[(r, 0)] * d[0] + m[(r, 1)] * d[1] + m[(r, 2)] * d[2];
        }
        out
    }

    pub fn world_to_camera_point(&self, p: Point3) -> Point3 {
        let r = self.rotation();
        let local = r.transpose() * (Vector3::from(p) - self.translation());
        [local.x, local.y, local.z]
    }

    pub fn origin(&self) -> Point3 {
        let h = self.camera_to_world * Vector4::new(0.0, 0.0, 0.0, 1.0);
        [h.x, h.y, h.z]
    }
}

/// Row-major metric depth, 0 meaning no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == width as usize * height as usize,
            "depth map has {} values for {}x{}",
            data.len(),
            width,
            height
        );
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, z: f32) {
        self.data[v as usize * self.width as usize + u as usize] = z;
    }
}

/// One posed pinhole view. `features`, when present, holds one row per
/// patch in `(j, i)` row-major order.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub depth: DepthMap,
    pub features: Option<Array2<f64>>,
}

impl CameraView {
    pub fn validate(&self, patch: u32) -> Result<()> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()?;
        ensure!(
            self.depth.width == self.intrinsics.width && self.depth.height == self.intrinsics.height,
            "depth map {}x{} does not match intrinsics {}x{}",
            self.depth.width,
            self.depth.height,
            self.intrinsics.width,
            self.intrinsics.height
        );
        ensure!(
            self.depth.data.iter().all(|&z| z.is_nan() || z >= 0.0),
            "depth values must be non-negative"
        );
        let (w, h) = patch_grid_dims(self.intrinsics.width, self.intrinsics.height, patch)?;
        if let Some(f) = &self.features {
            ensure!(
                f.nrows() == w * h,
                "feature grid has {} rows, expected {}x{} = {}",
                f.nrows(),
                h,
                w,
                w * h
            );
        }
        Ok(())
    }
}

/// Backprojected patch positions with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionField {
    pub positions: Vec<Point3>,
    pub valid: Vec<bool>,
}

impl PositionField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Patch grid `(w, h)` for an image split at `patch` pixels.
pub fn patch_grid_dims(width: u32, height: u32, patch: u32) -> Result<(usize, usize)> {
    ensure!(patch >= 1, "patch size must be at least 1");
    ensure!(
        width >= patch && height >= patch,
        "image {width}x{height} is smaller than one {patch}px patch"
    );
    Ok(((width / patch) as usize, (height / patch) as usize))
}

/// Nearest integer pixel to a continuous coordinate, ties toward the
/// smaller index, clamped into the image.
#[inline]
pub(crate) fn nearest_pixel(coord: f64, extent: u32) -> u32 {
    let idx = (coord - 0.5).ceil().max(0.0) as u32;
    idx.min(extent - 1)
}

/// Projects a world point to continuous pixel coordinates and depth.
/// Returns `None` for points at or behind the camera plane.
pub fn project(intrinsics: &Intrinsics, extrinsics: &Extrinsics, p: Point3) -> Option<(f64, f64, f64)> {
    let c = extrinsics.world_to_camera_point(p);
    if c[2] <= 0.0 {
        return None;
    }
    let u = intrinsics.fx * c[0] / c[2] + intrinsics.cx;
    let v = intrinsics.fy * c[1] / c[2] + intrinsics.cy;
    Some((u, v, c[2]))
}

/// World point at depth `z` along continuous pixel `(u, v)`.
#[inline]
pub fn backproject_pixel(intrinsics: &Intrinsics, extrinsics: &Extrinsics, u: f64, v: f64, z: f64) -> Point3 {
    extrinsics.camera_to_world_point(intrinsics.unproject(u, v, z))
}

/// Backprojects every patch center of `view` using the depth at the nearest
/// pixel. Output order is row-major over `(j, i)`; tokens whose depth is 0 or
/// non-finite are masked and carry a zero position.
pub fn backproject_patch_centers(view: &CameraView, patch: u32) -> Result<PositionField> {
    view.validate(patch)?;
    let intr = &view.intrinsics;
    let (w, h) = patch_grid_dims(intr.width, intr.height, patch)?;
    let mut positions = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    let p = patch as f64;
    for j in 0..h {
        let cv = (j as f64 + 0.5) * p;
        let py = nearest_pixel(cv, intr.height);
        for i in 0..w {
            let cu = (i as f64 + 0.5) * p;
            let px = nearest_pixel(cu, intr.width);
            let z = view.depth.get(px, py);
            if z > 0.0 && z.is_finite() {
                positions.push(backproject_pixel(intr, &view.extrinsics, cu, cv, z as f64));
                valid.push(true);
            } else {
                positions.push([0.0; 3]);
                valid.push(false);
            }
        }
    }
    Ok(PositionField { positions, valid })
}

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}
