//! Lifting 2D patch features into 3D patches.
//!
//! Each valid patch gets its backprojected world position encoded by a
//! two-layer MLP; the embedding is added to the (already projected) patch
//! feature. The same MLP encodes standalone coordinate tokens.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{backproject_patch_centers, CameraView, Point3};
use crate::nn::MlpWeights;

/// Where a lifted token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub view: u32,
    pub row: u32,
    pub col: u32,
}

/// The lifted scene: one row per valid patch across all views.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch3DSet {
    pub features: Array2<f64>,
    pub positions: Vec<Point3>,
    pub source: Vec<PatchSource>,
}

impl Patch3DSet {
    pub fn new(features: Array2<f64>, positions: Vec<Point3>, source: Vec<PatchSource>) -> Result<Self> {
        let set = Self {
            features,
            positions,
            source,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.features.nrows() == self.positions.len() && self.source.len() == self.positions.len(),
            "patch set rows disagree: {} features, {} positions, {} sources",
            self.features.nrows(),
            self.positions.len(),
            self.source.len()
        );
        ensure!(self.features.iter().all(|v| v.is_finite()), "patch features must be finite");
        ensure!(
            self.positions.iter().flatten().all(|v| v.is_finite()),
            "patch positions must be finite"
        );
        Ok(())
    }
}

/// Standalone coordinate token sharing the patch position encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateToken {
    pub embedding: Vec<f64>,
    pub coordinate: Point3,
}

/// Encodes positions row-wise through the position MLP.
pub fn pos_encode(mlp: &MlpWeights, positions: &[Point3]) -> Result<Array2<f64>> {
    ensure!(mlp.d_in() == 3, "position encoder must take 3 inputs, has {}", mlp.d_in());
    mlp.validate()?;
    let rows: Vec<Vec<f64>> = positions.par_iter().map(|p| mlp.forward_row(p)).collect();
    Ok(crate::nn::rows_to_array(rows, mlp.d_out()))
}

/// Elementwise sum of patch features and their position embeddings.
pub fn make_3d_patches(features: ArrayView2<'_, f64>, pos_embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    ensure!(
        features.dim() == pos_embeddings.dim(),
        "features {:?} and position embeddings {:?} differ in shape",
        features.dim(),
        pos_embeddings.dim()
    );
    Ok(&features + &pos_embeddings)
}

pub fn encode_coordinate_token(mlp: &MlpWeights, xyz: Point3) -> Result<CoordinateToken> {
    ensure!(xyz.iter().all(|v| v.is_finite()), "coordinate {xyz:?} is not finite");
    let emb = pos_encode(mlp, &[xyz])?;
    Ok(CoordinateToken {
        embedding: emb.row(0).to_vec(),
        coordinate: xyz,
    })
}

/// Backprojects, masks and encodes every view, concatenating valid tokens in
/// `(view, j, i)` order.
pub fn lift_views(views: &[CameraView], patch: u32, mlp: &MlpWeights) -> Result<Patch3DSet> {
    ensure!(!views.is_empty(), "no views to lift");
    let per_view: Vec<Result<(Array2<f64>, Vec<Point3>, Vec<PatchSource>)>> = views
        .par_iter()
        .enumerate()
        .map(|(vi, view)| lift_one(vi, view, patch, mlp))
        .collect();
    let mut feats = Vec::new();
    let mut positions = Vec::new();
    let mut source = Vec::new();
    let mut dim = None;
    for r in per_view {
        let (f, p, s) = r?;
        match dim {
            None => dim = Some(f.ncols()),
            Some(d) => ensure!(d == f.ncols(), "views disagree on feature dimension"),
        }
        feats.extend(f.iter().copied());
        positions.extend(p);
        source.extend(s);
    }
    let d = dim.unwrap_or(mlp.d_out());
    let features = Array2::from_shape_vec((positions.len(), d), feats).map_err(|e| Error::invalid(e.to_string()))?;
    Patch3DSet::new(features, positions, source)
}

fn lift_one(
    vi: usize,
    view: &CameraView,
    patch: u32,
    mlp: &MlpWeights,
) -> Result<(Array2<f64>, Vec<Point3>, Vec<PatchSource>)> {
    let features = view
        .features
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("view {vi} has no feature grid")))?;
    ensure!(
        features.ncols() == mlp.d_out(),
        "view {vi} features have dimension {}, position encoder produces {}",
        features.ncols(),
        mlp.d_out()
    );
    let field = backproject_patch_centers(view, patch)?;
    let grid_w = (view.intrinsics.width / patch) as usize;
    let keep: Vec<usize> = (0..field.len()).filter(|&t| field.valid[t]).collect();
    let positions: Vec<Point3> = keep.iter().map(|&t| field.positions[t]).collect();
    let source = keep
        .iter()
        .map(|&t| PatchSource {
            view: vi as u32,
            row: (t / grid_w) as u32,
            col: (t % grid_w) as u32,
        })
        .collect();
    let selected = features.select(ndarray::Axis(0), &keep);
    let emb = pos_encode(mlp, &positions)?;
    let lifted = make_3d_patches(selected.view(), emb.view())?;
    Ok((lifted, positions, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let mlp = MlpWeights::zeros(3, 8, 8);
        let emb = pos_encode(&mlp, &[[1.0, -2.0, 3.0], [100.0, 0.0, -7.0]]).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
        let tok = encode_coordinate_token(&mlp, [0.5, -0.5, 2.0]).unwrap();
        assert!(tok.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_composition_on_positive_coords() {
        let eye = Array2::eye(3);
        let mlp = MlpWeights::new(eye.clone(), Array1::zeros(3), eye, Array1::zeros(3), Activation::Relu).unwrap();
        let emb = pos_encode(&mlp, &[[0.25, 1.5, 3.0]]).unwrap();
        assert_eq!(emb.row(0).to_vec(), vec![0.25, 1.5, 3.0]);
    }

    #[test]
    fn additive_identity_and_inverse() {
        let f = array![[1.0, -2.0], [0.5, 3.25]];
        assert_eq!(make_3d_patches(f.view(), Array2::zeros((2, 2)).view()).unwrap(), f);
        let neg = -&f;
        assert!(make_3d_patches(f.view(), neg.view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(make_3d_patches(f.view(), Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn coordinate_token_matches_patch_encoding_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpWeights::init(&mut rng, 3, 16, 16);
        let p = [0.5, -0.5, 2.0];
        let tok = encode_coordinate_token(&mlp, p).unwrap();
        let many = pos_encode(&mlp, &[[9.0, 9.0, 9.0], p]).unwrap();
        assert_eq!(tok.embedding, many.row(1).to_vec());
        assert!(encode_coordinate_token(&mlp, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn encoder_must_take_three_inputs() {
        let mlp = MlpWeights::zeros(4, 8, 8);
        assert!(pos_encode(&mlp, &[[0.0; 3]]).is_err());
    }
}
