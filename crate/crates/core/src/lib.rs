//! Multi-view RGB-D patch lifting, 3D token pooling and a k-NN attention
//! decoder that grounds a location token to 3D boxes.
//!
//! The pipeline: [`lift_views`] backprojects per-view patch features into
//! world space and adds a learned position encoding, [`pool`] compresses
//! the resulting tokens, and [`grounding_forward`] decodes boxes and picks
//! the queries matching the location token.

pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod geometry;
pub mod lift;
pub mod nn;
pub mod objective;
pub mod pooling;
pub mod scenegen;
pub mod spatial;

pub use decoder::{
    grounding_forward, run_decoder, DecoderConfig, DecoderWeights, GroundingOutput, LocationToken, SelectionMode,
};
pub use error::{Error, Result};
pub use evalkit::{acc_at_iou, pooling_ablation, EvalReport};
pub use formats::ModelWeights;
pub use geometry::{backproject_patch_centers, CameraView, DepthMap, Extrinsics, Intrinsics, Point3};
pub use lift::{lift_views, pos_encode, Patch3DSet};
pub use nn::{Activation, MlpWeights};
pub use objective::{diou_loss, info_nce, iou3d, match_boxes, train_box_head, Box3D, TrainOptions, TrainScene};
pub use pooling::{pool, PoolStrategy, PooledTokens, DEFAULT_TOKEN_CAP};
pub use scenegen::{generate, Scene, SceneSpec};
pub use spatial::{fps, knn};
