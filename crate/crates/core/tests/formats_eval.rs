use ndarray::Array2;
use voxlift::formats::{
    load_scene, read_location_token, read_patches, read_pooled, read_weights, write_location_token, write_patches,
    write_pooled, write_scene, write_weights,
};
use voxlift::lift::PatchSource;
use voxlift::scenegen::{generate, SceneSpec};
use voxlift::{acc_at_iou, pool, Box3D, LocationToken, ModelWeights, Patch3DSet, PoolStrategy};

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, n_views: 3, width: 56, height: 42, feature_dim: 8, ..Default::default() }
}

#[test]
fn scene_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(&small_spec(2)).unwrap();
    let path = write_scene(dir.path(), &scene).unwrap();
    let back = load_scene(&path).unwrap();
    assert_eq!(back.scene_id, scene.scene_id);
    assert_eq!(back.gt.boxes, scene.gt.boxes);
    assert_eq!(back.views.len(), 3);
    for (a, b) in back.views.iter().zip(&scene.views) {
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.features, b.features);
        for r in 0..4 {
            for c in 0..4 {
                let (x, y) = (a.extrinsics.matrix()[(r, c)], b.extrinsics.matrix()[(r, c)]);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    // writing the loaded scene again reproduces the same bytes
    let dir2 = tempfile::tempdir().unwrap();
    let path2 = write_scene(dir2.path(), &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn missing_blob_is_reported_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(&small_spec(3)).unwrap();
    let path = write_scene(dir.path(), &scene).unwrap();
    let blob = path.parent().unwrap().join("depth_001.bin");
    std::fs::remove_file(&blob).unwrap();
    let err = load_scene(&path).unwrap_err().to_string();
    assert!(err.contains("depth_001.bin"), "{err}");
}

#[test]
fn tensors_and_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let n = 17;
    let features = Array2::from_shape_fn((n, 4), |(i, j)| (i as f32 * 0.25 - j as f32) as f64);
    let positions = (0..n).map(|i| [i as f64 * 0.5, -(i as f64), 0.125]).collect();
    let source = (0..n).map(|i| PatchSource { view: i as u32 % 3, row: 1, col: i as u32 }).collect();
    let set = Patch3DSet::new(features, positions, source).unwrap();
    let p = dir.path().join("a/patches.bin");
    write_patches(&p, &set).unwrap();
    assert_eq!(read_patches(&p).unwrap(), set);

    let pooled = pool(&set, PoolStrategy::Voxel { voxel_size: 1.0 }).unwrap();
    let q = dir.path().join("pooled.bin");
    write_pooled(&q, &pooled).unwrap();
    let back = read_pooled(&q).unwrap();
    assert_eq!(back.counts, pooled.counts);
    assert_eq!(back.strategy, pooled.strategy);

    let loc = LocationToken::new(vec![1.0, 0.0, -0.5, 2.0]).unwrap();
    let l = dir.path().join("loc.bin");
    write_location_token(&l, &loc).unwrap();
    assert_eq!(read_location_token(&l).unwrap(), loc);

    let w = ModelWeights::init(7, 8, 2);
    let wp = dir.path().join("w.bin");
    write_weights(&wp, &w).unwrap();
    let wb = read_weights(&wp).unwrap();
    assert_eq!(wb, w);
    assert_eq!(&std::fs::read(&wp).unwrap()[..8], b"VXLWGT01");
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.bin");
    write_weights(&wp, &ModelWeights::init(1, 4, 1)).unwrap();
    let bytes = std::fs::read(&wp).unwrap();
    std::fs::write(&wp, &bytes[..bytes.len() - 4]).unwrap();
    assert!(read_weights(&wp).is_err());
}

#[test]
fn accuracy_counts_threshold_hits() {
    let gt = Box3D::new([0.0; 3], [1.0; 3]).unwrap();
    // shifted by a quarter: IoU = 0.75 / 1.25 = 0.6
    let near = gt.translated([0.25, 0.0, 0.0]);
    // shifted by 0.6: IoU = 0.4 / 1.6 = 0.25
    let far = gt.translated([0.6, 0.0, 0.0]);
    let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let preds = vec![vec![gt], vec![near], vec![far], vec![]];
    let gts = vec![vec![gt]; 4];
    let r = acc_at_iou(&ids, &preds, &gts, &[0.25, 0.5]).unwrap();
    assert_eq!(r.accuracy(0.25), Some(0.75));
    assert_eq!(r.accuracy(0.5), Some(0.5));
    assert_eq!(r.per_scene[2].hits, vec![1.0, 0.0]);
    assert_eq!(r.per_scene[3].best_iou, 0.0);
}
