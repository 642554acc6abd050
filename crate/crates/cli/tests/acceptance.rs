//! Acceptance checks for the library and the `voxlift` binary. Runs every
//! criterion, prints one PASS/FAIL line each and exits nonzero if any fail.

#[path = "../../core/tests/support/reference.rs"]
mod reference;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use voxlift::decoder::{
    cross_attention_weights, init_queries, knn_cross_attention, query_neighbors, self_attention_logits,
    self_attention_weights, DecoderConfig, DecoderWeights, LocationToken, QueryState,
};
use voxlift::geometry::{backproject_pixel, project};
use voxlift::lift::PatchSource;
use voxlift::objective::gradcheck::GradcheckOp;
use voxlift::objective::{assign_min_cost, gradcheck::gradcheck};
use voxlift::pooling::voxel_pool;
use voxlift::scenegen::{generate, SceneSpec, DEFAULT_VIEWS};
use voxlift::spatial::{covering_radius, knn_brute_force, knn_grid, voxel_key};
use voxlift::{
    diou_loss, fps, lift_views, match_boxes, pool, train_box_head, Box3D, CameraView, DepthMap, Extrinsics, Intrinsics,
    ModelWeights, Patch3DSet, Point3, PoolStrategy, TrainOptions, TrainScene, DEFAULT_TOKEN_CAP,
};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn d2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.5)])
        .collect()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> Extrinsics {
    let r = Rotation3::from_euler_angles(
        rng.random_range(-3.1..3.1),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.1..3.1),
    );
    let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..3.0));
    Extrinsics::from_rotation_translation(r.into_inner(), t).unwrap()
}

fn token_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Patch3DSet {
    let positions = random_points(rng, n);
    let features = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0));
    let source = (0..n).map(|i| PatchSource { view: 0, row: 0, col: i as u32 }).collect();
    Patch3DSet::new(features, positions, source).unwrap()
}

fn rows(a: &Array2<f64>) -> reference::Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn decoder_cfg(layers: usize, queries: usize, knn_schedule: Vec<usize>, dim: usize) -> DecoderConfig {
    DecoderConfig { layers, queries, knn_schedule, dim, ..Default::default() }
}

fn random_state(rng: &mut ChaCha8Rng, t: &Patch3DSet, c: &DecoderConfig, w: &DecoderWeights) -> QueryState {
    let mut s = init_queries(t, c, w).unwrap();
    s.values.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    s
}

// 1 ------------------------------------------------------------------------

fn geometry_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cams: Vec<(Intrinsics, Extrinsics, Vec<Point3>)> = (0..100)
        .map(|_| {
            let (w, h) = (rng.random_range(64u32..1280), rng.random_range(64u32..960));
            let f = rng.random_range(0.4..1.5) * w as f64;
            let intr = Intrinsics {
                fx: f,
                fy: f * rng.random_range(0.9..1.1),
                cx: rng.random_range(0.3..0.7) * (w - 1) as f64,
                cy: rng.random_range(0.3..0.7) * (h - 1) as f64,
                width: w,
                height: h,
            };
            let ext = random_rigid(&mut rng);
            // world points inside the frustum
            let pts = (0..1000)
                .map(|_| {
                    let u = rng.random_range(0.0..(w - 1) as f64);
                    let v = rng.random_range(0.0..(h - 1) as f64);
                    let z = rng.random_range(0.2..12.0);
                    let cam = [(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z];
                    ext.camera_to_world_point(cam)
                })
                .collect();
            (intr, ext, pts)
        })
        .collect();
    let start = Instant::now();
    let worst = single_threaded(|| {
        let mut worst: f64 = 0.0;
        for (intr, ext, pts) in &cams {
            let projected: Vec<(f64, f64, f64)> = pts.iter().map(|p| project(intr, ext, *p).unwrap()).collect();
            // depth is stored as f32, one sample per point
            let depth = DepthMap::new(pts.len() as u32, 1, projected.iter().map(|p| p.2 as f32).collect()).unwrap();
            for (i, (p, (u, v, _))) in pts.iter().zip(&projected).enumerate() {
                let z = depth.get(i as u32, 0) as f64;
                let q = backproject_pixel(intr, ext, *u, *v, z);
                worst = worst.max(d2(p, &q).sqrt());
            }
        }
        worst
    });
    let elapsed = start.elapsed();
    check!(worst < 1e-5, "max round-trip error {worst:.3e} m");
    check!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("max error {worst:.2e} m in {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

// 2 ------------------------------------------------------------------------

fn voxel_conservation() -> Outcome {
    let sizes = [0.2, 0.3, 0.4];
    let mut checked = 0usize;
    for seed in 0..50u64 {
        let spec = SceneSpec { seed: 1000 + seed, n_views: 8, width: 168, height: 168, feature_dim: 16, ..Default::default() };
        let scene = generate(&spec).unwrap();
        let w = ModelWeights::init(seed, 16, 1);
        let set = lift_views(&scene.views, scene.patch, &w.pos_mlp).unwrap();
        check!(!set.is_empty(), "scene {seed} lifted no tokens");
        let mut counts = Vec::new();
        for &s in &sizes {
            let pooled = voxel_pool(&set, s).unwrap();
            for j in 0..set.dim() {
                let before: f64 = set.features.column(j).sum();
                let after: f64 = pooled.features.column(j).iter().zip(&pooled.counts).map(|(f, &c)| f * c as f64).sum();
                let scale = set.features.column(j).iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
                check!((before - after).abs() <= 1e-6 * scale, "scene {seed} size {s} column {j}: {before} vs {after}");
            }
            // occupancy per voxel from the raw patches
            let mut occupancy: BTreeMap<_, usize> = BTreeMap::new();
            for p in &set.positions {
                *occupancy.entry(voxel_key(*p, s).unwrap()).or_default() += 1;
            }
            let mut pooled_occ: BTreeMap<_, usize> = BTreeMap::new();
            for (p, &c) in pooled.positions.iter().zip(&pooled.counts) {
                let prev = pooled_occ.insert(voxel_key(*p, s).unwrap(), c);
                check!(prev.is_none(), "scene {seed} size {s}: two tokens in one voxel");
            }
            check!(occupancy == pooled_occ, "scene {seed} size {s}: voxel membership differs");
            check!(pooled.counts.iter().sum::<usize>() == set.len(), "scene {seed}: counts do not cover every patch");
            counts.push(pooled.len());
        }
        check!(counts.windows(2).all(|w| w[0] >= w[1]), "scene {seed}: token counts {counts:?} increase");
        checked += 1;
    }
    Ok(format!("{checked} scenes, sizes {sizes:?}"))
}

// 3 ------------------------------------------------------------------------

fn greedy_oracle(points: &[Point3], count: usize, seed: usize) -> Vec<usize> {
    let mut sel = vec![seed];
    while sel.len() < count {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        sel.push(best);
    }
    sel
}

fn exhaustive_k_center(points: &[Point3], n: usize) -> f64 {
    let m = points.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let kept: Vec<Point3> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| points[i]).collect();
        best = best.min(covering_radius(points, &kept).unwrap());
    }
    best
}

fn fps_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..200 {
        let m = rng.random_range(1..=512);
        let n = rng.random_range(1..=m.min(64));
        let seed = rng.random_range(0..m);
        let pts = random_points(&mut rng, m);
        let got = fps(&pts, n, seed).unwrap();
        check!(got == greedy_oracle(&pts, n, seed), "instance {inst} (m={m}, n={n}) differs from the greedy oracle");
    }
    let mut worst: f64 = 0.0;
    for inst in 0..200 {
        let m = rng.random_range(1..=12);
        let n = rng.random_range(1..=m.min(3));
        let pts = random_points(&mut rng, m);
        let kept: Vec<Point3> = fps(&pts, n, 0).unwrap().iter().map(|&i| pts[i]).collect();
        let r = covering_radius(&pts, &kept).unwrap();
        let opt = exhaustive_k_center(&pts, n);
        check!(r <= 2.0 * opt + 1e-12, "small instance {inst}: radius {r} vs optimum {opt}");
        if opt > 0.0 {
            worst = worst.max(r / opt);
        }
    }
    Ok(format!("200 oracle instances, 200 k-center instances, worst ratio {worst:.3}"))
}

// 4 ------------------------------------------------------------------------

fn knn_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for config in 0..50 {
        let m = rng.random_range(1..=120);
        let n = rng.random_range(1..=16);
        let dim = [4, 8, 16][config % 3];
        let k = m + rng.random_range(0..8);
        let t = token_set(&mut rng, m, dim);
        let c = decoder_cfg(1, n, vec![k], dim);
        let w = DecoderWeights::init(&mut rng, 1, dim);
        let s = random_state(&mut rng, &t, &c, &w);
        let nbrs = query_neighbors(&s, &t, k).unwrap();
        let got = knn_cross_attention(&s, &t, &nbrs, k, &w.layers[0]).unwrap();
        let all: Vec<usize> = (0..m).collect();
        let feats = rows(&t.features);
        let layer = &w.layers[0];
        for i in 0..s.len() {
            let a = reference::cross_weights(&s.values.row(i).to_vec(), &s.pos_enc.row(i).to_vec(), &s.positions[i], &feats, &t.positions, &all, layer);
            let mut agg = vec![0.0; dim];
            for j in 0..m {
                let v = reference::vecmat(&feats[j], &layer.cross.value);
                for (x, y) in agg.iter_mut().zip(&v) {
                    *x += a[j] * y;
                }
            }
            let delta = reference::vecmat(&agg, &layer.cross.out);
            for k in 0..dim {
                worst = worst.max((got[(i, k)] - s.values[(i, k)] - delta[k]).abs());
            }
        }
    }
    check!(worst < 1e-6, "k >= m attention differs from dense by {worst:.3e}");
    for config in 0..50 {
        let m = rng.random_range(1..=400);
        // half the configurations sit on a lattice so distance ties are common
        let pts: Vec<Point3> = if config % 2 == 0 {
            random_points(&mut rng, m)
        } else {
            (0..m)
                .map(|_| [rng.random_range(-4..4) as f64 * 0.25, rng.random_range(-4..4) as f64 * 0.25, rng.random_range(0..3) as f64 * 0.25])
                .collect()
        };
        let qs = random_points(&mut rng, 30);
        let k = rng.random_range(1..=m.min(64));
        let g = knn_grid(&qs, &pts, k).unwrap();
        let b = knn_brute_force(&qs, &pts, k).unwrap();
        check!(g.indices == b.indices && g.distances == b.distances, "config {config}: grid and brute force differ");
    }
    Ok(format!("dense max diff {worst:.2e}; grid = brute on 50 configs"))
}

// 5 ------------------------------------------------------------------------

fn attention_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sigma_diff, mut loc_diff, mut row_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for config in 0..50 {
        let dim = [4, 6, 8][config % 3];
        let m = rng.random_range(2..=80);
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=24);
        let t = token_set(&mut rng, m, dim);
        let c = decoder_cfg(1, n, vec![k], dim);
        let mut w = DecoderWeights::init(&mut rng, 1, dim);
        let s = random_state(&mut rng, &t, &c, &w);
        let loc: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tok = LocationToken::new(loc.clone()).unwrap();
        let nn = s.len();

        // rows of every attention matrix sum to one
        w.layers[0].sigma_b = rng.random_range(-2.0..3.0);
        let nbrs = query_neighbors(&s, &t, k).unwrap();
        for (_, a) in cross_attention_weights(&s, &t, &nbrs, k, &w.layers[0]).unwrap() {
            row_err = row_err.max((a.iter().sum::<f64>() - 1.0).abs());
        }
        for r in self_attention_weights(&s, &tok, &w.layers[0]).unwrap().rows() {
            row_err = row_err.max((r.sum() - 1.0).abs());
        }

        // plain scaled dot products over queries plus the location token
        let mut seq: reference::Mat = (0..nn).map(|i| (0..dim).map(|j| s.values[(i, j)] + s.pos_enc[(i, j)]).collect()).collect();
        seq.push(loc.clone());
        let qk: reference::Mat = seq
            .iter()
            .map(|x| {
                let q = reference::vecmat(x, &w.layers[0].self_attn.query);
                seq.iter().map(|y| reference::dot(&q, &reference::vecmat(y, &w.layers[0].self_attn.key)) / (dim as f64).sqrt()).collect()
            })
            .collect();

        // the location token's row and column carry no distance term
        let logits = self_attention_logits(&s, &tok, &w.layers[0]).unwrap();
        for i in 0..=nn {
            loc_diff = loc_diff.max((logits[(nn, i)] - qk[nn][i]).abs()).max((logits[(i, nn)] - qk[i][nn]).abs());
        }
        check!(nn < 2 || logits[(0, 1)] < qk[0][1], "config {config}: query pairs carry no distance penalty");

        // sigma -> 0
        w.layers[0].sigma_w.fill(0.0);
        w.layers[0].sigma_b = -60.0;
        let a = self_attention_weights(&s, &tok, &w.layers[0]).unwrap();
        for i in 0..=nn {
            for (j, p) in reference::softmax(&qk[i]).iter().enumerate() {
                sigma_diff = sigma_diff.max((a[(i, j)] - p).abs());
            }
        }
    }
    check!(sigma_diff < 1e-6, "sigma -> 0 differs from standard attention by {sigma_diff:.3e}");
    check!(loc_diff < 1e-9, "location token logits carry a bias of {loc_diff:.3e}");
    check!(row_err < 1e-6, "attention rows deviate from 1 by {row_err:.3e}");
    Ok(format!("sigma->0 {sigma_diff:.1e}, loc bias {loc_diff:.1e}, row sums {row_err:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn objective_gradients() -> Outcome {
    let mut parts = Vec::new();
    for (op, tol) in [(GradcheckOp::Diou, 1e-4), (GradcheckOp::Infonce, 1e-4), (GradcheckOp::Boxhead, 1e-3)] {
        let r = gradcheck(op, 100, tol, 0).map_err(|e| e.to_string())?;
        check!(r.trials == 100, "{op:?} ran {} trials", r.trials);
        check!(r.pass && r.max_rel_error < tol, "{op:?} max relative error {:.3e} (trial {})", r.max_rel_error, r.worst_trial);
        parts.push(format!("{op:?} {:.1e}", r.max_rel_error));
    }
    Ok(parts.join(", "))
}

// 7 ------------------------------------------------------------------------

fn exhaustive_assignment(cost: &Array2<f64>) -> f64 {
    let (r, c) = cost.dim();
    let transposed = r > c;
    let (small, large) = if transposed { (c, r) } else { (r, c) };
    let at = |i: usize, j: usize| if transposed { cost[(j, i)] } else { cost[(i, j)] };
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..large).collect();
    // Heap's algorithm over every ordering of the larger side
    let mut stack = vec![0usize; large];
    let eval = |perm: &[usize]| (0..small).map(|i| at(i, perm[i])).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < large {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(eval(&perm));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

fn matching_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for inst in 0..200 {
        let q = rng.random_range(1..=7);
        let g = rng.random_range(1..=7);
        let cost = if inst % 2 == 0 {
            // coarse integer costs so ties are frequent
            Array2::from_shape_simple_fn((q, g), || if rng.random_bool(0.5) { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..5.0) })
        } else {
            let boxes = |rng: &mut ChaCha8Rng, n| -> Vec<Box3D> {
                (0..n)
                    .map(|_| Box3D::new(random_points(rng, 1)[0], [rng.random_range(0.2..1.5), rng.random_range(0.2..1.5), rng.random_range(0.2..1.5)]).unwrap())
                    .collect()
            };
            let (preds, gts) = (boxes(&mut rng, q), boxes(&mut rng, g));
            let a = match_boxes(&preds, &gts).map_err(|e| e.to_string())?;
            let cost = Array2::from_shape_fn((q, g), |(i, j)| diou_loss(&preds[i], &gts[j]).0);
            let got: f64 = a.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
            let want = exhaustive_assignment(&cost);
            check!((got - want).abs() <= 1e-9, "box instance {inst}: {got} vs exhaustive {want}");
            cost
        };
        let a = assign_min_cost(&cost).map_err(|e| e.to_string())?;
        let want = exhaustive_assignment(&cost);
        check!(a.pairs.len() == q.min(g), "instance {inst}: {} pairs for {q}x{g}", a.pairs.len());
        let got: f64 = a.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
        check!((got - want).abs() <= 1e-9, "instance {inst}: {got} vs exhaustive {want}");
    }
    Ok("200 instances up to 7x7".into())
}

// 8 ------------------------------------------------------------------------

fn trainability() -> Outcome {
    let dim = 64;
    let cfg = decoder_cfg(2, 64, vec![16, 32], dim);
    let weights = ModelWeights::init(0, dim, 2);
    let scenes: Vec<TrainScene> = (0..8u64)
        .map(|seed| {
            let scene = generate(&SceneSpec { seed, feature_dim: dim, ..Default::default() }).unwrap();
            let patches = lift_views(&scene.views, scene.patch, &weights.pos_mlp).unwrap();
            TrainScene {
                tokens: pool(&patches, PoolStrategy::VoxelCapped { voxel_size: 0.2, cap: DEFAULT_TOKEN_CAP, seed: 0 }).unwrap(),
                loc: scene.location_token(dim),
                gt: scene.gt.boxes.clone(),
                targets: scene.targets.clone(),
            }
        })
        .collect();
    let opts = TrainOptions { steps: 500, lr: 0.02, momentum: 0.95, ..Default::default() };
    let start = Instant::now();
    let report = single_threaded(|| train_box_head(&scenes, &cfg, &weights.decoder, &opts)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let first = report.losses[0].diou_loss;
    let last = report.losses.last().unwrap().diou_loss;
    check!(report.losses.len() == 500, "{} steps recorded", report.losses.len());
    check!(last < 0.5 * first, "loss {first:.4} -> {last:.4}");
    check!(elapsed < Duration::from_secs(60), "training took {elapsed:?}");
    Ok(format!("DIoU loss {first:.4} -> {last:.4} ({:.0}%) in {:.1} s", 100.0 * last / first, elapsed.as_secs_f64()))
}

// 9 ------------------------------------------------------------------------

fn token_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 8;
    let mlp = ModelWeights::init(0, dim, 1).pos_mlp;
    let intr = Intrinsics::from_fov(336, 336, 70f64.to_radians());
    let mut got = Vec::new();
    for (views, want) in [(16, 9216), (20, 11520), (24, 13824), (40, 23040)] {
        let list: Vec<CameraView> = (0..views)
            .map(|_| {
                let depth = DepthMap::new(336, 336, (0..336 * 336).map(|_| rng.random_range(0.5f32..6.0)).collect()).unwrap();
                CameraView {
                    intrinsics: intr,
                    extrinsics: random_rigid(&mut rng),
                    depth,
                    features: Some(Array2::from_shape_simple_fn((576, dim), || rng.random_range(-1.0..1.0))),
                }
            })
            .collect();
        let set = lift_views(&list, 14, &mlp).map_err(|e| e.to_string())?;
        check!(set.len() == want, "{views} views gave {} tokens, expected {want}", set.len());
        got.push(set.len());
    }
    let d = DecoderConfig::default();
    check!(d.layers == 4 && d.queries == 512, "decoder defaults L={} N={}", d.layers, d.queries);
    check!(d.knn_schedule == vec![16, 32, 64, 128], "k schedule {:?}", d.knn_schedule);
    check!(DEFAULT_VIEWS == 32 && SceneSpec::default().n_views == 32, "default view count");
    check!(DEFAULT_TOKEN_CAP == 3096, "token cap {DEFAULT_TOKEN_CAP}");

    // the pool command applies the cap by default
    let dir = tempfile::tempdir().unwrap();
    let n = 5000;
    let spread: Vec<Point3> = (0..n).map(|i| [(i % 50) as f64 * 0.5, (i / 50) as f64 * 0.5, 0.1]).collect();
    let set = Patch3DSet::new(
        Array2::from_shape_fn((n, 4), |(i, j)| (i + j) as f64),
        spread,
        (0..n).map(|i| PatchSource { view: 0, row: 0, col: i as u32 }).collect(),
    )
    .unwrap();
    let input = dir.path().join("patches.bin");
    voxlift::formats::write_patches(&input, &set).unwrap();
    let out = run_cli(dir.path(), &["pool", "--in", "patches.bin", "--strategy", "voxel", "--out", "pooled.bin"], None);
    check!(out.code == 0, "pool failed: {}", out.stderr);
    let v: Value = serde_json::from_str(out.stdout.trim()).map_err(|e| e.to_string())?;
    check!(v["tokens"] == json!(3096) && v["input_tokens"] == json!(n), "pool printed {v}");
    Ok(format!("tokens {got:?}; defaults V=32 N=512 L=4 k=16..128 cap 3096"))
}

// CLI helpers ----------------------------------------------------------------

struct CliRun {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_cli(cwd: &Path, args: &[&str], threads: Option<usize>) -> CliRun {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_voxlift"));
    cmd.current_dir(cwd).env_remove("VOXLIFT_THREADS");
    if let Some(t) = threads {
        cmd.arg("--threads").arg(t.to_string());
    }
    let out = cmd.args(args).output().expect("spawn voxlift");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Drops wall-clock measurements, which no run can reproduce.
fn strip_timings(v: &mut Value) {
    if let Value::Object(map) = v {
        map.remove("mean_ms");
        map.remove("runs_ms");
        map.values_mut().for_each(strip_timings);
    }
}

// 10 -----------------------------------------------------------------------

const SMALL_CONFIG: &str = r#"{"decoder": {"layers": 2, "queries": 64, "knn_schedule": [8, 16], "dim": 64}, "seed": 0}"#;

fn pipeline_commands() -> Vec<Vec<&'static str>> {
    let m = "scenes/scene_000003/manifest.json";
    vec![
        vec!["synth", "--scenes", "2", "--seed", "3", "--views", "8", "--width", "168", "--height", "168", "--out", "scenes"],
        vec!["init-weights", "--seed", "1", "--dim", "64", "--layers", "2", "--out", "w.bin"],
        vec!["lift", "--scene", m, "--weights", "w.bin", "--out", "patches.bin"],
        vec!["pool", "--in", "patches.bin", "--strategy", "voxel", "--voxel-size", "0.1", "--cap", "200", "--out", "voxel.bin"],
        vec!["pool", "--in", "patches.bin", "--strategy", "fps", "--count", "100", "--seed", "2", "--out", "fps.bin"],
        vec!["ground", "--scene", m, "--config", "cfg.json", "--weights", "w.bin", "--loc", "scenes/scene_000003/loc.bin", "--out", "pred.json"],
        vec!["eval", "--pred", "pred.json", "--gt", m, "--csv", "eval.csv"],
        vec!["gradcheck", "--op", "diou", "--trials", "20"],
        vec!["gradcheck", "--op", "infonce", "--trials", "20"],
        vec!["gradcheck", "--op", "boxhead", "--trials", "4", "--tol", "1e-3"],
        vec!["train-boxhead", "--scenes", "scenes", "--steps", "20", "--config", "cfg.json", "--weights", "w.bin", "--out", "train.csv", "--save-weights", "trained.bin"],
        vec!["bench", "--views", "4", "--patches-per-view", "64", "--repeat", "1", "--config", "cfg.json"],
    ]
}

fn run_pipeline(threads: usize) -> Result<(Vec<String>, BTreeMap<PathBuf, Vec<u8>>), String> {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    let mut outputs = Vec::new();
    for args in pipeline_commands() {
        let r = run_cli(dir.path(), &args, Some(threads));
        check!(r.code == 0, "`{}` exited {}: {}", args.join(" "), r.code, r.stderr.trim());
        let stdout = if args[0] == "bench" {
            let mut v: Value = serde_json::from_str(r.stdout.trim()).map_err(|e| e.to_string())?;
            strip_timings(&mut v);
            v.to_string()
        } else {
            r.stdout
        };
        outputs.push(format!("{}\n{}", args.join(" "), stdout));
    }
    Ok((outputs, tree(dir.path())))
}

fn cli_determinism() -> Outcome {
    let a = run_pipeline(1)?;
    let b = run_pipeline(1)?;
    let c = run_pipeline(8)?;
    for (label, other) in [("second run", &b), ("--threads 8", &c)] {
        for (x, y) in a.0.iter().zip(&other.0) {
            check!(x == y, "stdout differs on {label}:\n{x}\nvs\n{y}");
        }
        check!(a.1.keys().eq(other.1.keys()), "{label} wrote a different set of files");
        for (path, bytes) in &a.1 {
            check!(other.1[path] == *bytes, "{} differs on {label}", path.display());
        }
    }
    Ok(format!("{} commands, {} output files identical across runs and thread counts", a.0.len(), a.1.len()))
}

// 11 -----------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = "scenes/scene_000000/manifest.json";
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--scenes", "1", "--seed", "0", "--out", "scenes"],
        vec!["init-weights", "--seed", "0", "--dim", "64", "--out", "w.bin"],
        vec!["lift", "--scene", m, "--weights", "w.bin", "--out", "patches.bin"],
        vec!["pool", "--in", "patches.bin", "--strategy", "voxel", "--out", "pooled.bin"],
        vec!["ground", "--scene", m, "--weights", "w.bin", "--loc", "scenes/scene_000000/loc.bin", "--out", "pred.json"],
        vec!["eval", "--pred", "pred.json", "--gt", m],
    ];
    let start = Instant::now();
    let mut stdout = Vec::new();
    for args in &steps {
        let r = run_cli(dir.path(), args, Some(1));
        check!(r.code == 0, "`{}` exited {}: {}", args.join(" "), r.code, r.stderr.trim());
        stdout.push(r.stdout);
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(10), "pipeline took {elapsed:?}");
    let synth: Value = serde_json::from_str(stdout[0].trim()).map_err(|e| e.to_string())?;
    check!(synth["views"] == json!(32), "synth wrote {} views", synth["views"]);

    // a prediction equal to the target box
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join(m)).unwrap()).unwrap();
    let target = manifest["targets"][0].as_u64().unwrap() as usize;
    let gt = &manifest["gt_boxes"][target];
    let pred = json!({
        "scene_id": manifest["scene_id"],
        "scores": [1.0],
        "boxes": [{"center": gt["center"], "size": gt["size"]}],
        "selected": [0],
    });
    std::fs::write(dir.path().join("oracle.json"), pred.to_string()).unwrap();
    let r = run_cli(dir.path(), &["eval", "--pred", "oracle.json", "--gt", m, "--iou", "0.25,0.5"], Some(1));
    check!(r.code == 0, "eval exited {}: {}", r.code, r.stderr.trim());
    let report: Value = serde_json::from_str(r.stdout.trim()).map_err(|e| e.to_string())?;
    let acc = &report["acc_at"];
    check!(acc["0.25"] == json!(1.0) && acc["0.5"] == json!(1.0), "oracle accuracy {acc}");
    Ok(format!("pipeline {:.2} s single-threaded; oracle Acc@0.25 = Acc@0.5 = 1.0", elapsed.as_secs_f64()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("geometry round trip", geometry_round_trip),
        ("voxel pooling conservation and partition", voxel_conservation),
        ("fps exactness", fps_exactness),
        ("knn attention equivalence", knn_equivalence),
        ("distance-adaptive attention reductions", attention_reductions),
        ("objective gradients", objective_gradients),
        ("matching optimality", matching_optimality),
        ("trainability", trainability),
        ("token accounting and defaults", token_accounting),
        ("cli determinism", cli_determinism),
        ("end-to-end sanity", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {e} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
