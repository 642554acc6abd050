mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use voxlift::formats::{
    load_scene, read_location_token, read_manifest, read_patches, read_weights, write_location_token,
    write_patches, write_pooled, write_scene, write_weights,
};
use voxlift::objective::gradcheck::{gradcheck, GradcheckOp};
use voxlift::scenegen::FeatureMode;
use voxlift::{
    acc_at_iou, generate, grounding_forward, lift_views, pool, train_box_head, Box3D, ModelWeights, PoolStrategy,
    Scene, SceneSpec, TrainScene, DEFAULT_TOKEN_CAP,
};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "voxlift", version, about = "Lift RGB-D patches to 3D, pool them and ground boxes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VOXLIFT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes (manifest, depth and feature blobs, location token).
    Synth(SynthArgs),
    /// Write freshly initialized weights.
    InitWeights(InitWeightsArgs),
    /// Backproject patch features of a scene into 3D tokens.
    Lift(LiftArgs),
    /// Pool 3D tokens by voxel or farthest point sampling.
    Pool(PoolArgs),
    /// Lift, pool and decode a scene, writing boxes and scores as JSON.
    Ground(GroundArgs),
    /// Accuracy at IoU thresholds of grounding outputs against manifests.
    Eval(EvalArgs),
    /// Compare analytic gradients to finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the box head on a directory of scenes and write the loss curve.
    TrainBoxhead(TrainArgs),
    /// Time the lift, pool and decode stages.
    Bench(BenchArgs),
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    boxes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 336)]
    width: u32,
    #[arg(long, default_value_t = 336)]
    height: u32,
    #[arg(long, default_value_t = 14)]
    patch: u32,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, value_enum, default_value_t = FeatureArg::BoxOnehotPlusNoise)]
    feature_mode: FeatureArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeatureArg {
    Random,
    BoxOnehotPlusNoise,
}

#[derive(Debug, clap::Args)]
struct InitWeightsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct LiftArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Voxel,
    Fps,
}

#[derive(Debug, clap::Args)]
struct PoolArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0.2)]
    voxel_size: f64,
    #[arg(long)]
    count: Option<usize>,
    /// Token cap applied after voxel pooling.
    #[arg(long, default_value_t = DEFAULT_TOKEN_CAP)]
    cap: usize,
    /// FPS seed index.
    #[arg(long, default_value_t = 0)]
    seed: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct GroundArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    loc: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Grounding outputs, one per scene (comma separated or repeated).
    #[arg(long, value_delimiter = ',', required = true)]
    pred: Vec<PathBuf>,
    /// Scene manifests aligned with `--pred`.
    #[arg(long, value_delimiter = ',', required = true)]
    gt: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5])]
    iou: Vec<f64>,
    /// Also write the per-scene CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OpArg {
    Diou,
    Infonce,
    Boxhead,
}

#[derive(Debug, clap::Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    op: OpArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Directory whose subdirectories hold scene manifests.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    /// Heavy-ball coefficient in [0, 1); 0 is plain gradient descent.
    #[arg(long, default_value_t = 0.95)]
    momentum: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting weights; initialized from the config seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// CSV destination (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained weights here.
    #[arg(long)]
    save_weights: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    views: usize,
    #[arg(long, default_value_t = 576)]
    patches_per_view: usize,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            error: anyhow!("{msg}"),
        }
    }

    fn numeric(error: anyhow::Error) -> Self {
        Self { code: 4, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<voxlift::Error>() {
            Some(voxlift::Error::Divergence { .. }) => 4,
            _ => 3,
        };
        Self { code, error }
    }
}

impl From<voxlift::Error> for Failure {
    fn from(e: voxlift::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::InitWeights(a) => init_weights(a),
        Command::Lift(a) => lift(a),
        Command::Pool(a) => pool_cmd(a),
        Command::Ground(a) => ground(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::TrainBoxhead(a) => train(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn synth(a: SynthArgs) -> CmdResult {
    if a.scenes == 0 {
        return Err(Failure::usage("--scenes must be at least 1"));
    }
    let feature_mode = match a.feature_mode {
        FeatureArg::Random => FeatureMode::Random,
        FeatureArg::BoxOnehotPlusNoise => FeatureMode::BoxOnehotPlusNoise,
    };
    for s in 0..a.scenes as u64 {
        let spec = SceneSpec {
            seed: a.seed + s,
            n_boxes: a.boxes,
            n_views: a.views,
            width: a.width,
            height: a.height,
            patch: a.patch,
            feature_dim: a.feature_dim,
            feature_mode,
            ..Default::default()
        };
        if let Err(e) = spec.validate() {
            return Err(Failure::usage(e));
        }
        let scene = generate(&spec)?;
        let manifest = write_scene(&a.out, &scene)?;
        let loc_path = manifest.with_file_name("loc.bin");
        write_location_token(&loc_path, &scene.location_token(a.feature_dim))?;
        print_json(&json!({
            "scene_id": scene.scene_id,
            "manifest": manifest,
            "loc": loc_path,
            "views": scene.views.len(),
            "boxes": scene.gt.boxes.len(),
        }));
    }
    Ok(())
}

fn init_weights(a: InitWeightsArgs) -> CmdResult {
    if a.dim == 0 {
        return Err(Failure::usage("--dim must be positive"));
    }
    let w = ModelWeights::init(a.seed, a.dim, a.layers);
    write_weights(&a.out, &w)?;
    print_json(&json!({"weights": a.out, "dim": a.dim, "layers": a.layers, "seed": a.seed}));
    Ok(())
}

fn lift_scene(scene: &Scene, weights: &ModelWeights) -> anyhow::Result<voxlift::Patch3DSet> {
    if let Some(d) = scene.feature_dim() {
        if d != weights.dim() {
            return Err(anyhow!(
                "scene {} has feature_dim {d} but the weights expect {}",
                scene.scene_id,
                weights.dim()
            ));
        }
    }
    Ok(lift_views(&scene.views, scene.patch, &weights.pos_mlp)?)
}

fn lift(a: LiftArgs) -> CmdResult {
    let scene = load_scene(&a.scene)?;
    let weights = read_weights(&a.weights)?;
    let patches = lift_scene(&scene, &weights)?;
    write_patches(&a.out, &patches)?;
    print_json(&json!({"scene_id": scene.scene_id, "tokens": patches.len(), "dim": patches.dim()}));
    Ok(())
}

fn pool_cmd(a: PoolArgs) -> CmdResult {
    let strategy = match a.strategy {
        StrategyArg::Voxel => PoolStrategy::VoxelCapped {
            voxel_size: a.voxel_size,
            cap: a.cap,
            seed: a.seed,
        },
        StrategyArg::Fps => PoolStrategy::Fps {
            count: a.count.ok_or_else(|| Failure::usage("--strategy fps needs --count"))?,
            seed: a.seed,
        },
    };
    let patches = read_patches(&a.input)?;
    let pooled = pool(&patches, strategy)?;
    write_pooled(&a.out, &pooled)?;
    print_json(&json!({"tokens": pooled.len(), "input_tokens": patches.len()}));
    Ok(())
}

/// JSON document written by `ground` and read by `eval`.
#[derive(Debug, Serialize, Deserialize)]
struct GroundingDoc {
    scene_id: String,
    scores: Vec<f64>,
    /// Final-layer boxes, one per query.
    boxes: Vec<Box3D>,
    /// Selected query indices, best first.
    selected: Vec<usize>,
    #[serde(default)]
    boxes_per_layer: Vec<Vec<Box3D>>,
}

fn ground(a: GroundArgs) -> CmdResult {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let decoder_cfg = cfg.decoder()?;
    let scene = load_scene(&a.scene)?;
    let weights = read_weights(&a.weights)?;
    let loc = read_location_token(&a.loc)?;
    let patches = lift_scene(&scene, &weights)?;
    let pooled = pool(&patches, cfg.pooling)?;
    let out = grounding_forward(&pooled, &loc, &decoder_cfg, &weights.decoder)?;
    let doc = GroundingDoc {
        scene_id: scene.scene_id.clone(),
        scores: out.scores.clone(),
        boxes: out.final_boxes().to_vec(),
        selected: out.selected.clone(),
        boxes_per_layer: out.boxes_per_layer,
    };
    write_json(&a.out, &doc)?;
    print_json(&json!({
        "scene_id": scene.scene_id,
        "tokens": pooled.len(),
        "queries": doc.scores.len(),
        "selected": doc.selected,
    }));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: EvalArgs) -> CmdResult {
    if a.pred.len() != a.gt.len() {
        return Err(Failure::usage(format!(
            "{} prediction files but {} manifests",
            a.pred.len(),
            a.gt.len()
        )));
    }
    let mut ids = Vec::with_capacity(a.pred.len());
    let mut preds = Vec::with_capacity(a.pred.len());
    let mut gts = Vec::with_capacity(a.pred.len());
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let doc: GroundingDoc = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let manifest = read_manifest(g)?;
        ids.push(manifest.scene_id.clone());
        preds.push(doc.selected.iter().filter_map(|&i| doc.boxes.get(i).copied()).collect());
        gts.push(manifest.target_boxes()?);
    }
    let report = acc_at_iou(&ids, &preds, &gts, &a.iou)?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let op = match a.op {
        OpArg::Diou => GradcheckOp::Diou,
        OpArg::Infonce => GradcheckOp::Infonce,
        OpArg::Boxhead => GradcheckOp::Boxhead,
    };
    let report = gradcheck(op, a.trials, a.tol, a.seed).map_err(Failure::usage)?;
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    if !report.pass {
        return Err(Failure::numeric(anyhow!(
            "max relative error {} exceeds {}",
            report.max_rel_error,
            report.tol
        )));
    }
    Ok(())
}

/// Scene manifests under `dir/*/manifest.json`, sorted by path.
fn scene_manifests(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let m = entry?.path().join("manifest.json");
        if m.is_file() {
            out.push(m);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(anyhow!("no scene manifests under {}", dir.display()));
    }
    Ok(out)
}

fn train(a: TrainArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.momentum) || !(a.lr >= 0.0 && a.lr.is_finite()) || a.steps == 0 {
        return Err(Failure::usage("need --steps >= 1, --lr >= 0 and --momentum in [0, 1)"));
    }
    let cfg = RunConfig::load(a.config.as_deref())?;
    let decoder_cfg = cfg.decoder()?;
    let mut weights = match &a.weights {
        Some(p) => read_weights(p)?,
        None => ModelWeights::init(cfg.seed, decoder_cfg.dim, decoder_cfg.layers),
    };
    let mut scenes = Vec::new();
    for m in scene_manifests(&a.scenes)? {
        let scene = load_scene(&m)?;
        let loc_path = m.with_file_name("loc.bin");
        let loc = if loc_path.exists() {
            read_location_token(&loc_path)?
        } else {
            scene.location_token(decoder_cfg.dim)
        };
        let patches = lift_scene(&scene, &weights)?;
        scenes.push(TrainScene {
            tokens: pool(&patches, cfg.pooling)?,
            loc,
            gt: scene.gt.boxes.clone(),
            targets: scene.targets.clone(),
        });
    }
    let opts = cfg.train_options(a.steps, a.lr, a.momentum);
    let report = train_box_head(&scenes, &decoder_cfg, &weights.decoder, &opts)?;
    let mut csv = String::from("step,diou_loss,infonce_loss\n");
    for l in &report.losses {
        csv.push_str(&format!("{},{},{}\n", l.step, l.diou_loss, l.infonce_loss));
    }
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.save_weights {
        weights.decoder.box_head = report.box_head;
        write_weights(p, &weights)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    if a.repeat == 0 || a.views == 0 || a.patches_per_view == 0 {
        return Err(Failure::usage("--views, --patches-per-view and --repeat must be positive"));
    }
    let cfg = RunConfig::load(a.config.as_deref())?;
    let decoder_cfg = cfg.decoder()?;
    let patch = 14;
    let cols = (a.patches_per_view as f64).sqrt().ceil() as u32;
    let rows = (a.patches_per_view as u32).div_ceil(cols);
    let spec = SceneSpec {
        seed: a.seed,
        n_views: a.views,
        width: cols * patch,
        height: rows * patch,
        patch,
        feature_dim: decoder_cfg.dim,
        ..Default::default()
    };
    let scene = generate(&spec)?;
    let weights = ModelWeights::init(a.seed, decoder_cfg.dim, decoder_cfg.layers);
    let loc = scene.location_token(decoder_cfg.dim);
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    let mut counts = (0, 0);
    for _ in 0..a.repeat {
        let t0 = Instant::now();
        let patches = lift_scene(&scene, &weights)?;
        let t1 = Instant::now();
        let pooled = pool(&patches, cfg.pooling)?;
        let t2 = Instant::now();
        grounding_forward(&pooled, &loc, &decoder_cfg, &weights.decoder)?;
        let t3 = Instant::now();
        times[0].push((t1 - t0).as_secs_f64() * 1e3);
        times[1].push((t2 - t1).as_secs_f64() * 1e3);
        times[2].push((t3 - t2).as_secs_f64() * 1e3);
        counts = (patches.len(), pooled.len());
    }
    let stage = |t: &Vec<f64>| json!({"mean_ms": t.iter().sum::<f64>() / t.len() as f64, "runs_ms": t});
    print_json(&json!({
        "views": a.views,
        "patches_per_view": (cols * rows) as usize,
        "lifted_tokens": counts.0,
        "pooled_tokens": counts.1,
        "stages": {"lift": stage(&times[0]), "pool": stage(&times[1]), "decode": stage(&times[2])},
    }));
    Ok(())
}
