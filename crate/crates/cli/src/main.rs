//! `angioseg`: phantom generation, training, evaluation, inference and self-checks.
//!
//! Exit codes: 0 success, 2 usage error (printed by clap), 1 runtime error
//! printed as a single `error: kind=<kind> message=<text>` line on stderr.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use angioseg::config::KvConfig;
use angioseg::data::{self, ClipSlice, PhantomParams, PHANTOM_KEYS};
use angioseg::metrics::{self, MetricsSummary};
use angioseg::model::{self, build_network, ModelConfig, NetworkParams, MAGIC, VERSION};
use angioseg::ops::{op_gradcheck_suite, SUITE_EPS};
use angioseg::pipeline::{self, SegmentOptions, TrainConfig, TRAIN_KEYS};
use angioseg::{Error, Result, Tensor};

const OP_TOLERANCE: f64 = 1e-5;
const NETWORK_TOLERANCE: f64 = 1e-4;
const NETWORK_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];

#[derive(Parser)]
#[command(name = "angioseg", version, about = "Spatiotemporal vessel segmentation for angiographic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic angiography dataset with exact labels.
    Phantom(PhantomArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Segment every frame of one clip.
    Segment(SegmentArgs),
    /// Finite-difference check of the operators and the network.
    Gradcheck(GradcheckArgs),
    /// Print the configuration stored in a checkpoint.
    Info(InfoArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of clips [default: 4].
    #[arg(long)]
    clips: Option<usize>,
    /// Frames per clip [default: 24].
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame side in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Master seed; per-clip seeds derive from it [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Branching generations below the trunk [default: 3].
    #[arg(long)]
    depth: Option<usize>,
    /// Smallest vessel radius in pixels [default: 1].
    #[arg(long)]
    radius_min: Option<f64>,
    /// Trunk radius in pixels [default: 3].
    #[arg(long)]
    radius_max: Option<f64>,
    /// Contrast front advance per frame in pixels [default: 3].
    #[arg(long)]
    front_speed: Option<f64>,
    /// Peak cardiac displacement in pixels [default: 2].
    #[arg(long)]
    motion_amplitude: Option<f64>,
    /// Cardiac period in frames [default: 12].
    #[arg(long)]
    motion_period: Option<f64>,
    /// Additive Gaussian noise std [default: 0.03].
    #[arg(long)]
    noise_std: Option<f64>,
    /// Signal-dependent noise scale [default: 0.02].
    #[arg(long)]
    noise_signal: Option<f64>,
    /// Background blobs; 0 gives a flat background [default: 6].
    #[arg(long)]
    blobs: Option<usize>,
    /// Add a vessel that periodically crosses the trunk [default: true].
    #[arg(long)]
    occlusion: Option<bool>,
    /// Centreline darkening fraction [default: 0.6].
    #[arg(long)]
    contrast: Option<f64>,
    /// Frame rate written to meta.txt [default: 15].
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, log and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Temporal half-window; the network sees 2N+1 frames [default: 1].
    #[arg(long)]
    n: Option<usize>,
    /// Training epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Square input resolution, a multiple of 32 [default: 448].
    #[arg(long)]
    size: Option<usize>,
    /// Samples per optimizer step [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate [default: 0.0002].
    #[arg(long)]
    lr: Option<f64>,
    /// L2 coefficient on weights [default: 0.0001].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Encoder stem width [default: 64].
    #[arg(long)]
    base_channels: Option<usize>,
    /// Seed for initialization; also the split and shuffle seeds unless set [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the train / test side draw.
    #[arg(long)]
    split_seed: Option<u64>,
    /// Seed of the per-epoch sample order.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Evaluate every this many epochs, 0 for only at the end [default: 1].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Binarization threshold [default: 0.5].
    #[arg(long)]
    threshold: Option<f64>,
    /// Relative area below which components are removed [default: 0.05].
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Held-out slices of the partition.
    Test,
    /// Every frame of every clip.
    All,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Frames to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Seed of the train / test side draw; use the training split seed.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Binarization threshold.
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Relative area below which components are removed.
    #[arg(long, default_value_t = pipeline::DEFAULT_TAU)]
    tau: f64,
    /// Samples per forward pass.
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Directory for metrics_raw.csv and metrics_post.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory holding frames/, or a directory of frames.
    #[arg(long)]
    clip: PathBuf,
    /// Directory for the mask images.
    #[arg(long)]
    out: PathBuf,
    /// Expected temporal half-window; must match the checkpoint.
    #[arg(long)]
    n: Option<usize>,
    /// Binarization threshold.
    #[arg(long, default_value_t = metrics::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Relative area below which components are removed.
    #[arg(long, default_value_t = pipeline::DEFAULT_TAU)]
    tau: f64,
    /// Frames per forward pass.
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Scope {
    All,
    Ops,
    Network,
}

#[derive(Args)]
struct GradcheckArgs {
    /// What to check.
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
    /// Seed of the random cases.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Randomized cases per operator.
    #[arg(long, default_value_t = 10)]
    cases: usize,
    /// Parameter entries checked in the network.
    #[arg(long, default_value_t = 48)]
    entries: usize,
    /// Encoder stem width of the checked network (32x32, N=1).
    #[arg(long, default_value_t = 64)]
    base_channels: usize,
}

#[derive(Args)]
struct InfoArgs {
    /// Checkpoint file.
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Segment(a) => segment(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<KvConfig> {
    path.map_or_else(|| Ok(KvConfig::new()), KvConfig::load)
}

fn put(kv: &mut KvConfig, key: &str, value: Option<impl Display>) {
    if let Some(v) = value {
        kv.set(key, v.to_string());
    }
}

fn phantom(a: PhantomArgs) -> Result<ExitCode> {
    let mut kv = load_config(a.config.as_deref())?;
    let mut known = PHANTOM_KEYS.to_vec();
    known.push("clips");
    kv.ensure_known(&known)?;
    put(&mut kv, "clips", a.clips);
    put(&mut kv, "frames", a.frames);
    put(&mut kv, "size", a.size);
    put(&mut kv, "seed", a.seed);
    put(&mut kv, "depth", a.depth);
    put(&mut kv, "radius_min", a.radius_min);
    put(&mut kv, "radius_max", a.radius_max);
    put(&mut kv, "front_speed", a.front_speed);
    put(&mut kv, "motion_amplitude", a.motion_amplitude);
    put(&mut kv, "motion_period", a.motion_period);
    put(&mut kv, "noise_std", a.noise_std);
    put(&mut kv, "noise_signal", a.noise_signal);
    put(&mut kv, "blobs", a.blobs);
    put(&mut kv, "occlusion", a.occlusion);
    put(&mut kv, "contrast", a.contrast);
    put(&mut kv, "fps", a.fps);

    let mut params = PhantomParams::default();
    params.apply_config(&kv)?;
    let clips = kv.get::<usize>("clips")?.unwrap_or(4);
    let written = data::gen_phantom_dataset(&a.out, clips, &params, params.seed)?;
    println!(
        "wrote {} clips of {} frames at {}x{} to {}",
        written.len(),
        params.frames,
        params.size,
        params.size,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Effective training configuration: defaults, then the file, then flags.
fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut kv = load_config(a.config.as_deref())?;
    kv.ensure_known(TRAIN_KEYS)?;
    put(&mut kv, "n", a.n);
    put(&mut kv, "epochs", a.epochs);
    put(&mut kv, "size", a.size);
    put(&mut kv, "batch_size", a.batch_size);
    put(&mut kv, "lr", a.lr);
    put(&mut kv, "weight_decay", a.weight_decay);
    put(&mut kv, "base_channels", a.base_channels);
    put(&mut kv, "seed", a.seed);
    put(&mut kv, "split_seed", a.split_seed);
    put(&mut kv, "shuffle_seed", a.shuffle_seed);
    put(&mut kv, "eval_every", a.eval_every);
    put(&mut kv, "max_steps", a.max_steps);
    put(&mut kv, "threshold", a.threshold);
    put(&mut kv, "tau", a.tau);
    // one --seed controls all randomness unless a stream is set explicitly
    if let Some(seed) = kv.raw("seed").map(str::to_owned) {
        for key in ["split_seed", "shuffle_seed"] {
            if !kv.contains(key) {
                kv.set(key, seed.clone());
            }
        }
    }
    let mut cfg = TrainConfig::default();
    cfg.apply_config(&kv)?;
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn config_text(cfg: &TrainConfig) -> String {
    let mut kv = KvConfig::new();
    kv.set("lr", cfg.lr.to_string());
    kv.set("batch_size", cfg.batch_size.to_string());
    kv.set("epochs", cfg.epochs.to_string());
    kv.set("weight_decay", cfg.weight_decay.to_string());
    kv.set("n", cfg.n.to_string());
    kv.set("height", cfg.height.to_string());
    kv.set("width", cfg.width.to_string());
    kv.set("base_channels", cfg.base_channels.to_string());
    kv.set("seed", cfg.seed.to_string());
    kv.set("split_seed", cfg.split_seed.to_string());
    kv.set("shuffle_seed", cfg.shuffle_seed.to_string());
    kv.set("eval_every", cfg.eval_every.to_string());
    if let Some(m) = cfg.max_steps {
        kv.set("max_steps", m.to_string());
    }
    kv.set("smooth", cfg.smooth.to_string());
    kv.set("threshold", cfg.threshold.to_string());
    kv.set("tau", cfg.tau.to_string());
    kv.to_text()
}

fn print_summary(label: &str, s: &MetricsSummary) {
    println!(
        "{label}: images={} mean_iou={:.6} mean_sensitivity={:.6} mean_specificity={:.6} mean_dice={:.6} pooled_iou={:.6}",
        s.images, s.mean_iou, s.mean_sensitivity, s.mean_specificity, s.mean_dice, s.pooled_iou
    );
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(&a)?;
    let clips = data::load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.txt"), config_text(&cfg))?;
    let outcome = pipeline::train(&cfg, &clips)?;
    let last = outcome.log.steps.last();
    println!(
        "steps={} final_loss={:.6} checkpoint={}",
        outcome.log.steps.len(),
        last.map_or(f64::NAN, |s| s.loss),
        a.out.join("final.ckpt").display()
    );
    if let Some(e) = outcome.log.evals.last() {
        print_summary("test raw", &e.report.raw_summary);
        print_summary("test post", &e.report.post_summary);
    }
    if let Some((epoch, iou)) = outcome.best {
        println!("best epoch={epoch} post_mean_iou={iou:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let params = model::load_checkpoint(&a.checkpoint)?;
    let cfg = *params.config();
    let clips = data::load_dataset(&a.data)?;
    let slices = match a.split {
        SplitArg::Test => data::partition(&clips, a.split_seed)?.test,
        SplitArg::All => clips
            .iter()
            .enumerate()
            .map(|(clip, c)| ClipSlice { clip, range: 0..c.len() })
            .collect(),
    };
    let samples = data::build_samples(&clips, &slices, cfg.n, cfg.height, cfg.width)?;
    let report = pipeline::evaluate(&params, &samples, a.threshold, a.tau, a.batch_size)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics_raw.csv"), metrics::format_report(&report.raw))?;
        std::fs::write(out.join("metrics_post.csv"), metrics::format_report(&report.post))?;
    }
    print_summary("raw", &report.raw_summary);
    print_summary("post", &report.post_summary);
    Ok(ExitCode::SUCCESS)
}

fn segment(a: SegmentArgs) -> Result<ExitCode> {
    let params = model::load_checkpoint(&a.checkpoint)?;
    let frames_dir = a.clip.join("frames");
    let dir = if frames_dir.is_dir() { frames_dir } else { a.clip.clone() };
    let frames = data::load_frames(&dir)?;
    if frames.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", dir.display())));
    }
    let id = a.clip.file_name().map_or_else(|| "clip".into(), |s| s.to_string_lossy().into_owned());
    let opts = SegmentOptions {
        n: a.n,
        threshold: a.threshold,
        tau: a.tau,
        batch_size: a.batch_size,
    };
    let masks = pipeline::segment_frames(&params, &id, &frames, &opts)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, m) in masks.iter().enumerate() {
        data::write_png(&data::mask_to_gray(m), &a.out.join(format!("{i:05}.png")))?;
    }
    println!("wrote {} masks to {}", masks.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    println!("{:<20} {:>6} {:>12} {:>10}  worst", "check", "cases", "max_rel_err", "status");
    let mut row = |name: &str, cases: usize, err: f64, tol: f64, worst: &str| {
        let pass = err < tol;
        ok &= pass;
        let status = if pass { "PASS" } else { "FAIL" };
        println!("{name:<20} {cases:>6} {err:>12.3e} {status:>10}  {worst}");
    };
    if a.scope != Scope::Network {
        for c in op_gradcheck_suite(a.seed, a.cases)? {
            row(c.op, c.cases, c.report.max_rel_error, OP_TOLERANCE, &c.report.worst);
        }
    }
    if a.scope != Scope::Ops {
        let cfg = ModelConfig {
            base_channels: a.base_channels,
            seed: a.seed,
            ..ModelConfig::new(1, 32, 32)
        };
        let mut params = build_network::<f64>(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        jitter_offsets(&mut params, &mut rng)?;
        let frames = Tensor::<f64>::rand_uniform(&[1, 1, cfg.window(), 32, 32], 0.0, 1.0, &mut rng)?;
        let r = model::network_gradcheck(&params, &frames, a.entries, 8, a.seed, &NETWORK_STEPS)?;
        row("network", r.checked, r.max_rel_error, NETWORK_TOLERANCE, &r.worst);
    }
    println!("op step {SUITE_EPS:e} tol {OP_TOLERANCE:e}; network tol {NETWORK_TOLERANCE:e}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Moves norm offsets and biases off zero. On the 1x1 deepest maps of a
/// 32x32 input instance norm outputs its offset, so zero offsets would put
/// every following ReLU exactly on its kink.
fn jitter_offsets(params: &mut NetworkParams<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, t) in params.tensors_mut().iter_mut() {
        if name.ends_with(".beta") || name.ends_with(".bias") {
            *t = Tensor::randn(t.shape(), 0.1, rng)?;
        }
    }
    Ok(())
}

fn info(a: InfoArgs) -> Result<ExitCode> {
    let params = model::load_checkpoint(&a.checkpoint)?;
    let c = params.config();
    println!("format={} version={VERSION}", String::from_utf8_lossy(MAGIC));
    println!("N={}", c.n);
    println!("window={}", c.window());
    println!("resolution={}x{}", c.height, c.width);
    println!("base_channels={}", c.base_channels);
    println!("fusion_channels={} fused_channels={}", c.fusion_channels, c.fused_channels);
    println!("parameters={}", params.count());
    println!("tensors={}", params.tensors().len());
    Ok(ExitCode::SUCCESS)
}
