//! Training loop, evaluation, whole-clip inference and mask cleanup.

mod post;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::data::{self, Clip, ClipSample};
use crate::error::{Error, Result};
use crate::metrics::{self, BinaryMask, MetricsRecord, MetricsSummary};
use crate::model::{self, build_network, is_decayed, ModelConfig, NetworkParams};
use crate::ops::{sgd_step, SgdConfig};
use crate::tensor::Tensor;

pub use post::{connected_components, postprocess, Components, DEFAULT_TAU};

/// Keys accepted by [`TrainConfig::apply_config`].
pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "epochs",
    "weight_decay",
    "n",
    "size",
    "height",
    "width",
    "base_channels",
    "seed",
    "split_seed",
    "shuffle_seed",
    "eval_every",
    "max_steps",
    "smooth",
    "threshold",
    "tau",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Seed of the train / test side draw.
    pub split_seed: u64,
    /// Seed of the per-epoch sample order.
    pub shuffle_seed: u64,
    /// Evaluate on the test slices every this many epochs (0: only at the end).
    pub eval_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub smooth: f64,
    pub threshold: f64,
    pub tau: f64,
    /// Where `final.ckpt`, `best.ckpt`, `train_log.csv` and the metrics
    /// reports are written; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 4,
            epochs: 100,
            weight_decay: 1e-4,
            n: 1,
            height: 448,
            width: 448,
            base_channels: 64,
            seed: 0,
            split_seed: 0,
            shuffle_seed: 0,
            eval_every: 1,
            max_steps: None,
            smooth: metrics::DEFAULT_SMOOTH,
            threshold: metrics::DEFAULT_THRESHOLD,
            tau: DEFAULT_TAU,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.tau >= 0.0) || !(self.smooth >= 0.0) {
            return Err(Error::Config("tau and smooth must be non-negative".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n: self.n,
            height: self.height,
            width: self.width,
            base_channels: self.base_channels,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn apply_config(&mut self, c: &KvConfig) -> Result<()> {
        c.apply("lr", &mut self.lr)?;
        c.apply("batch_size", &mut self.batch_size)?;
        c.apply("epochs", &mut self.epochs)?;
        c.apply("weight_decay", &mut self.weight_decay)?;
        c.apply("n", &mut self.n)?;
        if let Some(s) = c.get::<usize>("size")? {
            self.height = s;
            self.width = s;
        }
        c.apply("height", &mut self.height)?;
        c.apply("width", &mut self.width)?;
        c.apply("base_channels", &mut self.base_channels)?;
        c.apply("seed", &mut self.seed)?;
        c.apply("split_seed", &mut self.split_seed)?;
        c.apply("shuffle_seed", &mut self.shuffle_seed)?;
        c.apply("eval_every", &mut self.eval_every)?;
        if let Some(m) = c.get::<usize>("max_steps")? {
            self.max_steps = Some(m);
        }
        c.apply("smooth", &mut self.smooth)?;
        c.apply("threshold", &mut self.threshold)?;
        c.apply("tau", &mut self.tau)?;
        if let Some(p) = c.raw("out_dir") {
            self.out_dir = Some(PathBuf::from(p));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Dice loss plus the L2 term.
    pub loss: f64,
    pub dice_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// `step,epoch,loss,dice_loss` lines under a header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("step,epoch,loss,dice_loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{:.8},{:.8}", s.step, s.epoch, s.loss, s.dice_loss);
        }
        out
    }
}

pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub log: TrainLog,
    /// Epoch and post-processed mean test IOU of the best evaluation.
    pub best: Option<(usize, f64)>,
}

/// Samples in the order visited during `epoch`.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Optimizer steps in one epoch over `len` samples (the last batch may be short).
pub fn steps_per_epoch(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size)
}

/// One SGD step on a batch; returns `(total loss, dice loss)`.
pub fn train_step(
    params: &mut NetworkParams<f32>,
    batch: &[&ClipSample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, f64)> {
    let (x, targets) = data::collate(batch)?;
    let (prob, trace) = model::forward(&x, params)?;
    let (dice_loss, grad) = metrics::batch_dice_loss(&prob, &targets, cfg.smooth)?;
    let loss = metrics::total_loss(dice_loss, params, cfg.weight_decay);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = model::backward(&trace, params, &grad)?;
    let sgd = SgdConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
    };
    sgd_step(params.tensors_mut(), &grads.params, &sgd, is_decayed)?;
    Ok((loss, dice_loss))
}

/// Trains on prepared samples, evaluating on `test` when it is non-empty.
pub fn train_on_samples(cfg: &TrainConfig, train: &[ClipSample], test: &[ClipSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mcfg = cfg.model_config();
    let mut params = build_network::<f32>(&mcfg)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.shuffle_seed, epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&ClipSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, dice_loss) = train_step(&mut params, &batch, cfg, step)?;
            log::debug!("step {step} epoch {epoch} loss {loss:.6}");
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                dice_loss,
            });
            epoch_sum += loss;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps > 0 {
            log.epoch_losses.push(epoch_sum / epoch_steps as f64);
        }
        let done = epoch + 1 == cfg.epochs || cfg.max_steps.is_some_and(|m| step >= m);
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !test.is_empty() && (due || done) {
            let report = evaluate(&params, test, cfg.threshold, cfg.tau, cfg.batch_size)?;
            let score = report.post_summary.mean_iou;
            log::info!("epoch {epoch}: test IOU raw {:.4} post {score:.4}", report.raw_summary.mean_iou);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((epoch, score));
                if let Some(dir) = &cfg.out_dir {
                    model::save_checkpoint(&params, &dir.join("best.ckpt"))?;
                }
            }
            log.evals.push(EvalRecord { epoch, step, report });
        }
        if done {
            break 'epochs;
        }
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.out_dir {
        model::save_checkpoint(&params, &dir.join("final.ckpt"))?;
        std::fs::write(dir.join("train_log.csv"), log.to_text())?;
        if let Some(last) = log.evals.last() {
            std::fs::write(dir.join("metrics_raw.csv"), metrics::format_report(&last.report.raw))?;
            std::fs::write(dir.join("metrics_post.csv"), metrics::format_report(&last.report.post))?;
        }
    }
    Ok(TrainOutcome { params, log, best })
}

/// Partitions `clips`, builds windows and trains.
pub fn train(cfg: &TrainConfig, clips: &[Clip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = data::partition(clips, cfg.split_seed)?;
    let train = data::build_samples(clips, &split.train, cfg.n, cfg.height, cfg.width)?;
    let test = data::build_samples(clips, &split.test, cfg.n, cfg.height, cfg.width)?;
    train_on_samples(cfg, &train, &test)
}

/// Probability maps `[H, W]`, one per sample, in sample order.
pub fn predict(params: &NetworkParams<f32>, samples: &[ClipSample], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ClipSample> = chunk.iter().collect();
        let (x, _) = data::collate(&refs)?;
        let (prob, _) = model::forward(&x, params)?;
        for b in 0..chunk.len() {
            out.push(prob.index_axis0(b).squeeze_axis(0)?);
        }
    }
    Ok(out)
}

/// Per-image metrics before and after component cleanup.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub raw: Vec<MetricsRecord>,
    pub post: Vec<MetricsRecord>,
    pub raw_summary: MetricsSummary,
    pub post_summary: MetricsSummary,
}

impl EvalReport {
    pub fn from_masks(samples: &[ClipSample], masks: &[BinaryMask], tau: f64) -> Result<Self> {
        if samples.len() != masks.len() {
            return Err(Error::invalid(format!("{} masks for {} samples", masks.len(), samples.len())));
        }
        let mut raw = Vec::with_capacity(samples.len());
        let mut post = Vec::with_capacity(samples.len());
        for (s, m) in samples.iter().zip(masks) {
            raw.push(MetricsRecord::new(&s.clip_id, s.center_index, m, &s.target)?);
            post.push(MetricsRecord::new(&s.clip_id, s.center_index, &postprocess(m, tau), &s.target)?);
        }
        Ok(EvalReport {
            raw_summary: metrics::summarize(&raw),
            post_summary: metrics::summarize(&post),
            raw,
            post,
        })
    }
}

pub fn evaluate(
    params: &NetworkParams<f32>,
    test: &[ClipSample],
    threshold: f64,
    tau: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let probs = predict(params, test, batch_size)?;
    let masks = probs
        .iter()
        .map(|p| metrics::binarize(p, threshold))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_masks(test, &masks, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOptions {
    /// Expected temporal half-window; must agree with the checkpoint.
    pub n: Option<usize>,
    pub threshold: f64,
    pub tau: f64,
    pub batch_size: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            n: None,
            threshold: metrics::DEFAULT_THRESHOLD,
            tau: DEFAULT_TAU,
            batch_size: 4,
        }
    }
}

/// One cleaned mask per frame of `clip`, at the clip's native resolution.
pub fn segment_video(params: &NetworkParams<f32>, clip: &Clip, opts: &SegmentOptions) -> Result<Vec<BinaryMask>> {
    clip.validate()?;
    segment_frames(params, &clip.id, &clip.frames, opts)
}

/// As [`segment_video`], for an unlabelled frame sequence.
pub fn segment_frames(
    params: &NetworkParams<f32>,
    clip_id: &str,
    frames: &[GrayImage],
    opts: &SegmentOptions,
) -> Result<Vec<BinaryMask>> {
    let cfg = params.config();
    if let Some(n) = opts.n {
        if n != cfg.n {
            return Err(Error::Config(format!("requested N={n} but the checkpoint was trained with N={}", cfg.n)));
        }
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height() as usize, first.width() as usize);
    if frames.iter().any(|f| (f.height() as usize, f.width() as usize) != (h, w)) {
        return Err(Error::Dataset(format!("clip `{clip_id}`: mixed resolutions")));
    }
    let inputs = frames
        .iter()
        .map(|f| data::preprocess_frame(f, cfg.height, cfg.width))
        .collect::<Result<Vec<_>>>()?;
    let placeholders = vec![BinaryMask::empty(cfg.height, cfg.width); inputs.len()];
    let samples = data::window_samples(&data::pad_temporal(&inputs, cfg.n), &placeholders, cfg.n, clip_id, 0)?;
    predict(params, &samples, opts.batch_size)?
        .iter()
        .map(|p| {
            let m = metrics::binarize(p, opts.threshold)?;
            Ok(postprocess(&data::preprocess_mask(&m, h, w)?, opts.tau))
        })
        .collect()
}
