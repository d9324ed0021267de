//! Overlap losses and binary segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::NetworkParams;
use crate::tensor::{Scalar, Tensor};

/// Default additive smoothing of the soft dice coefficient.
pub const DEFAULT_SMOOTH: f64 = 1.0;
/// Default probability threshold for binarization.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A strictly binary `H x W` mask stored row-major as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// The mask as a `[H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_parts(vec![self.height, self.width], data)
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "masks {}x{} and {}x{} differ in shape",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn check_pred<T: Scalar>(pred: &Tensor<T>, target: &BinaryMask) -> Result<()> {
    let s = pred.shape();
    let ok = s.len() >= 2 && s[s.len() - 2] == target.height && s[s.len() - 1] == target.width && pred.numel() == target.data.len();
    if !ok {
        return Err(Error::shape(format!(
            "prediction {s:?} does not match {}x{} target",
            target.height, target.width
        )));
    }
    Ok(())
}

/// `(2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth)` and its gradient
/// with respect to `pred`.
pub fn soft_dice<T: Scalar>(pred: &Tensor<T>, target: &BinaryMask, smooth: f64) -> Result<(f64, Tensor<T>)> {
    check_pred(pred, target)?;
    let (mut inter, mut psum) = (0.0f64, 0.0f64);
    for (&p, &t) in pred.data().iter().zip(&target.data) {
        let p = p.to_f64();
        psum += p;
        if t == 1 {
            inter += p;
        }
    }
    let tsum = target.count() as f64;
    let num = 2.0 * inter + smooth;
    let den = psum + tsum + smooth;
    if den == 0.0 {
        return Err(Error::invalid("soft dice undefined: empty prediction and target with zero smoothing"));
    }
    let grad = target
        .data
        .iter()
        .map(|&t| T::from_f64((2.0 * t as f64 * den - num) / (den * den)))
        .collect();
    Ok((num / den, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// `1 - soft_dice` and its gradient.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &BinaryMask, smooth: f64) -> Result<(f64, Tensor<T>)> {
    let (d, g) = soft_dice(pred, target, smooth)?;
    Ok((1.0 - d, g.map(|v| -v)))
}

/// Per-image dice loss averaged over a `[B, 1, H, W]` batch; returns the
/// mean loss and its gradient.
pub fn batch_dice_loss<T: Scalar>(prob: &Tensor<T>, targets: &[BinaryMask], smooth: f64) -> Result<(f64, Tensor<T>)> {
    let s = prob.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != targets.len() {
        return Err(Error::shape(format!(
            "batch prediction {s:?} does not match {} targets",
            targets.len()
        )));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(prob.numel());
    for (b, target) in targets.iter().enumerate() {
        let (l, g) = dice_loss(&prob.index_axis0(b), target, smooth)?;
        total += l;
        grad.extend(g.data().iter().map(|&v| v * T::from_f64(scale)));
    }
    Ok((total * scale, Tensor::from_parts(s.to_vec(), grad)))
}

/// Dice loss plus the L2 regularization term `(wd / 2) * sum ||w||^2`
/// over weight-decayed parameters.
pub fn total_loss<T: Scalar>(dice_loss_value: f64, params: &NetworkParams<T>, weight_decay: f64) -> f64 {
    dice_loss_value + 0.5 * weight_decay * params.decayed_sum_of_squares()
}

/// The L2 term alone, for a plain list of weights.
pub fn l2_penalty(weights: &[f64], weight_decay: f64) -> f64 {
    0.5 * weight_decay * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Pixel counts of a binary prediction against a target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// `|X ∩ Y| / |X ∪ Y|`, 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `2|X ∩ Y| / (|X| + |Y|)`, 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(pred: &BinaryMask, target: &BinaryMask) -> Result<ConfusionCounts> {
    check_pair(pred, target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// True positive rate `tp / (tp + fn)`.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// True negative rate `tn / (tn + fp)`.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

pub fn iou(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, target)?.iou())
}

pub fn dice(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, target)?.dice())
}

/// `1` wherever `prob >= threshold`. `prob` is `[H, W]` or any shape whose
/// trailing two axes are `H, W` and which holds exactly `H * W` values.
pub fn binarize<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let s = prob.shape();
    if s.len() < 2 || prob.numel() != s[s.len() - 2] * s[s.len() - 1] {
        return Err(Error::shape(format!("cannot binarize tensor of shape {s:?} as one image")));
    }
    let mut data = Vec::with_capacity(prob.numel());
    for &v in prob.data() {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        data.push((v >= threshold) as u8);
    }
    BinaryMask::new(s[s.len() - 2], s[s.len() - 1], data)
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub clip_id: String,
    pub frame_index: usize,
    pub counts: ConfusionCounts,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub dice: f64,
}

impl MetricsRecord {
    pub fn new(clip_id: impl Into<String>, frame_index: usize, pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        let counts = confusion(pred, target)?;
        Ok(MetricsRecord {
            clip_id: clip_id.into(),
            frame_index,
            counts,
            iou: counts.iou(),
            sensitivity: sensitivity(&counts),
            specificity: specificity(&counts),
            dice: counts.dice(),
        })
    }
}

/// Mean of per-image metrics, plus metrics of the pooled pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsSummary {
    pub images: usize,
    pub mean_iou: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    pub mean_dice: f64,
    pub pooled_iou: f64,
    pub pooled_sensitivity: f64,
    pub pooled_specificity: f64,
    pub pooled_dice: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    if records.is_empty() {
        return MetricsSummary::default();
    }
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut pooled = ConfusionCounts::default();
    for r in records {
        pooled.merge(&r.counts);
    }
    MetricsSummary {
        images: records.len(),
        mean_iou: mean(|r| r.iou),
        mean_sensitivity: mean(|r| r.sensitivity),
        mean_specificity: mean(|r| r.specificity),
        mean_dice: mean(|r| r.dice),
        pooled_iou: pooled.iou(),
        pooled_sensitivity: sensitivity(&pooled),
        pooled_specificity: specificity(&pooled),
        pooled_dice: pooled.dice(),
    }
}

pub const REPORT_HEADER: &str = "clip_id,frame_index,iou,sensitivity,specificity,dice";

/// Comma-separated report: header, one row per image, then `mean` and
/// `pooled` aggregate rows (frame index left empty).
pub fn format_report(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.clip_id, r.frame_index, r.iou, r.sensitivity, r.specificity, r.dice
        );
    }
    let s = summarize(records);
    let _ = writeln!(
        out,
        "mean,,{:.6},{:.6},{:.6},{:.6}",
        s.mean_iou, s.mean_sensitivity, s.mean_specificity, s.mean_dice
    );
    let _ = writeln!(
        out,
        "pooled,,{:.6},{:.6},{:.6},{:.6}",
        s.pooled_iou, s.pooled_sensitivity, s.pooled_specificity, s.pooled_dice
    );
    out
}
