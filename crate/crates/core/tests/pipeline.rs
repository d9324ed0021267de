mod common;

use angioseg::data::{build_samples, gen_phantom, ClipSample, ClipSlice, PhantomParams};
use angioseg::metrics::{self, BinaryMask};
use angioseg::model::{build_network, load_checkpoint, ModelConfig};
use angioseg::pipeline::*;
use angioseg::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(seed: u64, h: usize, w: usize, density: f64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
}

proptest! {
    #[test]
    fn labelling_matches_flood_fill(seed in 0u64..100_000, density in 0.05f64..0.7) {
        let m = random_mask(seed, 32, 32, density);
        let cc = connected_components(&m);
        prop_assert_eq!(&cc.areas, &common::flood_fill_areas(m.data(), 32, 32));
        // labels are consistent with areas
        for (k, &a) in cc.areas.iter().enumerate() {
            prop_assert_eq!(cc.labels.iter().filter(|&&l| l as usize == k + 1).count(), a);
        }
    }

    #[test]
    fn postprocess_shrinks_and_is_idempotent(seed in 0u64..100_000, density in 0.02f64..0.6, tau in 0.0f64..1.0) {
        let m = random_mask(seed, 24, 24, density);
        let once = postprocess(&m, tau);
        prop_assert!(once.is_subset_of(&m));
        prop_assert_eq!(postprocess(&once, tau), once.clone());
        prop_assert_eq!(postprocess(&m, 0.0), m);
    }
}

#[test]
fn single_component_survives_any_tau() {
    let mut m = BinaryMask::empty(10, 10);
    for i in 0..10 {
        m.set(i, i, true);
    }
    for tau in [0.0, 0.05, 0.5, 1.0] {
        assert_eq!(postprocess(&m, tau), m);
    }
    assert_eq!(postprocess(&BinaryMask::empty(4, 4), 0.05), BinaryMask::empty(4, 4));
}

#[test]
fn tau_rule_example() {
    let mut m = BinaryMask::empty(50, 50);
    for y in 0..25 {
        for x in 0..40 {
            m.set(y, x, true);
        }
    }
    for y in 40..44 {
        for x in 45..50 {
            m.set(y, x, true);
        }
    }
    assert_eq!(connected_components(&m).areas, vec![1000, 20]);
    let out = postprocess(&m, 0.05);
    assert_eq!(out.count(), 1000);
    assert!(!out.get(41, 46));
}

fn samples_from_masks(masks: &[BinaryMask]) -> Vec<ClipSample> {
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| ClipSample {
            clip_id: "c".into(),
            center_index: i,
            window: Tensor::zeros(&[1, m.height(), m.width()]).unwrap(),
            target: m.clone(),
        })
        .collect()
}

#[test]
fn evaluation_identities() {
    let targets: Vec<BinaryMask> = (0..6).map(|s| random_mask(s, 16, 16, 0.2)).collect();
    let samples = samples_from_masks(&targets);
    let r = EvalReport::from_masks(&samples, &targets, 0.0).unwrap();
    for rec in r.raw.iter().chain(&r.post) {
        assert_eq!((rec.iou, rec.sensitivity, rec.specificity, rec.dice), (1.0, 1.0, 1.0, 1.0));
    }
    let empty = vec![BinaryMask::empty(16, 16); 6];
    let r = EvalReport::from_masks(&samples, &empty, DEFAULT_TAU).unwrap();
    assert_eq!(r.raw_summary.mean_specificity, 1.0);
    assert_eq!(r.raw_summary.mean_sensitivity, 0.0);

    // independent recount of what the pipeline reports
    let preds: Vec<BinaryMask> = (10..16).map(|s| random_mask(s, 16, 16, 0.3)).collect();
    let r = EvalReport::from_masks(&samples, &preds, DEFAULT_TAU).unwrap();
    let mut ious = Vec::new();
    for ((rec, p), t) in r.raw.iter().zip(&preds).zip(&targets) {
        let inter = p.data().iter().zip(t.data()).filter(|(&a, &b)| a == 1 && b == 1).count();
        let union = p.data().iter().zip(t.data()).filter(|(&a, &b)| a == 1 || b == 1).count();
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        assert_eq!(rec.iou, iou);
        ious.push(iou);
    }
    assert_eq!(r.raw_summary.mean_iou, ious.iter().sum::<f64>() / ious.len() as f64);
    for ((rec, p), t) in r.post.iter().zip(&preds).zip(&targets) {
        assert_eq!(rec.iou, metrics::iou(&postprocess(p, DEFAULT_TAU), t).unwrap());
    }
    assert!(EvalReport::from_masks(&samples, &preds[..2], DEFAULT_TAU).is_err());
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        height: 32,
        width: 32,
        base_channels: 8,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn phantom_samples(n: usize, count: usize) -> Vec<ClipSample> {
    let p = PhantomParams {
        size: 32,
        frames: count,
        radius_max: 2.0,
        ..PhantomParams::default()
    };
    let clip = gen_phantom(&p, "t").unwrap();
    build_samples(&[clip], &[ClipSlice { clip: 0, range: 0..count }], n, 32, 32).unwrap()
}

#[test]
fn epoch_step_count_and_determinism() {
    let train = phantom_samples(1, 8);
    let out = train_on_samples(&tiny_cfg(), &train, &[]).unwrap();
    assert_eq!(out.log.steps.len(), 2);
    assert_eq!(out.log.steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![0, 1]);
    assert!(out.log.steps.iter().all(|s| s.loss.is_finite() && s.loss >= s.dice_loss));
    let again = train_on_samples(&tiny_cfg(), &train, &[]).unwrap();
    assert_eq!(out.log.steps, again.log.steps);
    assert_eq!(out.params.tensors(), again.params.tensors());
    let other = TrainConfig { shuffle_seed: 1, ..tiny_cfg() };
    assert_ne!(train_on_samples(&other, &train, &[]).unwrap().log.steps, out.log.steps);
}

#[test]
fn max_steps_and_empty_set() {
    let train = phantom_samples(1, 8);
    let cfg = TrainConfig { epochs: 10, max_steps: Some(3), ..tiny_cfg() };
    assert_eq!(train_on_samples(&cfg, &train, &[]).unwrap().log.steps.len(), 3);
    assert!(matches!(train_on_samples(&cfg, &[], &[]), Err(Error::Dataset(_))));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let mut train = phantom_samples(1, 8);
    for s in &mut train[..] {
        s.window.data_mut()[0] = f32::NAN;
    }
    match train_on_samples(&tiny_cfg(), &train, &[]) {
        Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
        other => panic!("expected non-finite loss, got {:?}", other.map(|o| o.log.steps.len())),
    }
}

#[test]
fn training_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let train = phantom_samples(2, 6);
    let test = phantom_samples(2, 6);
    let cfg = TrainConfig {
        n: 2,
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny_cfg()
    };
    let out = train_on_samples(&cfg, &train, &test).unwrap();
    for f in ["final.ckpt", "best.ckpt", "train_log.csv", "metrics_raw.csv", "metrics_post.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + out.log.steps.len());
    assert!(log.starts_with("step,epoch,loss"));
    let ckpt = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ckpt.config().n, 2);
    assert_eq!(ckpt.tensors(), out.params.tensors());
    assert!(out.best.is_some());
    assert_eq!(out.log.evals.len(), 1);
}

#[test]
fn segment_video_one_mask_per_frame() {
    let p = PhantomParams { size: 48, frames: 7, ..PhantomParams::default() };
    let clip = gen_phantom(&p, "v").unwrap();
    let params = build_network::<f32>(&ModelConfig { base_channels: 8, ..ModelConfig::new(1, 32, 32) }).unwrap();
    let masks = segment_video(&params, &clip, &SegmentOptions::default()).unwrap();
    assert_eq!(masks.len(), 7);
    for m in &masks {
        assert_eq!((m.height(), m.width()), (48, 48));
        assert!(m.data().iter().all(|&v| v <= 1));
        assert_eq!(&postprocess(m, DEFAULT_TAU), m);
    }
    let opts = SegmentOptions { n: Some(2), ..SegmentOptions::default() };
    assert!(matches!(segment_video(&params, &clip, &opts), Err(Error::Config(_))));
}
