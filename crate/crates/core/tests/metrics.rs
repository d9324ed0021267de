use angioseg::metrics::*;
use angioseg::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask<R: Rng>(h: usize, w: usize, density: f64, rng: &mut R) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
}

/// Pixel-by-pixel recount, independent of the library's counting.
fn brute_counts(p: &BinaryMask, t: &BinaryMask) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for y in 0..p.height() {
        for x in 0..p.width() {
            match (p.get(y, x), t.get(y, x)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
    }
    (tp, fp, tn, fneg)
}

fn frac(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1200 {
        let h = rng.random_range(1..=24);
        let w = rng.random_range(1..=24);
        let dens = [0.0, 0.02, 0.3, 0.7, 1.0][case % 5];
        let p = random_mask(h, w, dens, &mut rng);
        let t = random_mask(h, w, rng.random_range(0.0..1.0), &mut rng);
        let (tp, fp, tn, fneg) = brute_counts(&p, &t);
        let c = confusion(&p, &t).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fneg));
        assert_eq!(c.total(), (h * w) as u64);
        assert_eq!(c.tp + c.fn_, t.count() as u64);

        let i = iou(&p, &t).unwrap();
        let d = dice(&p, &t).unwrap();
        assert_eq!(i, frac(tp, tp + fp + fneg));
        assert_eq!(d, frac(2 * tp, 2 * tp + fp + fneg));
        assert_eq!(sensitivity(&c), frac(tp, tp + fneg));
        assert_eq!(specificity(&c), frac(tn, tn + fp));
        assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        assert!((i - d / (2.0 - d)).abs() <= 1e-12);
        assert_eq!(i, iou(&t, &p).unwrap());
        assert_eq!(d, dice(&t, &p).unwrap());
        for v in [i, d, sensitivity(&c), specificity(&c)] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn shape_mismatch_rejected() {
    let a = BinaryMask::empty(3, 4);
    let b = BinaryMask::empty(4, 3);
    assert!(confusion(&a, &b).is_err());
    let p = Tensor::<f64>::zeros(&[4, 3]).unwrap();
    assert!(soft_dice(&p, &a, 1.0).is_err());
}

fn finite_difference_check(pred: &Tensor<f64>, target: &BinaryMask, smooth: f64) -> f64 {
    let (_, g) = soft_dice(pred, target, smooth).unwrap();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..pred.numel() {
        let mut p = pred.clone();
        p.data_mut()[i] += eps;
        let plus = soft_dice(&p, target, smooth).unwrap().0;
        p.data_mut()[i] -= 2.0 * eps;
        let minus = soft_dice(&p, target, smooth).unwrap().0;
        let num = (plus - minus) / (2.0 * eps);
        let a = g.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

proptest! {
    #[test]
    fn soft_dice_gradient(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7, smooth in prop_oneof![Just(1.0), Just(0.1), 0.5f64..2.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_mask(h, w, 0.4, &mut rng);
        let pred = Tensor::<f64>::rand_uniform(&[h, w], 0.05, 0.95, &mut rng).unwrap();
        prop_assert!(finite_difference_check(&pred, &target, smooth) < 1e-6);
    }

    #[test]
    fn iou_dice_identity(seed in 0u64..10_000, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(1, n, 0.5, &mut rng);
        let b = random_mask(1, n, 0.3, &mut rng);
        let i = iou(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
    }
}

#[test]
fn batch_loss_is_mean_of_per_image_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets: Vec<BinaryMask> = (0..3).map(|_| random_mask(5, 6, 0.3, &mut rng)).collect();
    let prob = Tensor::<f64>::rand_uniform(&[3, 1, 5, 6], 0.0, 1.0, &mut rng).unwrap();
    let (loss, grad) = batch_dice_loss(&prob, &targets, 1.0).unwrap();
    let mut want = 0.0;
    for (b, t) in targets.iter().enumerate() {
        let (l, g) = dice_loss(&prob.index_axis0(b), t, 1.0).unwrap();
        want += l / 3.0;
        for (x, y) in g.data().iter().zip(grad.index_axis0(b).data()) {
            assert!((x / 3.0 - y).abs() < 1e-15);
        }
    }
    assert!((loss - want).abs() < 1e-15);
    assert!(batch_dice_loss(&prob, &targets[..2], 1.0).is_err());
}

#[test]
fn perfect_and_disjoint_losses() {
    let t = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    assert_eq!(dice_loss(&t.to_tensor::<f64>(), &t, 0.0).unwrap().0, 0.0);
    let other = BinaryMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    assert_eq!(dice_loss(&other.to_tensor::<f64>(), &t, 0.0).unwrap().0, 1.0);
    // empty prediction on empty target is perfect once smoothed
    let e = BinaryMask::empty(2, 2);
    assert_eq!(soft_dice(&e.to_tensor::<f64>(), &e, 1.0).unwrap().0, 1.0);
}

#[test]
fn network_total_loss() {
    use angioseg::model::{build_network, ModelConfig};
    let p = build_network::<f64>(&ModelConfig { base_channels: 8, ..ModelConfig::new(1, 32, 32) }).unwrap();
    assert_eq!(total_loss(0.3, &p, 0.0), 0.3);
    let sq: f64 = p
        .tensors()
        .iter()
        .filter(|(k, _)| k.ends_with(".weight"))
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    assert!((total_loss(0.3, &p, 0.1) - (0.3 + 0.05 * sq)).abs() < 1e-9);
    let mut q = p.clone();
    q.tensors_mut().get_mut("final.conv3.weight").unwrap().data_mut()[0] *= 2.0;
    assert!(total_loss(0.3, &q, 0.1) >= total_loss(0.3, &p, 0.1));
}

#[test]
fn binarize_boundaries() {
    let p = Tensor::<f32>::from_vec(&[2, 2], vec![0.5, 0.49999, 1.0, 0.0]).unwrap();
    assert_eq!(binarize(&p, 0.5).unwrap().data(), &[1, 0, 1, 0]);
    let nan = Tensor::<f32>::full(&[1, 1], f32::NAN).unwrap();
    assert!(binarize(&nan, 0.5).is_err());
}

#[test]
fn report_columns() {
    let t = BinaryMask::new(1, 3, vec![1, 1, 0]).unwrap();
    let p = BinaryMask::new(1, 3, vec![1, 0, 0]).unwrap();
    let r = MetricsRecord::new("clip7", 4, &p, &t).unwrap();
    let text = format_report(&[r]);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "clip_id,frame_index,iou,sensitivity,specificity,dice");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[..2], ["clip7", "4"]);
    let vals: Vec<f64> = row[2..].iter().map(|v| v.parse().unwrap()).collect();
    assert!((vals[0] - 0.5).abs() < 1e-6 && (vals[1] - 0.5).abs() < 1e-6);
    assert!((vals[2] - 1.0).abs() < 1e-6 && (vals[3] - 2.0 / 3.0).abs() < 1e-6);
}
