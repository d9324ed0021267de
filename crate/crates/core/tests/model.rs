mod common;

use angioseg::model::*;
use angioseg::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn frames(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[batch, 1, cfg.window(), cfg.height, cfg.width], 0.0, 1.0, &mut rng).unwrap()
}

#[test]
fn parameter_counts() {
    let p1 = build_network::<f32>(&ModelConfig::new(1, 64, 64)).unwrap();
    let p2 = build_network::<f32>(&ModelConfig::new(2, 64, 64)).unwrap();
    assert_eq!(p1.count(), 29_004_524);
    assert_eq!(p2.count() - p1.count(), 288);
    assert_eq!(p1.tensors().len(), p2.tensors().len());
    for n in [1, 2] {
        let p = build_network::<f32>(&ModelConfig::new(n, 64, 64)).unwrap();
        assert_eq!(p.get("fusion.temporal.weight").unwrap().shape(), &[16, 1, 2 * n + 1, 3, 3]);
    }
    // resolution does not change the parameter set
    let big = build_network::<f32>(&ModelConfig::new(1, 448, 448)).unwrap();
    assert_eq!(big.count(), p1.count());
}

#[test]
fn mask_shape_at_64() {
    for n in [1, 2] {
        let cfg = ModelConfig::new(n, 64, 64);
        let p = build_network::<f32>(&cfg).unwrap();
        let (prob, _) = forward(&frames(&cfg, 2, 1), &p).unwrap();
        assert_eq!(prob.shape(), &[2, 1, 64, 64]);
        assert!(prob.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn shapes_at_448() {
    for n in [1, 2] {
        let cfg = ModelConfig::new(n, 448, 448);
        let p = build_network::<f32>(&cfg).unwrap();
        let (prob, trace) = forward(&frames(&cfg, 1, 2), &p).unwrap();
        assert_eq!(prob.shape(), &[1, 1, 448, 448]);
        let skips: Vec<usize> = trace.skip_shapes().iter().map(|s| s[2]).collect();
        assert_eq!(skips, vec![112, 56, 28, 14]);
        let chans: Vec<usize> = trace.skip_shapes().iter().map(|s| s[1]).collect();
        assert_eq!(chans, vec![64, 128, 256, 512]);
        let dec: Vec<usize> = trace.decoder_stage_sizes().iter().map(|s| s[0]).collect();
        assert_eq!(dec, vec![28, 56, 112, 224]);
    }
}

#[test]
fn wrong_frame_count_rejected() {
    let cfg = ModelConfig::new(1, 64, 64);
    let p = build_network::<f32>(&cfg).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 1, 5, 64, 64]).unwrap();
    let err = forward(&x, &p).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('5'), "{err}");
    let x = Tensor::<f32>::zeros(&[1, 1, 3, 96, 64]).unwrap();
    assert!(forward(&x, &p).is_err());
}

#[test]
fn invalid_configs_rejected() {
    assert!(build_network::<f32>(&ModelConfig::new(1, 60, 64)).is_err());
    assert!(build_network::<f32>(&ModelConfig { base_channels: 6, ..ModelConfig::new(1, 64, 64) }).is_err());
}

#[test]
fn seeded_init_is_deterministic() {
    let cfg = ModelConfig { seed: 5, ..ModelConfig::new(1, 64, 64) };
    let a = build_network::<f32>(&cfg).unwrap();
    let b = build_network::<f32>(&cfg).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    let c = build_network::<f32>(&ModelConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.get("encoder.stem.conv.weight").unwrap(), c.get("encoder.stem.conv.weight").unwrap());
    let x = frames(&cfg, 1, 3);
    assert_eq!(forward(&x, &a).unwrap().0, forward(&x, &b).unwrap().0);
}

fn small(n: usize, size: usize) -> ModelConfig {
    ModelConfig { base_channels: 8, ..ModelConfig::new(n, size, size) }
}

#[test]
fn dac_with_zero_branches_is_identity() {
    let cfg = small(1, 64);
    let mut p = build_network::<f64>(&cfg).unwrap();
    for (name, t) in p.tensors_mut().iter_mut() {
        if name.starts_with("dac.") {
            *t = Tensor::zeros_like(t);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = common::gaussian(&[2, 64, 2, 2], &mut rng);
    let (y, _) = dac_forward(&x, &p).unwrap();
    assert_eq!(y, x);
}

#[test]
fn rmp_adds_four_channels() {
    let cfg = small(1, 64);
    let p = build_network::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = common::gaussian(&[1, 64, 14, 14], &mut rng);
    let (y, _) = rmp_forward(&x, &p).unwrap();
    assert_eq!(y.shape(), &[1, 68, 14, 14]);
    // input passes through as the first channels
    assert_eq!(&y.data()[..64 * 196], x.data());
    let w = rmp_window(6, 14, 14);
    let out = (14 - w.kernel[0]) / w.stride[0] + 1;
    assert_eq!(out, 2);
    // windows clamp to small maps
    let w = rmp_window(6, 2, 2);
    assert_eq!(w.kernel, [2, 2]);
}

#[test]
fn gradient_keys_and_zero_mask_gradient() {
    let cfg = small(1, 32);
    let p = build_network::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::rand_uniform(&[2, 1, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
    let (prob, trace) = forward(&x, &p).unwrap();
    let g = backward(&trace, &p, &Tensor::zeros_like(&prob)).unwrap();
    assert!(g.params.keys().eq(p.tensors().keys()));
    for (name, t) in &g.params {
        assert_eq!(t.shape(), p.tensors()[name].shape(), "{name}");
        assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
    }
    let ones = Tensor::<f64>::ones(prob.shape()).unwrap();
    let g = backward(&trace, &p, &ones).unwrap();
    assert!(g.params.values().all(|t| t.all_finite()));
    let bad = Tensor::<f64>::ones(&[1, 1, 32, 32]).unwrap();
    assert!(backward(&trace, &p, &bad).is_err());
}

#[test]
fn two_d_baseline_runs() {
    let cfg = small(0, 32);
    let p = build_network::<f32>(&cfg).unwrap();
    assert_eq!(p.get("fusion.temporal.weight").unwrap().shape(), &[16, 1, 1, 3, 3]);
    let (prob, _) = forward(&frames(&cfg, 1, 7), &p).unwrap();
    assert_eq!(prob.shape(), &[1, 1, 32, 32]);
}

fn generic_point(p: &mut NetworkParams<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in p.tensors_mut().iter_mut() {
        if name.ends_with(".beta") || name.ends_with(".bias") {
            *t = common::gaussian(t.shape(), rng).map(|v| 0.1 * v);
        }
    }
}

#[test]
fn whole_network_gradcheck() {
    let cfg = ModelConfig::new(1, 32, 32);
    let mut p = build_network::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // at 32x32 the deepest maps are 1x1, where instance norm outputs exactly
    // beta; zero-initialized betas would then sit on ReLU kinks
    generic_point(&mut p, &mut rng);
    let x = Tensor::<f64>::rand_uniform(&[1, 1, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
    let r = network_gradcheck(&p, &x, 200, 16, 11, &[1e-5, 1e-6, 1e-7]).unwrap();
    assert!(r.checked >= 216, "{}", r.checked);
    assert!(r.max_rel_error < 1e-4, "max rel error {:e} at {}", r.max_rel_error, r.worst);
}

#[test]
fn narrow_network_gradcheck() {
    let cfg = small(1, 32);
    let mut p = build_network::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    generic_point(&mut p, &mut rng);
    let x = Tensor::<f64>::rand_uniform(&[1, 1, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
    let ok = network_gradcheck(&p, &x, 40, 4, 2, &[1e-5, 1e-6, 1e-7]).unwrap();
    assert!(ok.max_rel_error < 1e-4, "{:e} at {}", ok.max_rel_error, ok.worst);
    assert!(network_gradcheck(&p, &x, 4, 0, 2, &[]).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = ModelConfig { seed: 3, ..small(2, 64) };
    let p = build_network::<f32>(&cfg).unwrap();
    let bytes = encode_checkpoint(&p);
    let loaded = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&loaded), bytes);
    assert_eq!(loaded.tensors(), p.tensors());
    assert_eq!(loaded.config().n, 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p, &path).unwrap();
    save_checkpoint(&load_checkpoint(&path).unwrap(), &dir.path().join("m2.ckpt")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("m2.ckpt")).unwrap());
}

#[test]
fn checkpoint_rejections() {
    let p = build_network::<f32>(&small(1, 64)).unwrap();
    let bytes = encode_checkpoint(&p);
    let found = decode_header(&bytes).unwrap();
    let err = ensure_compatible(&found, &small(2, 64)).unwrap_err();
    assert_eq!(err.kind(), "config-mismatch");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = decode_checkpoint(&bad).unwrap_err();
    assert_eq!(err.kind(), "bad-magic");
    assert!(err.to_string().contains("bad magic"));

    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        if cut >= 4 {
            assert_eq!(err.kind(), "truncated", "cut {cut}: {err}");
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}
