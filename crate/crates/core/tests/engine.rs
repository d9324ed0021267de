mod common;

use angioseg::ops::*;
use angioseg::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d_matches_naive_oracle_bit_exactly() {
    let mut r = rng(1);
    for _ in 0..40 {
        let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(3..12), r.random_range(3..12));
        let k = r.random_range(1..4);
        let spec = ConvSpec::uniform(r.random_range(1..3), r.random_range(0..2), r.random_range(1..3));
        let x = dyadic(&[2, cin, h, w], &mut r);
        let wt = dyadic(&[cout, cin, k, k], &mut r);
        let b = dyadic(&[cout], &mut r);
        let Ok(y) = conv2d_forward(&x, &wt, Some(&b), &spec) else { continue };
        let o = naive_conv2d(&x, &wt, Some(&b), spec.stride, spec.padding, spec.dilation);
        assert_eq!(y, o, "spec {spec:?}");
    }
}

#[test]
fn conv3d_fusion_shape_matches_oracle() {
    let mut r = rng(2);
    let x = gaussian(&[1, 1, 5, 6, 6], &mut r);
    let w = gaussian(&[2, 1, 5, 3, 3], &mut r);
    let spec = ConvSpec::<3>::default();
    let y = conv3d_forward(&x, &w, None, &spec).unwrap();
    let o = naive_conv3d(&x, &w, None, [1; 3], [0; 3], [1; 3]);
    assert_eq!(y.shape(), &[1, 2, 1, 4, 4]);
    for (a, b) in y.data().iter().zip(o.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    let xd = dyadic(&[1, 1, 5, 6, 6], &mut r);
    let wd = dyadic(&[2, 1, 5, 3, 3], &mut r);
    assert_eq!(conv3d_forward(&xd, &wd, None, &spec).unwrap(), naive_conv3d(&xd, &wd, None, [1; 3], [0; 3], [1; 3]));
}

#[test]
fn conv3d_zero_kernel_gives_zero() {
    let mut r = rng(3);
    let x = gaussian(&[1, 1, 3, 8, 8], &mut r);
    let w = Tensor::<f64>::zeros(&[16, 1, 3, 3, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[16]).unwrap();
    let spec = ConvSpec::new([1, 1, 1], [0, 1, 1], [1, 1, 1]);
    let y = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
    assert_eq!(y.shape(), &[1, 16, 1, 8, 8]);
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn conv3d_single_voxel_kernel_passes_gradient_through() {
    let mut r = rng(4);
    let x = gaussian(&[1, 1, 3, 5, 5], &mut r);
    let w = Tensor::<f64>::ones(&[1, 1, 1, 1, 1]).unwrap();
    let g = gaussian(&[1, 1, 3, 5, 5], &mut r);
    let grads = conv3d_backward(&x, &w, &ConvSpec::default(), &g).unwrap();
    assert_eq!(grads.input_grad, g);
}

#[test]
fn transpose_matches_scatter_oracle() {
    let mut r = rng(5);
    for _ in 0..30 {
        let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let k = r.random_range(1..5);
        let s = r.random_range(1..3);
        let p = r.random_range(0..2);
        let op = r.random_range(0..s);
        let spec = ConvSpec::uniform(s, p, 1).with_output_padding([op, op]);
        let x = dyadic(&[2, cin, h, w], &mut r);
        let wt = dyadic(&[cin, cout, k, k], &mut r);
        let b = dyadic(&[cout], &mut r);
        let Ok(y) = conv_transpose2d_forward(&x, &wt, Some(&b), &spec) else { continue };
        assert_eq!(y, naive_conv_transpose2d(&x, &wt, Some(&b), s, p, 1, op), "spec {spec:?}");
    }
}

#[test]
fn maxpool_matches_naive_oracle() {
    let mut r = rng(6);
    let x = gaussian(&[2, 3, 12, 12], &mut r);
    let (y, _) = maxpool2d_forward(&x, &PoolSpec::square(5)).unwrap();
    assert_eq!(y, naive_maxpool2d(&x, 5, 5, 0));
    let (y, _) = maxpool2d_forward(&x, &PoolSpec::new(3, 2, 1)).unwrap();
    assert_eq!(y, naive_maxpool2d(&x, 3, 2, 1));
}

fn assert_gradcheck(op: &mut dyn DifferentiableOp<f64>, inputs: &[Tensor<f64>]) {
    let rep = gradcheck(op, inputs, 1e-5).unwrap();
    assert!(
        rep.max_rel_error < 1e-5,
        "{}: max rel err {:e} at {}",
        op.name(),
        rep.max_rel_error,
        rep.worst
    );
}

#[test]
fn conv_ops_pass_gradcheck() {
    let mut r = rng(7);
    let x = gaussian(&[1, 2, 5, 5], &mut r);
    let mut conv = Conv2d::new(gaussian(&[3, 2, 3, 3], &mut r), Some(gaussian(&[3], &mut r)), ConvSpec::uniform(1, 1, 1));
    assert_gradcheck(&mut conv, std::slice::from_ref(&x));
    let mut strided = Conv2d::new(gaussian(&[2, 2, 3, 3], &mut r), None, ConvSpec::uniform(2, 2, 2));
    assert_gradcheck(&mut strided, std::slice::from_ref(&x));

    let x3 = gaussian(&[1, 1, 3, 5, 5], &mut r);
    let mut conv3 = Conv3d::new(
        gaussian(&[2, 1, 3, 3, 3], &mut r),
        Some(gaussian(&[2], &mut r)),
        ConvSpec::new([1, 1, 1], [0, 1, 1], [1, 1, 1]),
    );
    assert_gradcheck(&mut conv3, &[x3]);

    let mut tconv = ConvTranspose2d::new(
        gaussian(&[2, 3, 3, 3], &mut r),
        Some(gaussian(&[3], &mut r)),
        ConvSpec::uniform(2, 1, 1).with_output_padding([1, 1]),
    );
    assert_gradcheck(&mut tconv, &[x]);
}

#[test]
fn other_ops_pass_gradcheck() {
    let mut r = rng(8);
    let x = gaussian(&[2, 3, 6, 6], &mut r);
    let mut norm = InstanceNorm::new(gaussian(&[3], &mut r), gaussian(&[3], &mut r));
    assert_gradcheck(&mut norm, std::slice::from_ref(&x));
    assert_gradcheck(&mut MaxPool2d::new(PoolSpec::new(3, 2, 1)), std::slice::from_ref(&x));
    assert_gradcheck(&mut UpsampleBilinear::new(8, 5), std::slice::from_ref(&x));
    assert_gradcheck(&mut Relu::new(), std::slice::from_ref(&x));
    assert_gradcheck(&mut Sigmoid::new(), std::slice::from_ref(&x));
    let y = gaussian(&[2, 3, 6, 6], &mut r);
    let z = gaussian(&[2, 1, 6, 6], &mut r);
    let add = gradcheck(&mut AddOp::new(), &[x.clone(), y], 1e-5).unwrap();
    assert!(add.max_rel_error < 1e-6, "{}", add.max_rel_error);
    assert_gradcheck(&mut ConcatOp::new(), &[x, z]);
}

/// A convolution whose weight gradient is deliberately scaled wrong.
struct CorruptConv(Conv2d<f64>);

impl DifferentiableOp<f64> for CorruptConv {
    fn name(&self) -> &str {
        "corrupt"
    }
    fn params(&self) -> &ParamMap<f64> {
        self.0.params()
    }
    fn params_mut(&mut self) -> &mut ParamMap<f64> {
        self.0.params_mut()
    }
    fn forward(&self, inputs: &[&Tensor<f64>]) -> angioseg::Result<Tensor<f64>> {
        self.0.forward(inputs)
    }
    fn backward(&self, inputs: &[&Tensor<f64>], g: &Tensor<f64>) -> angioseg::Result<(Vec<Tensor<f64>>, ParamMap<f64>)> {
        let (dx, mut dp) = self.0.backward(inputs, g)?;
        let w = dp.get_mut("weight").unwrap();
        *w = w.map(|v| v * 1.1);
        Ok((dx, dp))
    }
}

#[test]
fn gradcheck_flags_corrupted_backward() {
    let mut r = rng(9);
    let mut op = CorruptConv(Conv2d::new(gaussian(&[2, 1, 3, 3], &mut r), None, ConvSpec::default()));
    let rep = gradcheck(&mut op, &[gaussian(&[1, 1, 5, 5], &mut r)], 1e-5).unwrap();
    assert!(rep.max_rel_error > 1e-2, "{}", rep.max_rel_error);
}

#[test]
fn zero_weights_give_zero_outputs() {
    let mut r = rng(10);
    let x = gaussian(&[1, 2, 6, 6], &mut r);
    let y = conv2d_forward(&x, &Tensor::zeros(&[3, 2, 3, 3]).unwrap(), Some(&Tensor::zeros(&[3]).unwrap()), &ConvSpec::uniform(1, 1, 1)).unwrap();
    assert_eq!(y.max_abs(), 0.0);
    let y = conv_transpose2d_forward(&x, &Tensor::zeros(&[2, 3, 3, 3]).unwrap(), None, &ConvSpec::uniform(2, 1, 1)).unwrap();
    assert_eq!(y.max_abs(), 0.0);
    let (y, _) = instance_norm_forward(&x, &Tensor::zeros(&[2]).unwrap(), &Tensor::zeros(&[2]).unwrap(), INSTANCE_NORM_EPS).unwrap();
    assert_eq!(y.max_abs(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transpose_is_adjoint_of_conv(
        seed in 0u64..1000,
        cin in 1usize..4, cout in 1usize..4,
        h in 4usize..9, w in 4usize..9,
        k in 1usize..4, s in 1usize..3, p in 0usize..2, d in 1usize..3,
    ) {
        let spec = ConvSpec::uniform(s, p, d);
        let mut r = rng(seed);
        let x = gaussian(&[1, cin, h, w], &mut r);
        let wt = gaussian(&[cout, cin, k, k], &mut r);
        let y = conv2d_forward(&x, &wt, None, &spec);
        prop_assume!(y.is_ok());
        let y = y.unwrap();
        let g = gaussian(y.shape(), &mut r);
        let back = conv2d_backward(&x, &wt, &spec, &g).unwrap();
        // Output padding restores the floor lost by the strided forward.
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        let op_h = h + 2 * p - d * (k - 1) - 1 - (oh - 1) * s;
        let op_w = w + 2 * p - d * (k - 1) - 1 - (ow - 1) * s;
        let tspec = spec.with_output_padding([op_h, op_w]);
        let t = conv_transpose2d_forward(&g, &wt, None, &tspec).unwrap();
        prop_assert_eq!(t.shape(), back.input_grad.shape());
        for (a, b) in t.data().iter().zip(back.input_grad.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn maxpool_backward_conserves_mass(seed in 0u64..1000, h in 4usize..12, k in 2usize..4, s in 1usize..4) {
        let mut r = rng(seed);
        let x = dyadic(&[1, 2, h, h], &mut r);
        let (y, idx) = maxpool2d_forward(&x, &PoolSpec { kernel: [k; 2], stride: [s; 2], padding: [0; 2] }).unwrap();
        let g = gaussian(y.shape(), &mut r);
        let dx = maxpool2d_backward(&idx, &g).unwrap();
        prop_assert!((dx.sum() - g.sum()).abs() < 1e-9);
    }
}

#[test]
fn randomized_operator_suite() {
    for seed in [1, 2] {
        let checks = op_gradcheck_suite(seed, 10).unwrap();
        assert_eq!(checks.len(), 10);
        for c in &checks {
            assert!(c.report.checked > 0, "{}", c.op);
            assert!(c.report.max_rel_error < 1e-5, "{}: {:e} at {}", c.op, c.report.max_rel_error, c.report.worst);
        }
    }
}
