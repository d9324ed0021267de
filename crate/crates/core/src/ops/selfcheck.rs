//! Randomized finite-difference checks of every differentiable operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    gradcheck, AddOp, ConcatOp, Conv2d, Conv3d, ConvSpec, ConvTranspose2d, DifferentiableOp, GradcheckReport,
    InstanceNorm, MaxPool2d, PoolSpec, Relu, Sigmoid, UpsampleBilinear,
};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step used by [`op_gradcheck_suite`].
pub const SUITE_EPS: f64 = 1e-5;
/// Largest tensor extent drawn by the suite.
pub const MAX_DIM: usize = 8;

/// Worst result over all randomized cases of one operator.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub report: GradcheckReport,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi.min(MAX_DIM))
}

/// Operator and inputs of one randomized case.
type Case = (Box<dyn DifferentiableOp<f64>>, Vec<Tensor<f64>>);

fn conv2d_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let k = rng.random_range(1..=3usize);
    let stride = rng.random_range(1..=2usize);
    let dil = rng.random_range(1..=2usize);
    let pad = rng.random_range(0..=k / 2 * dil);
    let span = dil * (k - 1) + 1;
    let h = dim(rng, span.saturating_sub(2 * pad).max(1), MAX_DIM);
    let w = dim(rng, span.saturating_sub(2 * pad).max(1), MAX_DIM);
    let bias = if rng.random_bool(0.5) { Some(randn(&[cout], rng)?) } else { None };
    let op = Conv2d::new(randn(&[cout, cin, k, k], rng)?, bias, ConvSpec::uniform(stride, pad, dil));
    Ok((Box::new(op), vec![randn(&[b, cin, h, w], rng)?]))
}

fn conv3d_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
    let kd = 2 * rng.random_range(0..=2usize) + 1;
    let d = dim(rng, kd, MAX_DIM);
    let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
    let bias = Some(randn(&[cout], rng)?);
    let op = Conv3d::new(randn(&[cout, cin, kd, 3, 3], rng)?, bias, ConvSpec::new([1, 1, 1], [0, 1, 1], [1, 1, 1]));
    Ok((Box::new(op), vec![randn(&[b, cin, d, h, w], rng)?]))
}

fn transpose_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
    let (k, stride, pad, opad) = if rng.random_bool(0.5) { (3, 2, 1, 1) } else { (4, 2, 1, 0) };
    let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let bias = if rng.random_bool(0.5) { Some(randn(&[cout], rng)?) } else { None };
    let spec = ConvSpec::uniform(stride, pad, 1).with_output_padding([opad, opad]);
    let op = ConvTranspose2d::new(randn(&[cin, cout, k, k], rng)?, bias, spec);
    Ok((Box::new(op), vec![randn(&[b, cin, h, w], rng)?]))
}

fn map_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 2, MAX_DIM), dim(rng, 2, MAX_DIM)]
}

fn norm_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    let op = InstanceNorm::new(randn(&[s[1]], rng)?, randn(&[s[1]], rng)?);
    Ok((Box::new(op), vec![randn(&s, rng)?]))
}

fn pool_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    let k = rng.random_range(2..=3usize).min(s[2]).min(s[3]);
    let stride = rng.random_range(1..=2usize);
    let pad = rng.random_range(0..=k / 2);
    Ok((Box::new(MaxPool2d::new(PoolSpec::new(k, stride, pad))), vec![randn(&s, rng)?]))
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    let (oh, ow) = (dim(rng, 1, MAX_DIM), dim(rng, 1, MAX_DIM));
    Ok((Box::new(UpsampleBilinear::new(oh, ow)), vec![randn(&s, rng)?]))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    Ok((Box::new(Relu::new()), vec![randn(&s, rng)?]))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    Ok((Box::new(Sigmoid::new()), vec![randn(&s, rng)?.map(|v| 3.0 * v)]))
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    Ok((Box::new(AddOp::new()), vec![randn(&s, rng)?, randn(&s, rng)?]))
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = map_shape(rng);
    let c2 = dim(rng, 1, 4);
    Ok((
        Box::new(ConcatOp::new()),
        vec![randn(&s, rng)?, randn(&[s[0], c2, s[2], s[3]], rng)?],
    ))
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<Case>;

const CASES: &[(&str, CaseFn)] = &[
    ("conv2d", conv2d_case),
    ("conv3d", conv3d_case),
    ("conv_transpose2d", transpose_case),
    ("instance_norm", norm_case),
    ("maxpool2d", pool_case),
    ("upsample_bilinear", upsample_case),
    ("relu", relu_case),
    ("sigmoid", sigmoid_case),
    ("add", add_case),
    ("concat", concat_case),
];

/// Runs `cases` randomized gradchecks (64-bit, every extent at most
/// [`MAX_DIM`]) for every operator and reports the worst error per operator.
pub fn op_gradcheck_suite(seed: u64, cases: usize) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (k, &(op, make)) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 0x1000_0001));
        let mut worst: Option<GradcheckReport> = None;
        for _ in 0..cases {
            let (mut layer, inputs) = make(&mut rng)?;
            let r = gradcheck(layer.as_mut(), &inputs, SUITE_EPS)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        if let Some(report) = worst {
            out.push(OpCheck { op, cases, report });
        }
    }
    Ok(out)
}
