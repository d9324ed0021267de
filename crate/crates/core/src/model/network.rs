//! Forward and backward passes of the 3D-2D CE-Net.
//!
//! Each stage returns its output plus a cache holding exactly what its
//! backward pass needs. Backward functions accumulate parameter gradients
//! into a shared map under the same names the forward read.

use super::config::{ModelConfig, DAC_DILATIONS, PYRAMID_POOLS, STAGE_BLOCKS};
use super::params::{block_has_downsample, block_io, block_prefix, NetworkParams};
use crate::error::{Error, Result};
use crate::ops::{
    add_forward, concat_channels_backward, concat_channels_forward, conv2d_backward, conv2d_forward,
    conv3d_backward, conv3d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    instance_norm_backward, instance_norm_forward, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, upsample_bilinear_backward,
    upsample_bilinear_forward, ConvSpec, NormCache, ParamMap, PoolIndices, PoolSpec,
    INSTANCE_NORM_EPS,
};
use crate::tensor::{Scalar, Tensor};

fn conv<T: Scalar>(p: &NetworkParams<T>, name: &str, x: &Tensor<T>, spec: &ConvSpec<2>) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.weight"))?;
    conv2d_forward(x, w, p.tensors().get(&format!("{name}.bias")), spec)
}

fn store<T: Scalar>(grads: &mut ParamMap<T>, p: &NetworkParams<T>, name: &str, mut g: ParamMap<T>, keys: &[&str]) {
    for key in keys {
        let full = format!("{name}.{key}");
        if p.tensors().contains_key(&full) {
            let t = g.remove(*key).expect("operator gradient missing");
            grads.insert(full, t);
        }
    }
}

fn conv_back<T: Scalar>(
    p: &NetworkParams<T>,
    name: &str,
    x: &Tensor<T>,
    spec: &ConvSpec<2>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let gp = conv2d_backward(x, p.get(&format!("{name}.weight"))?, spec, g)?;
    store(grads, p, name, gp.param_grads, &["weight", "bias"]);
    Ok(gp.input_grad)
}

fn deconv<T: Scalar>(p: &NetworkParams<T>, name: &str, x: &Tensor<T>, spec: &ConvSpec<2>) -> Result<Tensor<T>> {
    let w = p.get(&format!("{name}.weight"))?;
    conv_transpose2d_forward(x, w, p.tensors().get(&format!("{name}.bias")), spec)
}

fn deconv_back<T: Scalar>(
    p: &NetworkParams<T>,
    name: &str,
    x: &Tensor<T>,
    spec: &ConvSpec<2>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let gp = conv_transpose2d_backward(x, p.get(&format!("{name}.weight"))?, spec, g)?;
    store(grads, p, name, gp.param_grads, &["weight", "bias"]);
    Ok(gp.input_grad)
}

fn norm<T: Scalar>(p: &NetworkParams<T>, name: &str, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
    instance_norm_forward(
        x,
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        INSTANCE_NORM_EPS,
    )
}

fn norm_back<T: Scalar>(
    p: &NetworkParams<T>,
    name: &str,
    cache: &NormCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let gp = instance_norm_backward(cache, p.get(&format!("{name}.gamma"))?, g)?;
    store(grads, p, name, gp.param_grads, &["gamma", "beta"]);
    Ok(gp.input_grad)
}

fn accumulate<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.axpy(T::one(), b)
}

/// conv -> instance norm -> ReLU.
#[derive(Clone, Debug)]
struct UnitCache<T: Scalar> {
    input: Tensor<T>,
    norm: NormCache<T>,
    out: Tensor<T>,
}

struct Unit<'a> {
    conv: &'a str,
    norm: &'a str,
    spec: ConvSpec<2>,
    transposed: bool,
}

impl Unit<'_> {
    fn forward<T: Scalar>(&self, p: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, UnitCache<T>)> {
        let y = if self.transposed {
            deconv(p, self.conv, x, &self.spec)?
        } else {
            conv(p, self.conv, x, &self.spec)?
        };
        let (n, norm) = norm(p, self.norm, &y)?;
        let out = relu_forward(&n);
        Ok((
            out.clone(),
            UnitCache {
                input: x.clone(),
                norm,
                out,
            },
        ))
    }

    fn backward<T: Scalar>(
        &self,
        p: &NetworkParams<T>,
        c: &UnitCache<T>,
        g: &Tensor<T>,
        grads: &mut ParamMap<T>,
    ) -> Result<Tensor<T>> {
        let g = relu_backward(&c.out, g)?;
        let g = norm_back(p, self.norm, &c.norm, &g, grads)?;
        if self.transposed {
            deconv_back(p, self.conv, &c.input, &self.spec, &g, grads)
        } else {
            conv_back(p, self.conv, &c.input, &self.spec, &g, grads)
        }
    }
}

// ---------------------------------------------------------------- fusion

fn temporal_spec() -> ConvSpec<3> {
    ConvSpec::new([1, 1, 1], [0, 1, 1], [1, 1, 1])
}

#[derive(Clone, Debug)]
pub struct FusionCache<T: Scalar> {
    frames: Tensor<T>,
    mix: UnitCache<T>,
}

fn check_frames<T: Scalar>(frames: &Tensor<T>, config: &ModelConfig) -> Result<()> {
    let s = frames.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "frames must be [B, 1, 2N+1, H, W], got {s:?}"
        )));
    }
    if s[2] != config.window() {
        return Err(Error::shape(format!(
            "expected {} frames (N={}), got {}",
            config.window(),
            config.n,
            s[2]
        )));
    }
    if s[3] != config.height || s[4] != config.width {
        return Err(Error::shape(format!(
            "frames are {}x{}, network expects {}x{}",
            s[3], s[4], config.height, config.width
        )));
    }
    Ok(())
}

const MIX: Unit<'static> = Unit {
    conv: "fusion.mix",
    norm: "fusion.norm",
    spec: ConvSpec {
        stride: [1, 1],
        padding: [1, 1],
        dilation: [1, 1],
        output_padding: [0, 0],
    },
    transposed: false,
};

/// Collapses `2N+1` frames into `fused_channels` 2D feature maps:
/// temporal 3D conv (no temporal padding), squeeze, 3x3 mixing conv, norm, ReLU.
pub fn fusion_forward<T: Scalar>(frames: &Tensor<T>, p: &NetworkParams<T>) -> Result<(Tensor<T>, FusionCache<T>)> {
    check_frames(frames, p.config())?;
    let vol = conv3d_forward(
        frames,
        p.get("fusion.temporal.weight")?,
        Some(p.get("fusion.temporal.bias")?),
        &temporal_spec(),
    )?;
    let maps = vol.squeeze_axis(2)?;
    let (out, mix) = MIX.forward(p, &maps)?;
    Ok((
        out,
        FusionCache {
            frames: frames.clone(),
            mix,
        },
    ))
}

fn fusion_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &FusionCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let g = MIX.backward(p, &c.mix, g, grads)?;
    let g = g.unsqueeze_axis(2)?;
    let gp = conv3d_backward(&c.frames, p.get("fusion.temporal.weight")?, &temporal_spec(), &g)?;
    store(grads, p, "fusion.temporal", gp.param_grads, &["weight", "bias"]);
    Ok(gp.input_grad)
}

// ---------------------------------------------------------------- encoder

fn conv3x3(stride: usize) -> ConvSpec<2> {
    ConvSpec::uniform(stride, 1, 1)
}

#[derive(Clone, Debug)]
struct BlockCache<T: Scalar> {
    input: Tensor<T>,
    first: UnitCache<T>,
    conv2_out_norm: NormCache<T>,
    down: Option<NormCache<T>>,
    out: Tensor<T>,
}

struct Block {
    prefix: String,
    stride: usize,
    downsample: bool,
}

impl Block {
    fn new(config: &ModelConfig, stage: usize, block: usize) -> Self {
        let (cin, cout, stride) = block_io(config, stage, block);
        Block {
            prefix: block_prefix(stage, block),
            stride,
            downsample: block_has_downsample(cin, cout, stride),
        }
    }

    fn names(&self) -> [String; 6] {
        let p = &self.prefix;
        [
            format!("{p}.conv1"),
            format!("{p}.norm1"),
            format!("{p}.conv2"),
            format!("{p}.norm2"),
            format!("{p}.downsample.conv"),
            format!("{p}.downsample.norm"),
        ]
    }

    fn forward<T: Scalar>(&self, p: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let [c1, n1, c2, n2, dc, dn] = self.names();
        let unit = Unit {
            conv: &c1,
            norm: &n1,
            spec: conv3x3(self.stride),
            transposed: false,
        };
        let (h, first) = unit.forward(p, x)?;
        let (mut main, conv2_out_norm) = norm(p, &n2, &conv(p, &c2, &h, &conv3x3(1))?)?;
        let down = if self.downsample {
            let (s, cache) = norm(p, &dn, &conv(p, &dc, x, &ConvSpec::uniform(self.stride, 0, 1))?)?;
            accumulate(&mut main, &s)?;
            Some(cache)
        } else {
            accumulate(&mut main, x)?;
            None
        };
        let out = relu_forward(&main);
        Ok((
            out.clone(),
            BlockCache {
                input: x.clone(),
                first,
                conv2_out_norm,
                down,
                out,
            },
        ))
    }

    fn backward<T: Scalar>(
        &self,
        p: &NetworkParams<T>,
        c: &BlockCache<T>,
        g: &Tensor<T>,
        grads: &mut ParamMap<T>,
    ) -> Result<Tensor<T>> {
        let [c1, n1, c2, n2, dc, dn] = self.names();
        let g = relu_backward(&c.out, g)?;
        let gm = norm_back(p, &n2, &c.conv2_out_norm, &g, grads)?;
        let gm = conv_back(p, &c2, &c.first.out, &conv3x3(1), &gm, grads)?;
        let unit = Unit {
            conv: &c1,
            norm: &n1,
            spec: conv3x3(self.stride),
            transposed: false,
        };
        let mut gx = unit.backward(p, &c.first, &gm, grads)?;
        match &c.down {
            Some(cache) => {
                let gs = norm_back(p, &dn, cache, &g, grads)?;
                let gs = conv_back(p, &dc, &c.input, &ConvSpec::uniform(self.stride, 0, 1), &gs, grads)?;
                accumulate(&mut gx, &gs)?;
            }
            None => accumulate(&mut gx, &g)?,
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T: Scalar> {
    stem: UnitCache<T>,
    pool: PoolIndices,
    stages: Vec<Vec<BlockCache<T>>>,
}

const STEM: Unit<'static> = Unit {
    conv: "encoder.stem.conv",
    norm: "encoder.stem.norm",
    spec: ConvSpec {
        stride: [2, 2],
        padding: [3, 3],
        dilation: [1, 1],
        output_padding: [0, 0],
    },
    transposed: false,
};

fn stem_pool() -> PoolSpec {
    PoolSpec::new(3, 2, 1)
}

/// Deepest features, the four stage outputs and the cache.
pub type EncoderOutput<T> = (Tensor<T>, [Tensor<T>; 4], EncoderCache<T>);

/// Stem (7x7/2 conv, 3x3/2 max-pool) followed by four residual stages.
/// Returns the deepest features and the four stage outputs (skips).
pub fn encoder_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &NetworkParams<T>,
) -> Result<EncoderOutput<T>> {
    let (s, stem) = STEM.forward(p, x)?;
    let (mut h, pool) = maxpool2d_forward(&s, &stem_pool())?;
    let mut stages = Vec::with_capacity(4);
    let mut skips = Vec::with_capacity(4);
    for (stage, &blocks) in STAGE_BLOCKS.iter().enumerate() {
        let mut caches = Vec::with_capacity(blocks);
        for block in 0..blocks {
            let (out, cache) = Block::new(p.config(), stage, block).forward(p, &h)?;
            h = out;
            caches.push(cache);
        }
        skips.push(h.clone());
        stages.push(caches);
    }
    let skips: [Tensor<T>; 4] = skips.try_into().expect("four stages");
    Ok((h, skips, EncoderCache { stem, pool, stages }))
}

/// `skip_grads[i]` is the gradient arriving at stage `i`'s output from the
/// decoder; the deepest stage also receives `g_bottleneck`.
fn encoder_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &EncoderCache<T>,
    g_bottleneck: Tensor<T>,
    skip_grads: [Option<Tensor<T>>; 4],
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let mut g = g_bottleneck;
    for stage in (0..4).rev() {
        if let Some(sg) = &skip_grads[stage] {
            accumulate(&mut g, sg)?;
        }
        for block in (0..STAGE_BLOCKS[stage]).rev() {
            g = Block::new(p.config(), stage, block).backward(p, &c.stages[stage][block], &g, grads)?;
        }
    }
    let g = maxpool2d_backward(&c.pool, &g)?;
    STEM.backward(p, &c.stem, &g, grads)
}

// ---------------------------------------------------------------- bottleneck

#[derive(Clone, Debug)]
pub struct DacCache<T: Scalar> {
    /// Input of each cascade conv, then the cascade output before ReLU.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each branch.
    branches: Vec<Tensor<T>>,
}

fn dac_layers() -> Vec<(String, ConvSpec<2>)> {
    let mut v: Vec<_> = DAC_DILATIONS
        .iter()
        .map(|&d| (format!("dac.dilate{d}"), ConvSpec::uniform(1, d, d)))
        .collect();
    v.push(("dac.project".to_string(), ConvSpec::default()));
    v
}

/// Dense atrous convolution: a cascade of 3x3 convs with dilations 1, 3, 5
/// and a final 1x1 projection. Branch `i` is the cascade truncated after
/// layer `i`; the output is the input plus the ReLU of every branch.
/// Padding equals dilation so every branch preserves the spatial size.
pub fn dac_forward<T: Scalar>(x: &Tensor<T>, p: &NetworkParams<T>) -> Result<(Tensor<T>, DacCache<T>)> {
    let mut out = x.clone();
    let mut inputs = Vec::new();
    let mut branches = Vec::new();
    let mut h = x.clone();
    for (name, spec) in dac_layers() {
        let y = conv(p, &name, &h, &spec)?;
        accumulate(&mut out, &relu_forward(&y))?;
        inputs.push(h);
        h = y.clone();
        branches.push(y);
    }
    Ok((out, DacCache { inputs, branches }))
}

fn dac_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &DacCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let layers = dac_layers();
    let mut carry: Option<Tensor<T>> = None;
    for i in (0..layers.len()).rev() {
        let mut gy = relu_backward(&relu_forward(&c.branches[i]), g)?;
        if let Some(cg) = &carry {
            accumulate(&mut gy, cg)?;
        }
        let (name, spec) = &layers[i];
        carry = Some(conv_back(p, name, &c.inputs[i], spec, &gy, grads)?);
    }
    let mut gx = g.clone();
    accumulate(&mut gx, &carry.expect("non-empty cascade"))?;
    Ok(gx)
}

#[derive(Clone, Debug)]
pub struct RmpCache<T: Scalar> {
    in_channels: usize,
    branches: Vec<(PoolIndices, Tensor<T>, [usize; 4])>,
}

/// Pool window actually used for a nominal size: clamped to the feature map
/// so small inputs pool globally instead of failing.
pub fn rmp_window(nominal: usize, h: usize, w: usize) -> PoolSpec {
    let (kh, kw) = (nominal.min(h), nominal.min(w));
    PoolSpec {
        kernel: [kh, kw],
        stride: [kh, kw],
        padding: [0, 0],
    }
}

/// Residual multi-kernel pooling: max-pools of size 2, 3, 5, 6 (stride =
/// size), each squeezed to one channel by a 1x1 conv, upsampled back and
/// concatenated after the input. `(B, C, H, W) -> (B, C + 4, H, W)`.
pub fn rmp_forward<T: Scalar>(x: &Tensor<T>, p: &NetworkParams<T>) -> Result<(Tensor<T>, RmpCache<T>)> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("rmp input must be 4-d, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut maps = Vec::with_capacity(PYRAMID_POOLS.len());
    let mut branches = Vec::with_capacity(PYRAMID_POOLS.len());
    for k in PYRAMID_POOLS {
        let (pooled, idx) = maxpool2d_forward(x, &rmp_window(k, h, w))?;
        let c = conv(p, &format!("rmp.pool{k}"), &pooled, &ConvSpec::default())?;
        let cshape: [usize; 4] = c.shape().try_into().expect("4-d");
        maps.push(upsample_bilinear_forward(&c, h, w)?);
        branches.push((idx, pooled, cshape));
    }
    let mut parts: Vec<&Tensor<T>> = vec![x];
    parts.extend(maps.iter());
    let out = concat_channels_forward(&parts)?;
    Ok((
        out,
        RmpCache {
            in_channels: x.shape()[1],
            branches,
        },
    ))
}

fn rmp_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &RmpCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let mut channels = vec![c.in_channels];
    channels.extend(std::iter::repeat_n(1, PYRAMID_POOLS.len()));
    let mut parts = concat_channels_backward(g, &channels)?.into_iter();
    let mut gx = parts.next().expect("input part");
    for ((k, (idx, pooled, cshape)), gu) in PYRAMID_POOLS.iter().zip(&c.branches).zip(parts) {
        let gc = upsample_bilinear_backward(cshape, &gu)?;
        let gpool = conv_back(p, &format!("rmp.pool{k}"), pooled, &ConvSpec::default(), &gc, grads)?;
        accumulate(&mut gx, &maxpool2d_backward(idx, &gpool)?)?;
    }
    Ok(gx)
}

// ---------------------------------------------------------------- decoder

#[derive(Clone, Debug)]
struct DecoderBlockCache<T: Scalar> {
    units: [UnitCache<T>; 3],
}

fn decoder_units(prefix: &str) -> [(String, String, ConvSpec<2>, bool); 3] {
    [
        (format!("{prefix}.reduce"), format!("{prefix}.norm1"), ConvSpec::default(), false),
        (
            format!("{prefix}.up"),
            format!("{prefix}.norm2"),
            ConvSpec::uniform(2, 1, 1).with_output_padding([1, 1]),
            true,
        ),
        (format!("{prefix}.expand"), format!("{prefix}.norm3"), ConvSpec::default(), false),
    ]
}

fn decoder_block_forward<T: Scalar>(
    p: &NetworkParams<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, DecoderBlockCache<T>)> {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(3);
    for (c, n, spec, transposed) in decoder_units(prefix) {
        let unit = Unit {
            conv: &c,
            norm: &n,
            spec,
            transposed,
        };
        let (out, cache) = unit.forward(p, &h)?;
        h = out;
        caches.push(cache);
    }
    Ok((
        h,
        DecoderBlockCache {
            units: caches.try_into().expect("three units"),
        },
    ))
}

fn decoder_block_backward<T: Scalar>(
    p: &NetworkParams<T>,
    prefix: &str,
    c: &DecoderBlockCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let mut g = g.clone();
    for (i, (cn, nn, spec, transposed)) in decoder_units(prefix).into_iter().enumerate().rev() {
        let unit = Unit {
            conv: &cn,
            norm: &nn,
            spec,
            transposed,
        };
        g = unit.backward(p, &c.units[i], &g, grads)?;
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T: Scalar> {
    blocks: Vec<DecoderBlockCache<T>>,
    final_in: Tensor<T>,
    out: Tensor<T>,
    /// Spatial size of each decoder stage output, deepest first.
    pub stage_sizes: Vec<[usize; 2]>,
}

const FINAL_UP: ConvSpec<2> = ConvSpec {
    stride: [2, 2],
    padding: [1, 1],
    dilation: [1, 1],
    output_padding: [0, 0],
};

/// Four decoder blocks, the first three summed with the matching encoder
/// skip, then a 4x4 stride-2 transposed conv + ReLU back to input resolution.
///
/// `skips` are the encoder stage outputs in encoder order; the deepest is
/// not consumed here (it fed the bottleneck).
pub fn decoder_forward<T: Scalar>(
    bottleneck: &Tensor<T>,
    skips: &[Tensor<T>; 4],
    p: &NetworkParams<T>,
) -> Result<(Tensor<T>, DecoderCache<T>)> {
    let mut h = bottleneck.clone();
    let mut blocks = Vec::with_capacity(4);
    let mut stage_sizes = Vec::with_capacity(4);
    for i in 0..4 {
        let prefix = format!("decoder{}", 4 - i);
        let (mut out, cache) = decoder_block_forward(p, &prefix, &h)?;
        if i < 3 {
            let skip = &skips[2 - i];
            if skip.shape() != out.shape() {
                return Err(Error::shape(format!(
                    "{prefix}: output {:?} does not match encoder stage {} skip {:?}",
                    out.shape(),
                    3 - i,
                    skip.shape()
                )));
            }
            out = add_forward(&out, skip)?;
        }
        stage_sizes.push([out.shape()[2], out.shape()[3]]);
        blocks.push(cache);
        h = out;
    }
    let out = relu_forward(&deconv(p, "final.up", &h, &FINAL_UP)?);
    Ok((
        out.clone(),
        DecoderCache {
            blocks,
            final_in: h,
            out,
            stage_sizes,
        },
    ))
}

/// Bottleneck gradient and the gradients reaching the skips.
type DecoderGrads<T> = (Tensor<T>, [Option<Tensor<T>>; 4]);

/// Returns the bottleneck gradient and the gradients reaching skips 0..=2.
fn decoder_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &DecoderCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<DecoderGrads<T>> {
    let g = relu_backward(&c.out, g)?;
    let mut g = deconv_back(p, "final.up", &c.final_in, &FINAL_UP, &g, grads)?;
    let mut skip_grads: [Option<Tensor<T>>; 4] = [None, None, None, None];
    for i in (0..4).rev() {
        if i < 3 {
            skip_grads[2 - i] = Some(g.clone());
        }
        g = decoder_block_backward(p, &format!("decoder{}", 4 - i), &c.blocks[i], &g, grads)?;
    }
    Ok((g, skip_grads))
}

// ---------------------------------------------------------------- head + full network

#[derive(Clone, Debug)]
struct HeadCache<T: Scalar> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    prob: Tensor<T>,
}

fn head_forward<T: Scalar>(p: &NetworkParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
    let hidden = relu_forward(&conv(p, "final.conv2", x, &conv3x3(1))?);
    let prob = sigmoid_forward(&conv(p, "final.conv3", &hidden, &conv3x3(1))?);
    Ok((
        prob.clone(),
        HeadCache {
            input: x.clone(),
            hidden,
            prob,
        },
    ))
}

fn head_backward<T: Scalar>(
    p: &NetworkParams<T>,
    c: &HeadCache<T>,
    g: &Tensor<T>,
    grads: &mut ParamMap<T>,
) -> Result<Tensor<T>> {
    let g = sigmoid_backward(&c.prob, g)?;
    let g = conv_back(p, "final.conv3", &c.hidden, &conv3x3(1), &g, grads)?;
    let g = relu_backward(&c.hidden, &g)?;
    conv_back(p, "final.conv2", &c.input, &conv3x3(1), &g, grads)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    config: ModelConfig,
    fusion: FusionCache<T>,
    encoder: EncoderCache<T>,
    skip_shapes: [Vec<usize>; 4],
    dac: DacCache<T>,
    rmp: RmpCache<T>,
    decoder: DecoderCache<T>,
    head: HeadCache<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Shapes of the four encoder stage outputs.
    pub fn skip_shapes(&self) -> &[Vec<usize>; 4] {
        &self.skip_shapes
    }

    /// Spatial sizes of the decoder stage outputs, deepest first.
    pub fn decoder_stage_sizes(&self) -> &[[usize; 2]] {
        &self.decoder.stage_sizes
    }
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    pub params: ParamMap<T>,
    /// Gradient w.r.t. the input frames (not used for training).
    pub frames: Tensor<T>,
}

/// Full forward pass: `frames [B, 1, 2N+1, H, W]` to a probability mask
/// `[B, 1, H, W]` for the central frame.
pub fn forward<T: Scalar>(frames: &Tensor<T>, p: &NetworkParams<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let (fused, fusion) = fusion_forward(frames, p)?;
    let (deep, skips, encoder) = encoder_forward(&fused, p)?;
    let (d, dac) = dac_forward(&deep, p)?;
    let (r, rmp) = rmp_forward(&d, p)?;
    let (dec, decoder) = decoder_forward(&r, &skips, p)?;
    let (prob, head) = head_forward(p, &dec)?;
    let skip_shapes = skips.map(|s| s.shape().to_vec());
    Ok((
        prob,
        ForwardTrace {
            config: *p.config(),
            fusion,
            encoder,
            skip_shapes,
            dac,
            rmp,
            decoder,
            head,
        },
    ))
}

/// Backpropagates `grad_mask` (gradient w.r.t. the probability mask) through
/// the traced forward pass.
pub fn backward<T: Scalar>(trace: &ForwardTrace<T>, p: &NetworkParams<T>, grad_mask: &Tensor<T>) -> Result<Gradients<T>> {
    if trace.config != *p.config() {
        return Err(Error::invalid(
            "trace was recorded with a different network config than these params",
        ));
    }
    if grad_mask.shape() != trace.head.prob.shape() {
        return Err(Error::shape(format!(
            "grad_mask {:?} does not match mask shape {:?}",
            grad_mask.shape(),
            trace.head.prob.shape()
        )));
    }
    let mut grads = ParamMap::new();
    let g = head_backward(p, &trace.head, grad_mask, &mut grads)?;
    let (g, skip_grads) = decoder_backward(p, &trace.decoder, &g, &mut grads)?;
    let g = rmp_backward(p, &trace.rmp, &g, &mut grads)?;
    let g = dac_backward(p, &trace.dac, &g, &mut grads)?;
    let g = encoder_backward(p, &trace.encoder, g, skip_grads, &mut grads)?;
    let frames = fusion_backward(p, &trace.fusion, &g, &mut grads)?;
    if grads.len() != p.tensors().len() {
        return Err(Error::invalid(format!(
            "backward produced {} gradients for {} parameters",
            grads.len(),
            p.tensors().len()
        )));
    }
    Ok(Gradients { params: grads, frames })
}
