use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, DAC_DILATIONS, PYRAMID_POOLS, STAGE_BLOCKS};
use crate::error::{CheckpointError, Error, Result};
use crate::ops::ParamMap;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// He normal with the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        self.push(format!("{name}.weight"), vec![cout, cin, k, k], Init::He(cin * k * k));
        if bias {
            self.push(format!("{name}.bias"), vec![cout], Init::Zeros);
        }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        self.push(format!("{name}.weight"), vec![cin, cout, k, k], Init::He(fan_in));
        if bias {
            self.push(format!("{name}.bias"), vec![cout], Init::Zeros);
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
    }
}

pub(crate) fn block_prefix(stage: usize, block: usize) -> String {
    format!("encoder.layer{}.{block}", stage + 1)
}

pub(crate) fn block_has_downsample(cin: usize, cout: usize, stride: usize) -> bool {
    stride != 1 || cin != cout
}

pub(crate) fn block_io(config: &ModelConfig, stage: usize, block: usize) -> (usize, usize, usize) {
    let ch = config.stage_channels();
    let cout = ch[stage];
    if block == 0 {
        let cin = if stage == 0 { config.base_channels } else { ch[stage - 1] };
        (cin, cout, if stage == 0 { 1 } else { 2 })
    } else {
        (cout, cout, 1)
    }
}

/// `(in, out)` channels of the four decoder blocks, deepest first.
pub(crate) fn decoder_io(config: &ModelConfig) -> [(usize, usize); 4] {
    let ch = config.stage_channels();
    [
        (ch[3] + PYRAMID_POOLS.len(), ch[2]),
        (ch[2], ch[1]),
        (ch[1], ch[0]),
        (ch[0], ch[0]),
    ]
}

pub(crate) fn head_channels(config: &ModelConfig) -> usize {
    config.base_channels / 2
}

fn layout(config: &ModelConfig) -> Layout {
    let mut l = Layout::default();
    let fc = config.fusion_channels;
    l.push(
        "fusion.temporal.weight".into(),
        vec![fc, 1, config.window(), 3, 3],
        Init::He(config.window() * 9),
    );
    l.push("fusion.temporal.bias".into(), vec![fc], Init::Zeros);
    l.conv("fusion.mix", config.fused_channels, fc, 3, false);
    l.norm("fusion.norm", config.fused_channels);

    l.conv("encoder.stem.conv", config.base_channels, config.fused_channels, 7, false);
    l.norm("encoder.stem.norm", config.base_channels);
    for (stage, &blocks) in STAGE_BLOCKS.iter().enumerate() {
        for block in 0..blocks {
            let p = block_prefix(stage, block);
            let (cin, cout, stride) = block_io(config, stage, block);
            l.conv(&format!("{p}.conv1"), cout, cin, 3, false);
            l.norm(&format!("{p}.norm1"), cout);
            l.conv(&format!("{p}.conv2"), cout, cout, 3, false);
            l.norm(&format!("{p}.norm2"), cout);
            if block_has_downsample(cin, cout, stride) {
                l.conv(&format!("{p}.downsample.conv"), cout, cin, 1, false);
                l.norm(&format!("{p}.downsample.norm"), cout);
            }
        }
    }

    let c = config.stage_channels()[3];
    for d in DAC_DILATIONS {
        l.conv(&format!("dac.dilate{d}"), c, c, 3, true);
    }
    l.conv("dac.project", c, c, 1, true);
    for k in PYRAMID_POOLS {
        l.conv(&format!("rmp.pool{k}"), 1, c, 1, true);
    }

    for (i, (cin, cout)) in decoder_io(config).into_iter().enumerate() {
        let p = format!("decoder{}", 4 - i);
        let mid = cin / 4;
        l.conv(&format!("{p}.reduce"), mid, cin, 1, false);
        l.norm(&format!("{p}.norm1"), mid);
        l.deconv(&format!("{p}.up"), mid, mid, 3, 2, false);
        l.norm(&format!("{p}.norm2"), mid);
        l.conv(&format!("{p}.expand"), cout, mid, 1, false);
        l.norm(&format!("{p}.norm3"), cout);
    }
    let hc = head_channels(config);
    l.deconv("final.up", config.base_channels, hc, 4, 2, true);
    l.conv("final.conv2", hc, hc, 3, true);
    l.conv("final.conv3", 1, hc, 3, true);
    l
}

/// Stable 64-bit FNV-1a, used to give every tensor its own RNG stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The learnable tensors of one network, keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Scalar = f32> {
    config: ModelConfig,
    tensors: ParamMap<T>,
}

/// Allocates and initializes every parameter of the network described by
/// `config`. Deterministic per `config.seed`; each tensor draws from its own
/// stream so unrelated tensors do not shift when one shape changes.
pub fn build_network<T: Scalar>(config: &ModelConfig) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut tensors = ParamMap::new();
    for spec in layout(config).specs {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape)?,
            Init::Ones => Tensor::ones(&spec.shape)?,
            Init::He(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(&spec.name));
                Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)?
            }
        };
        let prev = tensors.insert(spec.name, t);
        debug_assert!(prev.is_none(), "duplicate parameter name");
    }
    Ok(NetworkParams { config: *config, tensors })
}

/// Whether L2 weight decay applies to a parameter: conv weights only, never
/// biases or normalization affine terms.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

impl<T: Scalar> NetworkParams<T> {
    /// Wraps an existing tensor set after checking it against the layout of `config`.
    pub fn from_tensors(config: ModelConfig, tensors: ParamMap<T>) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config).specs;
        if specs.len() != tensors.len() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                tensors.len()
            ))
            .into());
        }
        for spec in &specs {
            let t = tensors.get(&spec.name).ok_or_else(|| {
                CheckpointError::ConfigMismatch(format!("missing tensor `{}`", spec.name))
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(NetworkParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &ParamMap<T> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("network has no parameter `{name}`")))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites parameters with externally supplied weights of matching
    /// name and shape, e.g. a pretrained encoder. Returns how many were replaced.
    pub fn import(&mut self, weights: &ParamMap<T>) -> Result<usize> {
        for (name, w) in weights {
            let current = self.get(name)?;
            if current.shape() != w.shape() {
                return Err(Error::shape(format!(
                    "imported `{name}` has shape {:?}, network expects {:?}",
                    w.shape(),
                    current.shape()
                )));
            }
        }
        for (name, w) in weights {
            self.tensors.insert(name.clone(), w.clone());
        }
        Ok(weights.len())
    }

    /// `sum ||w||^2` over weight-decayed parameters.
    pub fn decayed_sum_of_squares(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| is_decayed(k))
            .map(|(_, t)| t.sum_of_squares().to_f64())
            .sum()
    }
}
