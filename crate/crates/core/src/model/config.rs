use crate::error::{Error, Result};

/// Residual basic blocks per encoder stage (ResNet-34 layout).
pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
/// Dilation ladder of the dense atrous convolution block.
pub const DAC_DILATIONS: [usize; 3] = [1, 3, 5];
/// Window sizes of the residual multi-kernel pooling block.
pub const PYRAMID_POOLS: [usize; 4] = [2, 3, 5, 6];
/// Total spatial downsampling between input and bottleneck.
pub const DOWNSAMPLE: usize = 32;

/// Hyperparameters of the 3D-2D network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Temporal half-window: frames taken before and after the target.
    /// `0` degenerates the fusion layer to a plain 2D convolution.
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder stem width; stages use 1x, 2x, 4x and 8x this.
    pub base_channels: usize,
    /// Output channels of the temporal 3D convolution.
    pub fusion_channels: usize,
    /// Channels handed from the fusion layer to the encoder.
    pub fused_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 1,
            height: 448,
            width: 448,
            base_channels: 64,
            fusion_channels: 16,
            fused_channels: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(n: usize, height: usize, width: usize) -> Self {
        ModelConfig {
            n,
            height,
            width,
            ..Default::default()
        }
    }

    /// Number of frames consumed per prediction, `2N + 1`.
    pub fn window(&self) -> usize {
        2 * self.n + 1
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % DOWNSAMPLE != 0 {
                return Err(Error::Config(format!(
                    "{name} {v} must be a positive multiple of {DOWNSAMPLE}"
                )));
            }
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "base_channels {} must be a positive multiple of 4",
                self.base_channels
            )));
        }
        if self.fusion_channels == 0 || self.fused_channels == 0 {
            return Err(Error::Config("fusion channel widths must be >= 1".into()));
        }
        Ok(())
    }
}
