//! The 3D-2D CE-Net: temporal fusion, ResNet-34 style encoder, DAC + RMP
//! context bottleneck, transposed-conv decoder with additive skips, sigmoid head.

mod checkpoint;
mod config;
mod gradcheck;
mod network;
mod params;

pub use checkpoint::{
    decode_checkpoint, decode_header, encode_checkpoint, ensure_compatible, load_checkpoint, save_checkpoint,
    MAGIC, VERSION,
};
pub use config::{ModelConfig, DAC_DILATIONS, DOWNSAMPLE, PYRAMID_POOLS, STAGE_BLOCKS};
pub use network::{
    backward, dac_forward, decoder_forward, encoder_forward, forward, fusion_forward, rmp_forward, rmp_window,
    DacCache, DecoderCache, EncoderCache, ForwardTrace, FusionCache, Gradients, RmpCache,
};
pub use gradcheck::network_gradcheck;
pub use params::{build_network, is_decayed, NetworkParams};
