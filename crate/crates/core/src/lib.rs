//! Spatiotemporal vessel segmentation for angiographic image sequences.
//!
//! A 3D convolution fuses `2N+1` consecutive frames into 2D feature maps
//! which feed a CE-Net style encoder / context-bottleneck / decoder. The
//! whole stack runs on a small CPU tensor engine with hand-written backward
//! passes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Scalar, Tensor};
