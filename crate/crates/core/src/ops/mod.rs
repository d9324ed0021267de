//! Differentiable operators with explicit forward and backward maps.
//!
//! Every operator is a pure function of its inputs. Backward functions
//! return the gradient of `sum(grad_out * forward(..))` with respect to the
//! forward inputs and parameters.

mod activation;
mod conv;
mod gradcheck;
mod layers;
mod norm;
mod selfcheck;
mod pool;
mod sgd;
mod upsample;

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

pub use activation::{
    add_backward, add_forward, concat_channels_backward, concat_channels_forward, relu_backward,
    relu_forward, sigmoid_backward, sigmoid_forward,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, conv_transpose2d_output_size, conv_output_size,
};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport, DEFAULT_ABS_FLOOR};
pub use layers::{
    AddOp, ConcatOp, Conv2d, Conv3d, ConvTranspose2d, DifferentiableOp, InstanceNorm, MaxPool2d,
    Relu, Sigmoid, UpsampleBilinear,
};
pub use norm::{instance_norm_backward, instance_norm_forward, NormCache, INSTANCE_NORM_EPS};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolIndices, PoolSpec};
pub use selfcheck::{op_gradcheck_suite, OpCheck, MAX_DIM, SUITE_EPS};
pub use sgd::{sgd_step, SgdConfig};
pub use upsample::{upsample_bilinear_backward, upsample_bilinear_forward};

/// Named parameter (or gradient) tensors, iterated in sorted name order.
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Convolution geometry for `D` spatial axes.
///
/// For 3D operators the leading component is the temporal axis.
/// `output_padding` is only consulted by transposed convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec<const D: usize> {
    pub stride: [usize; D],
    pub padding: [usize; D],
    pub dilation: [usize; D],
    pub output_padding: [usize; D],
}

impl<const D: usize> ConvSpec<D> {
    pub fn new(stride: [usize; D], padding: [usize; D], dilation: [usize; D]) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
            output_padding: [0; D],
        }
    }

    /// Same stride, padding and dilation on every axis.
    pub fn uniform(stride: usize, padding: usize, dilation: usize) -> Self {
        Self::new([stride; D], [padding; D], [dilation; D])
    }

    pub fn with_output_padding(mut self, output_padding: [usize; D]) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub(crate) fn validate(&self) -> crate::Result<()> {
        if self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(crate::Error::invalid(format!(
                "stride and dilation must be >= 1, got stride {:?} dilation {:?}",
                self.stride, self.dilation
            )));
        }
        Ok(())
    }
}

impl<const D: usize> Default for ConvSpec<D> {
    fn default() -> Self {
        Self::uniform(1, 0, 1)
    }
}

/// Input gradient plus named parameter gradients of one operator.
#[derive(Clone, Debug)]
pub struct GradPair<T: Scalar = f32> {
    pub input_grad: Tensor<T>,
    pub param_grads: ParamMap<T>,
}
