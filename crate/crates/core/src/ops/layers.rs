//! Operator objects with owned parameters, used by the gradient checker.

use super::*;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A layer with named parameters, a forward map and its backward map.
pub trait DifferentiableOp<T: Scalar> {
    fn name(&self) -> &str;

    fn params(&self) -> &ParamMap<T>;

    fn params_mut(&mut self) -> &mut ParamMap<T>;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Returns one gradient per input plus a gradient per named parameter.
    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ParamMap<T>)>;
}

fn arity<'a, T: Scalar>(inputs: &[&'a Tensor<T>], n: usize, op: &str) -> Result<&'a Tensor<T>> {
    if inputs.len() != n {
        return Err(Error::invalid(format!(
            "{op} takes {n} input(s), got {}",
            inputs.len()
        )));
    }
    Ok(inputs[0])
}

fn conv_params<T: Scalar>(weight: Tensor<T>, bias: Option<Tensor<T>>) -> ParamMap<T> {
    let mut params = ParamMap::new();
    params.insert("weight".into(), weight);
    if let Some(b) = bias {
        params.insert("bias".into(), b);
    }
    params
}

fn keep_bias<T: Scalar>(mut grads: ParamMap<T>, params: &ParamMap<T>) -> ParamMap<T> {
    if !params.contains_key("bias") {
        grads.remove("bias");
    }
    grads
}

macro_rules! conv_layer {
    ($ty:ident, $label:literal, $dims:literal, $fwd:ident, $bwd:ident) => {
        pub struct $ty<T: Scalar> {
            params: ParamMap<T>,
            pub spec: ConvSpec<$dims>,
        }

        impl<T: Scalar> $ty<T> {
            pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, spec: ConvSpec<$dims>) -> Self {
                $ty {
                    params: conv_params(weight, bias),
                    spec,
                }
            }
        }

        impl<T: Scalar> DifferentiableOp<T> for $ty<T> {
            fn name(&self) -> &str {
                $label
            }

            fn params(&self) -> &ParamMap<T> {
                &self.params
            }

            fn params_mut(&mut self) -> &mut ParamMap<T> {
                &mut self.params
            }

            fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
                let x = arity(inputs, 1, $label)?;
                $fwd(x, &self.params["weight"], self.params.get("bias"), &self.spec)
            }

            fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ParamMap<T>)> {
                let x = arity(inputs, 1, $label)?;
                let g = $bwd(x, &self.params["weight"], &self.spec, grad_out)?;
                Ok((vec![g.input_grad], keep_bias(g.param_grads, &self.params)))
            }
        }
    };
}

conv_layer!(Conv2d, "conv2d", 2, conv2d_forward, conv2d_backward);
conv_layer!(Conv3d, "conv3d", 3, conv3d_forward, conv3d_backward);
conv_layer!(ConvTranspose2d, "conv_transpose2d", 2, conv_transpose2d_forward, conv_transpose2d_backward);

pub struct InstanceNorm<T: Scalar> {
    params: ParamMap<T>,
    pub eps: f64,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(gamma: Tensor<T>, beta: Tensor<T>) -> Self {
        let mut params = ParamMap::new();
        params.insert("gamma".into(), gamma);
        params.insert("beta".into(), beta);
        InstanceNorm {
            params,
            eps: INSTANCE_NORM_EPS,
        }
    }
}

impl<T: Scalar> DifferentiableOp<T> for InstanceNorm<T> {
    fn name(&self) -> &str {
        "instance_norm"
    }

    fn params(&self) -> &ParamMap<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamMap<T> {
        &mut self.params
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = arity(inputs, 1, "instance_norm")?;
        Ok(instance_norm_forward(x, &self.params["gamma"], &self.params["beta"], self.eps)?.0)
    }

    fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ParamMap<T>)> {
        let x = arity(inputs, 1, "instance_norm")?;
        let (_, cache) = instance_norm_forward(x, &self.params["gamma"], &self.params["beta"], self.eps)?;
        let g = instance_norm_backward(&cache, &self.params["gamma"], grad_out)?;
        Ok((vec![g.input_grad], g.param_grads))
    }
}

macro_rules! stateless {
    ($ty:ident, $label:literal) => {
        impl<T: Scalar> DifferentiableOp<T> for $ty<T> {
            fn name(&self) -> &str {
                $label
            }

            fn params(&self) -> &ParamMap<T> {
                &self.empty
            }

            fn params_mut(&mut self) -> &mut ParamMap<T> {
                &mut self.empty
            }

            fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
                self.fwd(inputs)
            }

            fn backward(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ParamMap<T>)> {
                Ok((self.bwd(inputs, grad_out)?, ParamMap::new()))
            }
        }
    };
}

pub struct MaxPool2d<T: Scalar> {
    empty: ParamMap<T>,
    pub spec: PoolSpec,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new(spec: PoolSpec) -> Self {
        MaxPool2d {
            empty: ParamMap::new(),
            spec,
        }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(maxpool2d_forward(arity(inputs, 1, "maxpool2d")?, &self.spec)?.0)
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, idx) = maxpool2d_forward(arity(inputs, 1, "maxpool2d")?, &self.spec)?;
        Ok(vec![maxpool2d_backward(&idx, grad_out)?])
    }
}
stateless!(MaxPool2d, "maxpool2d");

pub struct UpsampleBilinear<T: Scalar> {
    empty: ParamMap<T>,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Scalar> UpsampleBilinear<T> {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        UpsampleBilinear {
            empty: ParamMap::new(),
            out_h,
            out_w,
        }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        upsample_bilinear_forward(arity(inputs, 1, "upsample")?, self.out_h, self.out_w)
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let x = arity(inputs, 1, "upsample")?;
        Ok(vec![upsample_bilinear_backward(x.shape(), grad_out)?])
    }
}
stateless!(UpsampleBilinear, "upsample_bilinear");

#[derive(Default)]
pub struct Relu<T: Scalar> {
    empty: ParamMap<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { empty: ParamMap::new() }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(relu_forward(arity(inputs, 1, "relu")?))
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let y = relu_forward(arity(inputs, 1, "relu")?);
        Ok(vec![relu_backward(&y, grad_out)?])
    }
}
stateless!(Relu, "relu");

#[derive(Default)]
pub struct Sigmoid<T: Scalar> {
    empty: ParamMap<T>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { empty: ParamMap::new() }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(sigmoid_forward(arity(inputs, 1, "sigmoid")?))
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let y = sigmoid_forward(arity(inputs, 1, "sigmoid")?);
        Ok(vec![sigmoid_backward(&y, grad_out)?])
    }
}
stateless!(Sigmoid, "sigmoid");

#[derive(Default)]
pub struct AddOp<T: Scalar> {
    empty: ParamMap<T>,
}

impl<T: Scalar> AddOp<T> {
    pub fn new() -> Self {
        AddOp { empty: ParamMap::new() }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        arity(inputs, 2, "add")?;
        add_forward(inputs[0], inputs[1])
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        arity(inputs, 2, "add")?;
        let (a, b) = add_backward(grad_out);
        Ok(vec![a, b])
    }
}
stateless!(AddOp, "add");

#[derive(Default)]
pub struct ConcatOp<T: Scalar> {
    empty: ParamMap<T>,
}

impl<T: Scalar> ConcatOp<T> {
    pub fn new() -> Self {
        ConcatOp { empty: ParamMap::new() }
    }

    fn fwd(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        concat_channels_forward(inputs)
    }

    fn bwd(&self, inputs: &[&Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let channels: Vec<usize> = inputs.iter().map(|t| t.shape()[1]).collect();
        concat_channels_backward(grad_out, &channels)
    }
}
stateless!(ConcatOp, "concat_channels");
