use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    // NaN passes through
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Gradient of ReLU given its forward *output*.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(output, grad_out, "relu backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(output.shape().to_vec(), data))
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        // Split on sign so exp never overflows.
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

/// Gradient of the sigmoid given its forward *output*.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(output, grad_out, "sigmoid backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Ok(Tensor::from_parts(output.shape().to_vec(), data))
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Both summands receive the incoming gradient unchanged.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Concatenates `[B, C_i, ...]` tensors along axis 1.
pub fn concat_channels_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat needs at least one tensor"))?;
    if first.ndim() < 2 {
        return Err(Error::shape("concat inputs need a channel axis"));
    }
    let batch = first.shape()[0];
    let rest = &first.shape()[2..];
    for p in parts {
        if p.ndim() != first.ndim() || p.shape()[0] != batch || &p.shape()[2..] != rest {
            return Err(Error::shape(format!(
                "concat: non-channel dims of {:?} and {:?} differ",
                p.shape(),
                first.shape()
            )));
        }
    }
    let inner: usize = rest.iter().product();
    let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(batch * channels * inner);
    for b in 0..batch {
        for p in parts {
            let step = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[b * step..(b + 1) * step]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Ok(Tensor::from_parts(shape, data))
}

/// Splits a concatenated gradient back into per-input channel groups.
pub fn concat_channels_backward<T: Scalar>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = channels.iter().sum();
    if grad_out.ndim() < 2 || grad_out.shape()[1] != total {
        return Err(Error::shape(format!(
            "concat backward: grad_out {:?} does not have {total} channels",
            grad_out.shape()
        )));
    }
    let batch = grad_out.shape()[0];
    let inner: usize = grad_out.shape()[2..].iter().product();
    let mut outs: Vec<Vec<T>> = channels
        .iter()
        .map(|c| Vec::with_capacity(batch * c * inner))
        .collect();
    for b in 0..batch {
        let mut off = b * total * inner;
        for (out, &c) in outs.iter_mut().zip(channels) {
            out.extend_from_slice(&grad_out.data()[off..off + c * inner]);
            off += c * inner;
        }
    }
    Ok(outs
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| {
            let mut shape = grad_out.shape().to_vec();
            shape[1] = c;
            Tensor::from_parts(shape, data)
        })
        .collect())
}
