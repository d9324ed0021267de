use super::{GradPair, ParamMap};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Saved statistics from an instance-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T: Scalar> {
    /// Standardized input, before the affine map.
    pub normalized: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel) plane.
    pub inv_std: Vec<T>,
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 3 {
        return Err(Error::shape(format!(
            "instance norm input needs [B, C, ...], got {:?}",
            x.shape()
        )));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "instance norm {name} must have shape [{c}], got {:?}",
                t.shape()
            )));
        }
    }
    Ok((b, c, x.shape()[2..].iter().product()))
}

/// Standardizes every (sample, channel) plane, then applies `gamma * x + beta`.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, plane) = check_affine(x, gamma, beta)?;
    let n = T::from_f64(plane as f64);
    let eps = T::from_f64(eps);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(b * c);
    for (p, src) in x.data().chunks_exact(plane).enumerate() {
        let ch = p % c;
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let off = p * plane;
        for (i, &v) in src.iter().enumerate() {
            let h = (v - mean) * istd;
            xhat[off + i] = h;
            y[off + i] = g * h + bt;
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormCache {
            normalized: Tensor::from_parts(x.shape().to_vec(), xhat),
            inv_std,
        },
    ))
}

/// Gradients w.r.t. the input, `gamma` and `beta`.
pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    let xhat = &cache.normalized;
    if grad_out.shape() != xhat.shape() {
        return Err(Error::shape(format!(
            "instance norm grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            xhat.shape()
        )));
    }
    let c = xhat.shape()[1];
    if gamma.shape() != [c] {
        return Err(Error::shape("instance norm gamma does not match channels"));
    }
    let plane: usize = xhat.shape()[2..].iter().product();
    let n = T::from_f64(plane as f64);
    let mut dx = vec![T::zero(); xhat.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (p, (h, g)) in xhat
        .data()
        .chunks_exact(plane)
        .zip(grad_out.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = p % c;
        let sum_g: T = g.iter().copied().sum();
        let sum_gh: T = g.iter().zip(h).map(|(&a, &b)| a * b).sum();
        dbeta[ch] += sum_g;
        dgamma[ch] += sum_gh;
        let scale = gamma.data()[ch] * cache.inv_std[p];
        let (mg, mgh) = (sum_g / n, sum_gh / n);
        let off = p * plane;
        for i in 0..plane {
            dx[off + i] = scale * (g[i] - mg - h[i] * mgh);
        }
    }
    let mut param_grads = ParamMap::new();
    param_grads.insert("gamma".into(), Tensor::from_parts(vec![c], dgamma));
    param_grads.insert("beta".into(), Tensor::from_parts(vec![c], dbeta));
    Ok(GradPair {
        input_grad: Tensor::from_parts(xhat.shape().to_vec(), dx),
        param_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_plane_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 4.0).unwrap();
        let (g, b) = (Tensor::ones(&[2]).unwrap(), Tensor::zeros(&[2]).unwrap());
        let (y, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planes_have_affine_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 7, 5], 2.0, &mut rng).unwrap();
        let g = Tensor::from_vec(&[3], vec![1.5, -0.7, 0.2]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let (y, _) = instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).unwrap();
        for (p, plane) in y.data().chunks(35).enumerate() {
            let ch = p % 3;
            let mean = plane.iter().sum::<f64>() / 35.0;
            let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 35.0).sqrt();
            assert!((mean - b.data()[ch]).abs() < 1e-5);
            assert!((std - g.data()[ch].abs()).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_affine_shape() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]).unwrap();
        let g = Tensor::ones(&[3]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        assert!(instance_norm_forward(&x, &g, &b, INSTANCE_NORM_EPS).is_err());
    }
}
