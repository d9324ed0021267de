use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Corner-aligned source coordinate taps: `(lower, upper, upper weight)`.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            if out == 1 || inp == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
            let lo = (pos.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn check_out(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "upsample output must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// Bilinear resize of `x: [B, C, H, W]` to `out_h x out_w`, sampling with
/// aligned corners.
pub fn upsample_bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    expect_rank(x, 4, "upsample input")?;
    check_out(out_h, out_w)?;
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    debug_assert_eq!(out.len(), planes * out_h * out_w);
    Ok(Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out))
}

/// Adjoint of [`upsample_bilinear_forward`].
pub fn upsample_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(grad_out, 4, "upsample grad_out")?;
    if input_shape.len() != 4 || input_shape[..2] != grad_out.shape()[..2] {
        return Err(Error::shape(format!(
            "upsample grad_out {:?} incompatible with input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane, g) in dx
        .chunks_exact_mut(h * w)
        .zip(grad_out.data().chunks_exact(out_h * out_w))
    {
        let mut gi = 0;
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let v = g[gi];
                gi += 1;
                plane[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += v * (T::one() - fy) * fx;
                plane[y1 * w + x0] += v * fy * (T::one() - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}
