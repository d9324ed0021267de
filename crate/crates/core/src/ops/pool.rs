use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Window geometry of a 2D max-pool. Padding cells never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl PoolSpec {
    /// Square window with stride equal to the window size.
    pub fn square(size: usize) -> Self {
        PoolSpec {
            kernel: [size; 2],
            stride: [size; 2],
            padding: [0; 2],
        }
    }

    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec {
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    fn output_dims(&self, h: usize, w: usize) -> Result<[usize; 2]> {
        let mut out = [0; 2];
        for (a, extent) in [h, w].into_iter().enumerate() {
            let (k, s, p) = (self.kernel[a], self.stride[a], self.padding[a]);
            if k == 0 || s == 0 {
                return Err(Error::invalid("pool kernel and stride must be >= 1"));
            }
            if 2 * p > k {
                return Err(Error::invalid(format!(
                    "pool padding {p} exceeds half the kernel {k}"
                )));
            }
            if k > extent + 2 * p {
                return Err(Error::shape(format!(
                    "pool kernel {k} larger than padded input extent {}",
                    extent + 2 * p
                )));
            }
            out[a] = (extent + 2 * p - k) / s + 1;
        }
        Ok(out)
    }
}

/// Flat input offset of the winning element for every pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Windowed maximum over `x: [B, C, H, W]`. Ties resolve to the first
/// window element in row-major order.
pub fn maxpool2d_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, PoolIndices)> {
    expect_rank(x, 4, "maxpool2d input")?;
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let [oh, ow] = spec.output_dims(h, w)?;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let data = x.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = (oy * spec.stride[0]) as isize - spec.padding[0] as isize;
            for ox in 0..ow {
                let x0 = (ox * spec.stride[1]) as isize - spec.padding[1] as isize;
                let mut best: Option<(T, usize)> = None;
                for ky in 0..spec.kernel[0] as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel[1] as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = data[idx];
                        match best {
                            // NaN wins and then sticks, matching IEEE max propagation
                            Some((b, _)) if b.is_nan() || !(v > b || v.is_nan()) => {}
                            _ => best = Some((v, idx)),
                        }
                    }
                }
                // Every window overlaps the input because padding <= kernel / 2.
                let (v, idx) = best.expect("pool window fully in padding");
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
        PoolIndices {
            input_shape: s.to_vec(),
            argmax,
        },
    ))
}

/// Routes each pooled gradient to its winning input element.
pub fn maxpool2d_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.numel() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "maxpool grad_out has {} elements, forward produced {}",
            grad_out.numel(),
            indices.argmax.len()
        )));
    }
    let mut dx = vec![T::zero(); indices.input_shape.iter().product()];
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        dx[idx] += g;
    }
    Ok(Tensor::from_parts(indices.input_shape.clone(), dx))
}
