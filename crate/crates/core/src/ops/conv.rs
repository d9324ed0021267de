//! Convolution and transposed convolution via im2col and GEMM.
//!
//! All variants run through one three-spatial-axis kernel; 2D operators use
//! a unit depth axis. Convolution is cross-correlation (no kernel flip).

use super::{ConvSpec, GradPair, ParamMap};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Upper bound on im2col buffer elements before samples are processed in chunks.
const COLS_BUDGET: usize = 1 << 24;

/// Output extent of a convolution along one axis, or `None` if it would be < 1.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    output_padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + dilation * (kernel - 1) + 1 + output_padding;
    full.checked_sub(2 * padding).filter(|&o| o >= 1)
}

/// Geometry of a (virtual) forward convolution over three spatial axes.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
}

impl Geom {
    fn in_spatial(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }

    fn krows(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.krows() * self.out_spatial()).max(1)).clamp(1, self.batch)
    }
}

fn lift2(spec: &ConvSpec<2>) -> ConvSpec<3> {
    ConvSpec {
        stride: [1, spec.stride[0], spec.stride[1]],
        padding: [0, spec.padding[0], spec.padding[1]],
        dilation: [1, spec.dilation[0], spec.dilation[1]],
        output_padding: [0, spec.output_padding[0], spec.output_padding[1]],
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Builds the forward geometry from 5-d input and weight shapes.
fn conv_geom(x: &[usize], w: &[usize], spec: &ConvSpec<3>, names: &[&str]) -> Result<Geom> {
    spec.validate()?;
    if w[1] != x[1] {
        return Err(Error::shape(format!(
            "input channels: input has {} but weight expects {}",
            x[1], w[1]
        )));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = conv_output_size(x[2 + a], w[2 + a], spec.stride[a], spec.padding[a], spec.dilation[a])
            .ok_or_else(|| {
                Error::shape(format!(
                    "non-positive output {}: input {} kernel {} stride {} padding {} dilation {}",
                    names[a], x[2 + a], w[2 + a], spec.stride[a], spec.padding[a], spec.dilation[a]
                ))
            })?;
    }
    Ok(Geom {
        batch: x[0],
        cin: x[1],
        cout: w[0],
        inp: [x[2], x[3], x[4]],
        k: [w[2], w[3], w[4]],
        out,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
    })
}

#[inline]
fn source_index(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k * dil) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Writes the patch matrix of one sample into columns `col0..col0+S` of `cols`.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T], ncols: usize, col0: usize) {
    let [id, ih, iw] = g.inp;
    let [kd, kh, kw] = g.k;
    let [od, oh, ow] = g.out;
    let s_out = od * oh * ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &mut cols[r * ncols + col0..r * ncols + col0 + s_out];
                    let mut s = 0;
                    for oz in 0..od {
                        let Some(iz) = source_index(oz, kz, g.stride[0], g.dil[0], g.pad[0], id) else {
                            row[s..s + oh * ow].fill(T::zero());
                            s += oh * ow;
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = source_index(oy, ky, g.stride[1], g.dil[1], g.pad[1], ih) else {
                                row[s..s + ow].fill(T::zero());
                                s += ow;
                                continue;
                            };
                            let base = (iz * ih + iy) * iw;
                            for ox in 0..ow {
                                row[s] = match source_index(ox, kx, g.stride[2], g.dil[2], g.pad[2], iw) {
                                    Some(ix) => xc[base + ix],
                                    None => T::zero(),
                                };
                                s += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one sample.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, ncols: usize, col0: usize, x: &mut [T]) {
    let [id, ih, iw] = g.inp;
    let [kd, kh, kw] = g.k;
    let [od, oh, ow] = g.out;
    let s_out = od * oh * ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[r * ncols + col0..r * ncols + col0 + s_out];
                    let mut s = 0;
                    for oz in 0..od {
                        let Some(iz) = source_index(oz, kz, g.stride[0], g.dil[0], g.pad[0], id) else {
                            s += oh * ow;
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) = source_index(oy, ky, g.stride[1], g.dil[1], g.pad[1], ih) else {
                                s += ow;
                                continue;
                            };
                            let base = (iz * ih + iy) * iw;
                            for ox in 0..ow {
                                if let Some(ix) = source_index(ox, kx, g.stride[2], g.dil[2], g.pad[2], iw) {
                                    xc[base + ix] += row[s];
                                }
                                s += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `out[b, co, s] = sum_k w[co, k] * patch(x)[k, (b, s)] (+ bias[co])`.
fn forward_raw<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let (sin, sout, kr) = (g.in_spatial(), g.out_spatial(), g.krows());
    let mut out = vec![T::zero(); g.batch * g.cout * sout];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); kr * chunk * sout];
    let mut res = vec![T::zero(); g.cout * chunk * sout];
    for b0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - b0);
        let ncols = nb * sout;
        for j in 0..nb {
            let b = b0 + j;
            im2col(&x[b * g.cin * sin..(b + 1) * g.cin * sin], g, &mut cols, ncols, j * sout);
        }
        T::gemm(
            g.cout,
            kr,
            ncols,
            w,
            kr as isize,
            1,
            &cols[..kr * ncols],
            ncols as isize,
            1,
            T::zero(),
            &mut res[..g.cout * ncols],
            ncols as isize,
            1,
        );
        for j in 0..nb {
            let b = b0 + j;
            for co in 0..g.cout {
                let src = &res[co * ncols + j * sout..co * ncols + (j + 1) * sout];
                let dst = &mut out[(b * g.cout + co) * sout..(b * g.cout + co + 1) * sout];
                match bias {
                    Some(bv) => {
                        let bc = bv[co];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + bc;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
    }
    out
}

/// Gradients of a forward convolution: `(input_grad, weight_grad)`.
///
/// `want_input` / `want_weight` skip the corresponding GEMM when unused.
fn backward_raw<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geom,
    want_input: bool,
    want_weight: bool,
) -> (Vec<T>, Vec<T>) {
    let (sin, sout, kr) = (g.in_spatial(), g.out_spatial(), g.krows());
    let mut dx = if want_input {
        vec![T::zero(); g.batch * g.cin * sin]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); if want_weight { g.cout * kr } else { 0 }];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); kr * chunk * sout];
    let mut gmat = vec![T::zero(); g.cout * chunk * sout];
    for b0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - b0);
        let ncols = nb * sout;
        for j in 0..nb {
            let b = b0 + j;
            for co in 0..g.cout {
                gmat[co * ncols + j * sout..co * ncols + (j + 1) * sout]
                    .copy_from_slice(&gout[(b * g.cout + co) * sout..(b * g.cout + co + 1) * sout]);
            }
        }
        if want_weight {
            for j in 0..nb {
                let b = b0 + j;
                im2col(&x[b * g.cin * sin..(b + 1) * g.cin * sin], g, &mut cols, ncols, j * sout);
            }
            // dW[co, k] += sum_n G[co, n] * cols[k, n]
            T::gemm(
                g.cout,
                ncols,
                kr,
                &gmat[..g.cout * ncols],
                ncols as isize,
                1,
                &cols[..kr * ncols],
                1,
                ncols as isize,
                T::one(),
                &mut dw,
                kr as isize,
                1,
            );
        }
        if want_input {
            // dcols[k, n] = sum_co W[co, k] * G[co, n]
            T::gemm(
                kr,
                g.cout,
                ncols,
                w,
                1,
                kr as isize,
                &gmat[..g.cout * ncols],
                ncols as isize,
                1,
                T::zero(),
                &mut cols[..kr * ncols],
                ncols as isize,
                1,
            );
            for j in 0..nb {
                let b = b0 + j;
                col2im(&cols, g, ncols, j * sout, &mut dx[b * g.cin * sin..(b + 1) * g.cin * sin]);
            }
        }
    }
    (dx, dw)
}

fn bias_grad<T: Scalar>(gout: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (b * channels + c) * spatial;
            *acc += gout[off..off + spatial].iter().copied().sum::<T>();
        }
    }
    db
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::shape(format!(
                "bias must have shape [{channels}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn check_grad_out<T: Scalar>(grad_out: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match forward output shape {expected:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

fn dims5_from_2d(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], 1, s[2], s[3]]
}

fn dims5(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], s[2], s[3], s[4]]
}

fn out_shape(g: &Geom, two_d: bool) -> Vec<usize> {
    if two_d {
        vec![g.batch, g.cout, g.out[1], g.out[2]]
    } else {
        vec![g.batch, g.cout, g.out[0], g.out[1], g.out[2]]
    }
}

fn conv_param_grads<T: Scalar>(dw: Vec<T>, w_shape: &[usize], db: Vec<T>) -> ParamMap<T> {
    let mut grads = ParamMap::new();
    let cout = db.len();
    grads.insert("weight".to_string(), Tensor::from_parts(w_shape.to_vec(), dw));
    grads.insert("bias".to_string(), Tensor::from_parts(vec![cout], db));
    grads
}

/// 2D cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec<2>,
) -> Result<Tensor<T>> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d weight")?;
    let g = conv_geom(&dims5_from_2d(x.shape()), &dims5_from_2d(w.shape()), &lift2(spec), &AXES)?;
    check_bias(b, g.cout)?;
    let out = forward_raw(x.data(), w.data(), b.map(|b| b.data()), &g);
    Ok(Tensor::from_parts(out_shape(&g, true), out))
}

/// Gradients of `sum(grad_out * conv2d_forward(x, w, b))` w.r.t. `x`, `weight`, `bias`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec<2>,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d weight")?;
    let g = conv_geom(&dims5_from_2d(x.shape()), &dims5_from_2d(w.shape()), &lift2(spec), &AXES)?;
    check_grad_out(grad_out, &out_shape(&g, true))?;
    let (dx, dw) = backward_raw(x.data(), w.data(), grad_out.data(), &g, true, true);
    let db = bias_grad(grad_out.data(), g.batch, g.cout, g.out_spatial());
    Ok(GradPair {
        input_grad: Tensor::from_parts(x.shape().to_vec(), dx),
        param_grads: conv_param_grads(dw, w.shape(), db),
    })
}

/// 3D cross-correlation of `x: [B, Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec<3>,
) -> Result<Tensor<T>> {
    expect_rank(x, 5, "conv3d input")?;
    expect_rank(w, 5, "conv3d weight")?;
    let g = conv_geom(&dims5(x.shape()), &dims5(w.shape()), spec, &AXES)?;
    check_bias(b, g.cout)?;
    let out = forward_raw(x.data(), w.data(), b.map(|b| b.data()), &g);
    Ok(Tensor::from_parts(out_shape(&g, false), out))
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec<3>,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    expect_rank(x, 5, "conv3d input")?;
    expect_rank(w, 5, "conv3d weight")?;
    let g = conv_geom(&dims5(x.shape()), &dims5(w.shape()), spec, &AXES)?;
    check_grad_out(grad_out, &out_shape(&g, false))?;
    let (dx, dw) = backward_raw(x.data(), w.data(), grad_out.data(), &g, true, true);
    let db = bias_grad(grad_out.data(), g.batch, g.cout, g.out_spatial());
    Ok(GradPair {
        input_grad: Tensor::from_parts(x.shape().to_vec(), dx),
        param_grads: conv_param_grads(dw, w.shape(), db),
    })
}

/// Geometry of the forward convolution whose input-adjoint is the given
/// transposed convolution. Roles of input/output swap.
fn transpose_geom(x: &[usize], w: &[usize], spec: &ConvSpec<2>) -> Result<Geom> {
    spec.validate()?;
    if w[0] != x[1] {
        return Err(Error::shape(format!(
            "input channels: input has {} but transposed weight expects {}",
            x[1], w[0]
        )));
    }
    let mut out = [0; 2];
    for a in 0..2 {
        if spec.output_padding[a] >= spec.stride[a] {
            return Err(Error::invalid(format!(
                "output padding {} must be smaller than stride {} on the {} axis",
                spec.output_padding[a], spec.stride[a], AXES[a + 1]
            )));
        }
        out[a] = conv_transpose2d_output_size(
            x[2 + a],
            w[2 + a],
            spec.stride[a],
            spec.padding[a],
            spec.dilation[a],
            spec.output_padding[a],
        )
        .ok_or_else(|| {
            Error::shape(format!(
                "non-positive transposed-conv output {}: input {} kernel {} padding {}",
                AXES[a + 1],
                x[2 + a],
                w[2 + a],
                spec.padding[a]
            ))
        })?;
    }
    let s3 = lift2(spec);
    Ok(Geom {
        batch: x[0],
        cin: w[1],
        cout: w[0],
        inp: [1, out[0], out[1]],
        k: [1, w[2], w[3]],
        out: [1, x[2], x[3]],
        stride: s3.stride,
        pad: s3.padding,
        dil: s3.dilation,
    })
}

/// Transposed 2D convolution of `x: [B, Cin, H, W]` with `w: [Cin, Cout, kh, kw]`.
///
/// Output extent is `(H - 1) * s - 2p + d * (kh - 1) + 1 + output_padding`;
/// the map is the adjoint of [`conv2d_forward`] with the same spec.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec<2>,
) -> Result<Tensor<T>> {
    expect_rank(x, 4, "conv_transpose2d input")?;
    expect_rank(w, 4, "conv_transpose2d weight")?;
    let g = transpose_geom(x.shape(), w.shape(), spec)?;
    check_bias(b, g.cin)?;
    // The transposed conv is the input-gradient map of the virtual forward conv.
    let (mut y, _) = backward_raw(&[], w.data(), x.data(), &g, true, false);
    if let Some(b) = b {
        let sp = g.in_spatial();
        for bi in 0..g.batch {
            for c in 0..g.cin {
                let bc = b.data()[c];
                for v in &mut y[(bi * g.cin + c) * sp..(bi * g.cin + c + 1) * sp] {
                    *v += bc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cin, g.inp[1], g.inp[2]], y))
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec<2>,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    expect_rank(x, 4, "conv_transpose2d input")?;
    expect_rank(w, 4, "conv_transpose2d weight")?;
    let g = transpose_geom(x.shape(), w.shape(), spec)?;
    check_grad_out(grad_out, &[g.batch, g.cin, g.inp[1], g.inp[2]])?;
    // Input gradient: forward conv of grad_out.
    let dx = forward_raw(grad_out.data(), w.data(), None, &g);
    // Weight gradient: dW[ci, k] = sum_n x[ci, n] * patch(grad_out)[k, n].
    let (_, dw) = backward_raw(grad_out.data(), &[], x.data(), &g, false, true);
    let db = bias_grad(grad_out.data(), g.batch, g.cin, g.in_spatial());
    Ok(GradPair {
        input_grad: Tensor::from_parts(x.shape().to_vec(), dx),
        param_grads: conv_param_grads(dw, w.shape(), db),
    })
}
