//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use angioseg::Tensor;
use rand::Rng;

/// Random tensor whose entries are multiples of 1/8 in [-1, 1], so sums of
/// products are exact in f64 regardless of summation order.
pub fn dyadic<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-8i32..=8) as f64 / 8.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn gaussian<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng).unwrap()
}

/// Direct seven-loop 3D cross-correlation with bias.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> Tensor<f64> {
    let (bs, cin, id, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (cout, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let o = |i: usize, k: usize, a: usize| (i + 2 * pad[a] - dil[a] * (k - 1) - 1) / stride[a] + 1;
    let (od, oh, ow) = (o(id, kd, 0), o(ih, kh, 1), o(iw, kw, 2));
    let mut out = Vec::new();
    for bi in 0..bs {
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iz = (oz * stride[0] + kz * dil[0]) as isize - pad[0] as isize;
                                        let iy = (oy * stride[1] + ky * dil[1]) as isize - pad[1] as isize;
                                        let ix = (ox * stride[2] + kx * dil[2]) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= id || iy >= ih || ix >= iw {
                                            continue;
                                        }
                                        acc += x.at(&[bi, ci, iz, iy, ix]) * w.at(&[co, ci, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        if let Some(b) = b {
                            acc += b.data()[co];
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[bs, cout, od, oh, ow], out).unwrap()
}

pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: [usize; 2],
    pad: [usize; 2],
    dil: [usize; 2],
) -> Tensor<f64> {
    let s = x.shape();
    let x5 = x.clone().reshape(&[s[0], s[1], 1, s[2], s[3]]).unwrap();
    let ws = w.shape();
    let w5 = w.clone().reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]).unwrap();
    let y = naive_conv3d(&x5, &w5, b, [1, stride[0], stride[1]], [0, pad[0], pad[1]], [1, dil[0], dil[1]]);
    let ys = y.shape().to_vec();
    y.reshape(&[ys[0], ys[1], ys[3], ys[4]]).unwrap()
}

/// Scatter form of the transposed convolution, weight `[Cin, Cout, kh, kw]`.
pub fn naive_conv_transpose2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
    out_pad: usize,
) -> Tensor<f64> {
    let (bs, cin, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (ih - 1) * stride + dil * (kh - 1) + 1 + out_pad - 2 * pad;
    let ow = (iw - 1) * stride + dil * (kw - 1) + 1 + out_pad - 2 * pad;
    let mut out = vec![0.0; bs * cout * oh * ow];
    for bi in 0..bs {
        for ci in 0..cin {
            for iy in 0..ih {
                for ix in 0..iw {
                    let v = x.at(&[bi, ci, iy, ix]);
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky * dil) as isize - pad as isize;
                                let ox = (ix * stride + kx * dil) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy as usize >= oh || ox as usize >= ow {
                                    continue;
                                }
                                out[((bi * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.at(&[ci, co, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for bi in 0..bs {
            for co in 0..cout {
                for v in &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow] {
                    *v += b.data()[co];
                }
            }
        }
    }
    Tensor::from_vec(&[bs, cout, oh, ow], out).unwrap()
}

/// Window maximum with -inf padding.
pub fn naive_maxpool2d(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..bs {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                m = m.max(x.at(&[bi, ci, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::from_vec(&[bs, c, oh, ow], out).unwrap()
}

/// Four-neighbour + diagonal flood fill; returns component areas sorted descending.
pub fn flood_fill_areas(mask: &[u8], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut areas = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] != 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas.sort_unstable_by(|a, b| b.cmp(a));
    areas
}
