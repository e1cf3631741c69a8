//! Forward and adjoint kernels for the layers of the residual U-Net.

use super::tensor::{gemm, MatRef, Tensor};
use crate::data::Dims;

pub const NORM_EPS: f64 = 1e-5;

/// Geometry of a zero-padded convolution with odd kernel extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: Dims,
    pub stride: Dims,
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.taps()
    }

    pub fn out_dims(&self, input: Dims) -> Dims {
        [0, 1, 2].map(|a| {
            let pad = self.kernel[a] / 2;
            (input[a] + 2 * pad - self.kernel[a]) / self.stride[a] + 1
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Saved state for the adjoint of a convolution.
#[derive(Debug)]
pub struct ConvCache {
    /// Unfolded input, `fan_in x out_voxels`; `None` for pointwise convs
    /// where the input itself is kept.
    col: Option<Vec<f64>>,
    input: Option<Tensor>,
    in_dims: Dims,
    out_dims: Dims,
}

/// Output indices `lo..hi` along one axis whose input index
/// `o * stride + shift` falls inside `0..len`.
fn valid_span(out_len: usize, stride: usize, shift: isize, len: usize) -> (usize, usize) {
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let last = len as isize - 1 - shift;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &Tensor, g: &ConvGeom, out_dims: Dims) -> Vec<f64> {
    let [kz, ky, kx] = g.kernel;
    let [pz, py, px] = g.kernel.map(|k| (k / 2) as isize);
    let [sz, sy, sx] = g.stride;
    let [iz, iy, ix] = x.dims;
    let [oz_n, oy_n, ox_n] = out_dims;
    let n = oz_n * oy_n * ox_n;
    let mut col = vec![0.0; g.fan_in() * n];
    let mut row = 0;
    for c in 0..g.cin {
        let src = x.channel(c);
        for dz in 0..kz {
            let (z_lo, z_hi) = valid_span(oz_n, sz, dz as isize - pz, iz);
            for dy in 0..ky {
                let (y_lo, y_hi) = valid_span(oy_n, sy, dy as isize - py, iy);
                for dx in 0..kx {
                    let shift = dx as isize - px;
                    let (x_lo, x_hi) = valid_span(ox_n, sx, shift, ix);
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oz in z_lo..z_hi {
                        let z = (oz * sz) as isize + dz as isize - pz;
                        for oy in y_lo..y_hi {
                            let y = (oy * sy) as isize + dy as isize - py;
                            let base = (z as usize * iy + y as usize) * ix;
                            let o = (oz * oy_n + oy) * ox_n;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let first = (base as isize + (x_lo * sx) as isize + shift) as usize;
                            if sx == 1 {
                                dst[o + x_lo..o + x_hi].copy_from_slice(&src[first..first + (x_hi - x_lo)]);
                            } else {
                                for (k, ox) in (x_lo..x_hi).enumerate() {
                                    dst[o + ox] = src[first + k * sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom, in_dims: Dims, out_dims: Dims) -> Tensor {
    let [kz, ky, kx] = g.kernel;
    let [pz, py, px] = g.kernel.map(|k| (k / 2) as isize);
    let [sz, sy, sx] = g.stride;
    let [iz, iy, ix] = in_dims;
    let [oz_n, oy_n, ox_n] = out_dims;
    let n = oz_n * oy_n * ox_n;
    let mut dx_t = Tensor::zeros(g.cin, in_dims);
    let mut row = 0;
    for c in 0..g.cin {
        let dst = dx_t.channel_mut(c);
        for dz in 0..kz {
            let (z_lo, z_hi) = valid_span(oz_n, sz, dz as isize - pz, iz);
            for dy in 0..ky {
                let (y_lo, y_hi) = valid_span(oy_n, sy, dy as isize - py, iy);
                for dxk in 0..kx {
                    let shift = dxk as isize - px;
                    let (x_lo, x_hi) = valid_span(ox_n, sx, shift, ix);
                    let src = &col[row * n..(row + 1) * n];
                    for oz in z_lo..z_hi {
                        let z = (oz * sz) as isize + dz as isize - pz;
                        for oy in y_lo..y_hi {
                            let y = (oy * sy) as isize + dy as isize - py;
                            let base = (z as usize * iy + y as usize) * ix;
                            let o = (oz * oy_n + oy) * ox_n;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let first = (base as isize + (x_lo * sx) as isize + shift) as usize;
                            if sx == 1 {
                                let len = x_hi - x_lo;
                                for (d, s) in dst[first..first + len].iter_mut().zip(&src[o + x_lo..o + x_hi]) {
                                    *d += *s;
                                }
                            } else {
                                for (k, ox) in (x_lo..x_hi).enumerate() {
                                    dst[first + k * sx] += src[o + ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx_t
}

/// `y = W * x (+ b)` with `W` laid out `[cout][cin][kz][ky][kx]`.
pub fn conv_forward(x: &Tensor, g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.channels, g.cin);
    let out_dims = g.out_dims(x.dims);
    let n: usize = out_dims.iter().product();
    let mut out = Tensor::zeros(g.cout, out_dims);
    let k = g.fan_in();
    let (col, input) = if g.is_pointwise() {
        (None, Some(x.clone()))
    } else {
        (Some(im2col(x, g, out_dims)), None)
    };
    let col_ref: &[f64] = col.as_deref().unwrap_or_else(|| &input.as_ref().unwrap().data);
    gemm(
        g.cout,
        k,
        n,
        MatRef::rows(weight, k),
        MatRef::rows(col_ref, n),
        0.0,
        &mut out.data,
    );
    if let Some(b) = bias {
        for (c, &bc) in b.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v += bc);
        }
    }
    (
        out,
        ConvCache {
            col,
            input,
            in_dims: x.dims,
            out_dims,
        },
    )
}

/// Accumulates weight (and bias) gradients; returns the input gradient when
/// `need_input_grad` is set.
pub fn conv_backward(
    dy: &Tensor,
    g: &ConvGeom,
    weight: &[f64],
    cache: &ConvCache,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    need_input_grad: bool,
) -> Option<Tensor> {
    let n: usize = cache.out_dims.iter().product();
    let k = g.fan_in();
    let col_ref: &[f64] = cache
        .col
        .as_deref()
        .unwrap_or_else(|| &cache.input.as_ref().unwrap().data);
    gemm(
        g.cout,
        n,
        k,
        MatRef::rows(&dy.data, n),
        MatRef::transposed(col_ref, n),
        1.0,
        dweight,
    );
    if let Some(db) = dbias {
        for (c, d) in db.iter_mut().enumerate() {
            *d += dy.channel(c).iter().sum::<f64>();
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dcol = vec![0.0; k * n];
    gemm(
        k,
        g.cout,
        n,
        MatRef::transposed(weight, k),
        MatRef::rows(&dy.data, n),
        0.0,
        &mut dcol,
    );
    if g.is_pointwise() {
        Some(Tensor::from_vec(g.cin, cache.in_dims, dcol))
    } else {
        Some(col2im(&dcol, g, cache.in_dims, cache.out_dims))
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling). Weight layout `[cin][cout][sz][sy][sx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: Dims,
}

impl UpGeom {
    pub fn taps(&self) -> usize {
        self.stride.iter().product()
    }
}

pub struct UpCache {
    input: Tensor,
}

fn up_scatter_index(in_dims: Dims, stride: Dims) -> impl Fn(usize, usize) -> usize {
    // Maps (tap, input voxel) to the output voxel offset within one channel.
    let out_dims = [0, 1, 2].map(|a| in_dims[a] * stride[a]);
    move |tap: usize, v: usize| {
        let a = tap / (stride[1] * stride[2]);
        let b = (tap / stride[2]) % stride[1];
        let c = tap % stride[2];
        let z = v / (in_dims[1] * in_dims[2]);
        let y = (v / in_dims[2]) % in_dims[1];
        let x = v % in_dims[2];
        ((z * stride[0] + a) * out_dims[1] + y * stride[1] + b) * out_dims[2] + x * stride[2] + c
    }
}

pub fn up_forward(x: &Tensor, g: &UpGeom, weight: &[f64], bias: &[f64]) -> (Tensor, UpCache) {
    let s = g.taps();
    let n_in = x.spatial();
    let m = g.cout * s;
    let mut t = vec![0.0; m * n_in];
    gemm(
        m,
        g.cin,
        n_in,
        MatRef::transposed(weight, m),
        MatRef::rows(&x.data, n_in),
        0.0,
        &mut t,
    );
    let out_dims = [0, 1, 2].map(|a| x.dims[a] * g.stride[a]);
    let mut out = Tensor::zeros(g.cout, out_dims);
    let idx = up_scatter_index(x.dims, g.stride);
    for co in 0..g.cout {
        let dst = out.channel_mut(co);
        for tap in 0..s {
            let row = &t[(co * s + tap) * n_in..(co * s + tap + 1) * n_in];
            for (v, &val) in row.iter().enumerate() {
                dst[idx(tap, v)] = val + bias[co];
            }
        }
    }
    (out, UpCache { input: x.clone() })
}

pub fn up_backward(
    dy: &Tensor,
    g: &UpGeom,
    weight: &[f64],
    cache: &UpCache,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let s = g.taps();
    let x = &cache.input;
    let n_in = x.spatial();
    let m = g.cout * s;
    let idx = up_scatter_index(x.dims, g.stride);
    let mut dt = vec![0.0; m * n_in];
    for co in 0..g.cout {
        let src = dy.channel(co);
        dbias[co] += src.iter().sum::<f64>();
        for tap in 0..s {
            let row = &mut dt[(co * s + tap) * n_in..(co * s + tap + 1) * n_in];
            for (v, r) in row.iter_mut().enumerate() {
                *r = src[idx(tap, v)];
            }
        }
    }
    gemm(
        g.cin,
        n_in,
        m,
        MatRef::rows(&x.data, n_in),
        MatRef::transposed(&dt, n_in),
        1.0,
        dweight,
    );
    let mut dx = Tensor::zeros(g.cin, x.dims);
    gemm(
        g.cin,
        m,
        n_in,
        MatRef::rows(weight, m),
        MatRef::rows(&dt, n_in),
        0.0,
        &mut dx.data,
    );
    dx
}

pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Per-channel instance normalization with affine scale and offset.
pub fn norm_forward(x: &Tensor, scale: &[f64], shift: &[f64]) -> (Tensor, NormCache) {
    let n = x.spatial();
    let mut out = Tensor::zeros(x.channels, x.dims);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.channels];
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * n..(c + 1) * n];
        let dst = out.channel_mut(c);
        for i in 0..n {
            xh[i] = (src[i] - mean) * is;
            dst[i] = scale[c] * xh[i] + shift[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn norm_backward(
    dy: &Tensor,
    scale: &[f64],
    cache: &NormCache,
    dscale: &mut [f64],
    dshift: &mut [f64],
) -> Tensor {
    let n = dy.spatial();
    let nf = n as f64;
    let mut dx = Tensor::zeros(dy.channels, dy.dims);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dshift[c] += sum_g;
        dscale[c] += sum_gx;
        let k = scale[c] * cache.inv_std[c] / nf;
        let dst = dx.channel_mut(c);
        for i in 0..n {
            dst[i] = k * (nf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Mask `dy` by the positive entries of the ReLU output `y`.
pub fn relu_backward_inplace(dy: &mut Tensor, y: &Tensor) {
    dy.data.iter_mut().zip(&y.data).for_each(|(d, &v)| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
}

/// Per-voxel softmax over channels.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let n = logits.spatial();
    let c = logits.channels;
    let mut p = vec![0.0; logits.data.len()];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(logits.data[k * n + v]);
        }
        let mut sum = 0.0;
        for k in 0..c {
            let e = (logits.data[k * n + v] - max).exp();
            p[k * n + v] = e;
            sum += e;
        }
        for k in 0..c {
            p[k * n + v] /= sum;
        }
    }
    p
}

/// Chain rule through the softmax: `dz_k = p_k (g_k - sum_j p_j g_j)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64], channels: usize) -> Vec<f64> {
    let n = probs.len() / channels;
    let mut dz = vec![0.0; probs.len()];
    for v in 0..n {
        let mut dot = 0.0;
        for k in 0..channels {
            dot += probs[k * n + v] * dprobs[k * n + v];
        }
        for k in 0..channels {
            dz[k * n + v] = probs[k * n + v] * (dprobs[k * n + v] - dot);
        }
    }
    dz
}
