//! Raw compute kernels behind the tensor ops.
//!
//! Kernels are pure functions over flat row-major buffers. The heavy ones
//! parallelize over disjoint output slices, which keeps results
//! bit-identical regardless of thread count: the accumulation order within
//! every output element is fixed.

use rayon::prelude::*;

use super::Element;

/// Geometry of a conv2d / conv_transpose2d call.
///
/// For conv2d: input `[n, cin, h, w]`, kernel `[cout, cin, kh, kw]`,
/// output `[n, cout, oh, ow]`. For conv_transpose2d the kernel is laid out
/// `[cin, cout, kh, kw]` and `(oh, ow)` are the *larger* output dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Plain NCHW geometry for ops that only need one tensor's layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Indices `j` in `[0, idx_dim)` with `0 <= j*stride + k - pad < bound`.
/// Returned as a half-open range.
fn valid_range(idx_dim: usize, bound: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let top = bound as isize - 1 - k as isize + pad as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(idx_dim);
    let lo = if pad > k { (pad - k).div_ceil(stride).min(hi) } else { 0 };
    (lo, hi)
}

fn parallel_worthwhile(out_elems: usize, macs_per_elem: usize) -> bool {
    out_elems.saturating_mul(macs_per_elem) >= 1 << 18
}

pub fn conv2d_forward<E: Element>(x: &[E], w: &[E], b: &[E], d: &ConvDims) -> Vec<E> {
    let plane = d.oh * d.ow;
    let mut out = vec![E::zero(); d.n * d.cout * plane];
    let run = |(pi, out_plane): (usize, &mut [E])| {
        let (ni, co) = (pi / d.cout, pi % d.cout);
        out_plane.fill(b[co]);
        for ci in 0..d.cin {
            let x_plane = &x[(ni * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            for khi in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, khi, d.stride, d.pad);
                for kwi in 0..d.kw {
                    let wv = w[((co * d.cin + ci) * d.kh + khi) * d.kw + kwi];
                    let (ow_lo, ow_hi) = valid_range(d.ow, d.w, kwi, d.stride, d.pad);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for ohi in oh_lo..oh_hi {
                        let ih = ohi * d.stride + khi - d.pad;
                        let x_row = &x_plane[ih * d.w..][..d.w];
                        let o_row = &mut out_plane[ohi * d.ow..][..d.ow];
                        if d.stride == 1 {
                            let iw0 = ow_lo + kwi - d.pad;
                            for (o, &xv) in o_row[ow_lo..ow_hi]
                                .iter_mut()
                                .zip(&x_row[iw0..iw0 + (ow_hi - ow_lo)])
                            {
                                *o += wv * xv;
                            }
                        } else {
                            for owi in ow_lo..ow_hi {
                                o_row[owi] += wv * x_row[owi * d.stride + kwi - d.pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if parallel_worthwhile(out.len(), d.cin * d.kh * d.kw) {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
    out
}

pub fn conv2d_backward_x<E: Element>(gy: &[E], w: &[E], d: &ConvDims) -> Vec<E> {
    let plane = d.h * d.w;
    let mut gx = vec![E::zero(); d.n * d.cin * plane];
    let run = |(pi, gx_plane): (usize, &mut [E])| {
        let (ni, ci) = (pi / d.cin, pi % d.cin);
        for co in 0..d.cout {
            let gy_plane = &gy[(ni * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
            for khi in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, khi, d.stride, d.pad);
                for kwi in 0..d.kw {
                    let wv = w[((co * d.cin + ci) * d.kh + khi) * d.kw + kwi];
                    let (ow_lo, ow_hi) = valid_range(d.ow, d.w, kwi, d.stride, d.pad);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for ohi in oh_lo..oh_hi {
                        let ih = ohi * d.stride + khi - d.pad;
                        let gy_row = &gy_plane[ohi * d.ow..][..d.ow];
                        let gx_row = &mut gx_plane[ih * d.w..][..d.w];
                        if d.stride == 1 {
                            let iw0 = ow_lo + kwi - d.pad;
                            for (g, &gv) in gx_row[iw0..iw0 + (ow_hi - ow_lo)]
                                .iter_mut()
                                .zip(&gy_row[ow_lo..ow_hi])
                            {
                                *g += wv * gv;
                            }
                        } else {
                            for owi in ow_lo..ow_hi {
                                gx_row[owi * d.stride + kwi - d.pad] += wv * gy_row[owi];
                            }
                        }
                    }
                }
            }
        }
    };
    if parallel_worthwhile(gy.len(), d.cin * d.kh * d.kw) {
        gx.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        gx.chunks_mut(plane).enumerate().for_each(run);
    }
    gx
}

pub fn conv2d_backward_w<E: Element>(gy: &[E], x: &[E], d: &ConvDims) -> Vec<E> {
    let w_per_co = d.cin * d.kh * d.kw;
    let mut gw = vec![E::zero(); d.cout * w_per_co];
    let run = |(co, gw_co): (usize, &mut [E])| {
        for ni in 0..d.n {
            let gy_plane = &gy[(ni * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
            for ci in 0..d.cin {
                let x_plane = &x[(ni * d.cin + ci) * d.h * d.w..][..d.h * d.w];
                for khi in 0..d.kh {
                    let (oh_lo, oh_hi) = valid_range(d.oh, d.h, khi, d.stride, d.pad);
                    for kwi in 0..d.kw {
                        let (ow_lo, ow_hi) = valid_range(d.ow, d.w, kwi, d.stride, d.pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = E::zero();
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * d.stride + khi - d.pad;
                            let gy_row = &gy_plane[ohi * d.ow..][..d.ow];
                            let x_row = &x_plane[ih * d.w..][..d.w];
                            if d.stride == 1 {
                                let iw0 = ow_lo + kwi - d.pad;
                                for (&gv, &xv) in gy_row[ow_lo..ow_hi]
                                    .iter()
                                    .zip(&x_row[iw0..iw0 + (ow_hi - ow_lo)])
                                {
                                    acc += gv * xv;
                                }
                            } else {
                                for owi in ow_lo..ow_hi {
                                    acc += gy_row[owi] * x_row[owi * d.stride + kwi - d.pad];
                                }
                            }
                        }
                        gw_co[(ci * d.kh + khi) * d.kw + kwi] += acc;
                    }
                }
            }
        }
    };
    if parallel_worthwhile(gy.len(), d.cin * d.kh * d.kw) {
        gw.par_chunks_mut(w_per_co).enumerate().for_each(run);
    } else {
        gw.chunks_mut(w_per_co).enumerate().for_each(run);
    }
    gw
}

pub fn conv_backward_b<E: Element>(gy: &[E], n: usize, cout: usize, plane: usize) -> Vec<E> {
    let mut gb = vec![E::zero(); cout];
    for ni in 0..n {
        for co in 0..cout {
            let row = &gy[(ni * cout + co) * plane..][..plane];
            let mut acc = E::zero();
            for &g in row {
                acc += g;
            }
            gb[co] += acc;
        }
    }
    gb
}

pub fn conv_transpose2d_forward<E: Element>(x: &[E], w: &[E], b: &[E], d: &ConvDims) -> Vec<E> {
    let plane = d.oh * d.ow;
    let mut out = vec![E::zero(); d.n * d.cout * plane];
    let run = |(pi, out_plane): (usize, &mut [E])| {
        let (ni, co) = (pi / d.cout, pi % d.cout);
        out_plane.fill(b[co]);
        for ci in 0..d.cin {
            let x_plane = &x[(ni * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            for khi in 0..d.kh {
                let (ih_lo, ih_hi) = valid_range(d.h, d.oh, khi, d.stride, d.pad);
                for kwi in 0..d.kw {
                    let wv = w[((ci * d.cout + co) * d.kh + khi) * d.kw + kwi];
                    let (iw_lo, iw_hi) = valid_range(d.w, d.ow, kwi, d.stride, d.pad);
                    for ihi in ih_lo..ih_hi {
                        let oh = ihi * d.stride + khi - d.pad;
                        let x_row = &x_plane[ihi * d.w..][..d.w];
                        let o_row = &mut out_plane[oh * d.ow..][..d.ow];
                        for iwi in iw_lo..iw_hi {
                            o_row[iwi * d.stride + kwi - d.pad] += wv * x_row[iwi];
                        }
                    }
                }
            }
        }
    };
    if parallel_worthwhile(x.len() / d.cin.max(1) * d.cout, d.cin * d.kh * d.kw) {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
    out
}

pub fn conv_transpose2d_backward_x<E: Element>(gy: &[E], w: &[E], d: &ConvDims) -> Vec<E> {
    let plane = d.h * d.w;
    let mut gx = vec![E::zero(); d.n * d.cin * plane];
    let run = |(pi, gx_plane): (usize, &mut [E])| {
        let (ni, ci) = (pi / d.cin, pi % d.cin);
        for co in 0..d.cout {
            let gy_plane = &gy[(ni * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
            for khi in 0..d.kh {
                let (ih_lo, ih_hi) = valid_range(d.h, d.oh, khi, d.stride, d.pad);
                for kwi in 0..d.kw {
                    let wv = w[((ci * d.cout + co) * d.kh + khi) * d.kw + kwi];
                    let (iw_lo, iw_hi) = valid_range(d.w, d.ow, kwi, d.stride, d.pad);
                    for ihi in ih_lo..ih_hi {
                        let oh = ihi * d.stride + khi - d.pad;
                        let gy_row = &gy_plane[oh * d.ow..][..d.ow];
                        let gx_row = &mut gx_plane[ihi * d.w..][..d.w];
                        for iwi in iw_lo..iw_hi {
                            gx_row[iwi] += wv * gy_row[iwi * d.stride + kwi - d.pad];
                        }
                    }
                }
            }
        }
    };
    if parallel_worthwhile(gx.len(), d.cout * d.kh * d.kw) {
        gx.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        gx.chunks_mut(plane).enumerate().for_each(run);
    }
    gx
}

pub fn conv_transpose2d_backward_w<E: Element>(gy: &[E], x: &[E], d: &ConvDims) -> Vec<E> {
    let w_per_ci = d.cout * d.kh * d.kw;
    let mut gw = vec![E::zero(); d.cin * w_per_ci];
    let run = |(ci, gw_ci): (usize, &mut [E])| {
        for ni in 0..d.n {
            let x_plane = &x[(ni * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            for co in 0..d.cout {
                let gy_plane = &gy[(ni * d.cout + co) * d.oh * d.ow..][..d.oh * d.ow];
                for khi in 0..d.kh {
                    let (ih_lo, ih_hi) = valid_range(d.h, d.oh, khi, d.stride, d.pad);
                    for kwi in 0..d.kw {
                        let (iw_lo, iw_hi) = valid_range(d.w, d.ow, kwi, d.stride, d.pad);
                        let mut acc = E::zero();
                        for ihi in ih_lo..ih_hi {
                            let oh = ihi * d.stride + khi - d.pad;
                            let x_row = &x_plane[ihi * d.w..][..d.w];
                            let gy_row = &gy_plane[oh * d.ow..][..d.ow];
                            for iwi in iw_lo..iw_hi {
                                acc += x_row[iwi] * gy_row[iwi * d.stride + kwi - d.pad];
                            }
                        }
                        gw_ci[(co * d.kh + khi) * d.kw + kwi] += acc;
                    }
                }
            }
        }
    };
    if parallel_worthwhile(gy.len(), d.cin * d.kh * d.kw) {
        gw.par_chunks_mut(w_per_ci).enumerate().for_each(run);
    } else {
        gw.chunks_mut(w_per_ci).enumerate().for_each(run);
    }
    gw
}

/// Max pooling with implicit negative-infinity padding: out-of-bounds
/// window positions never win. Ties go to the first element in scan order.
/// Returns the pooled values and the flat input index feeding each output.
pub fn max_pool2d_forward<E: Element>(
    x: &[E],
    d: &PoolDims,
    size: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<E>, Vec<usize>) {
    let mut out = vec![E::zero(); d.n * d.c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for pi in 0..d.n * d.c {
        let x_base = pi * d.h * d.w;
        let o_base = pi * oh * ow;
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_idx = usize::MAX;
                for dy in 0..size {
                    let iy = (ohi * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for dx in 0..size {
                        let ix = (owi * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let idx = x_base + iy as usize * d.w + ix as usize;
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[o_base + ohi * ow + owi] = best;
                argmax[o_base + ohi * ow + owi] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BatchNormState<E: Element> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
}

impl<E: Element> BatchNormState<E> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
        }
    }
}

pub struct BnTrainSaved<E: Element> {
    pub xhat: Vec<E>,
    pub inv_std: Vec<E>,
    pub gamma: Vec<E>,
    pub n: usize,
    pub c: usize,
    pub plane: usize,
}

pub struct BnEvalSaved<E: Element> {
    pub x: std::sync::Arc<Vec<E>>,
    pub inv_std: Vec<E>,
    pub mean: Vec<E>,
    pub gamma: Vec<E>,
    pub n: usize,
    pub c: usize,
    pub plane: usize,
}

/// Training-mode batch norm: normalizes by batch statistics and updates the
/// running estimates (unbiased variance, like the usual deep-learning
/// convention).
pub fn batch_norm_forward_train<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    state: &mut BatchNormState<E>,
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<E>, BnTrainSaved<E>) {
    let m = n * plane;
    let m_e = E::from_f64(m as f64);
    let eps = E::from_f64(BN_EPS);
    let mom = E::from_f64(BN_MOMENTUM);
    let mut y = vec![E::zero(); x.len()];
    let mut xhat = vec![E::zero(); x.len()];
    let mut inv_std = vec![E::zero(); c];
    for ch in 0..c {
        let mut sum = E::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            for p in 0..plane {
                sum += x[base + p];
            }
        }
        let mean = sum / m_e;
        let mut var_sum = E::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            for p in 0..plane {
                let d = x[base + p] - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / m_e;
        let istd = E::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            for p in 0..plane {
                let xh = (x[base + p] - mean) * istd;
                xhat[base + p] = xh;
                y[base + p] = gamma[ch] * xh + beta[ch];
            }
        }
        let var_update = if m > 1 {
            var_sum / E::from_f64((m - 1) as f64)
        } else {
            var
        };
        state.running_mean[ch] = (E::one() - mom) * state.running_mean[ch] + mom * mean;
        state.running_var[ch] = (E::one() - mom) * state.running_var[ch] + mom * var_update;
    }
    let saved = BnTrainSaved { xhat, inv_std, gamma: gamma.to_vec(), n, c, plane };
    (y, saved)
}

pub fn batch_norm_forward_eval<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    state: &BatchNormState<E>,
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<E>, Vec<E>) {
    let eps = E::from_f64(BN_EPS);
    let inv_std: Vec<E> = state
        .running_var
        .iter()
        .map(|&v| E::one() / (v + eps).sqrt())
        .collect();
    let mut y = vec![E::zero(); x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            let (m, istd) = (state.running_mean[ch], inv_std[ch]);
            for p in 0..plane {
                y[base + p] = gamma[ch] * (x[base + p] - m) * istd + beta[ch];
            }
        }
    }
    (y, inv_std)
}

/// Full gradient through the batch statistics:
/// `dx = gamma * inv_std * (gy - mean(gy) - xhat * mean(gy * xhat))`.
pub fn batch_norm_backward_train<E: Element>(
    gy: &[E],
    s: &BnTrainSaved<E>,
    wanted: &[bool],
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let m_e = E::from_f64((s.n * s.plane) as f64);
    let mut sum_gy = vec![E::zero(); s.c];
    let mut sum_gy_xhat = vec![E::zero(); s.c];
    for ni in 0..s.n {
        for ch in 0..s.c {
            let base = (ni * s.c + ch) * s.plane;
            let mut a = E::zero();
            let mut b = E::zero();
            for p in 0..s.plane {
                a += gy[base + p];
                b += gy[base + p] * s.xhat[base + p];
            }
            sum_gy[ch] += a;
            sum_gy_xhat[ch] += b;
        }
    }
    let gx = wanted[0].then(|| {
        let mut gx = vec![E::zero(); gy.len()];
        for ni in 0..s.n {
            for ch in 0..s.c {
                let base = (ni * s.c + ch) * s.plane;
                let k = s.gamma[ch] * s.inv_std[ch];
                let mg = sum_gy[ch] / m_e;
                let mgx = sum_gy_xhat[ch] / m_e;
                for p in 0..s.plane {
                    gx[base + p] = k * (gy[base + p] - mg - s.xhat[base + p] * mgx);
                }
            }
        }
        gx
    });
    let gg = wanted[1].then(|| sum_gy_xhat.clone());
    let gb = wanted[2].then(|| sum_gy.clone());
    (gx, gg, gb)
}

pub fn batch_norm_backward_eval<E: Element>(
    gy: &[E],
    s: &BnEvalSaved<E>,
    wanted: &[bool],
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let gx = wanted[0].then(|| {
        let mut gx = vec![E::zero(); gy.len()];
        for ni in 0..s.n {
            for ch in 0..s.c {
                let base = (ni * s.c + ch) * s.plane;
                let k = s.gamma[ch] * s.inv_std[ch];
                for p in 0..s.plane {
                    gx[base + p] = gy[base + p] * k;
                }
            }
        }
        gx
    });
    let gg = wanted[1].then(|| {
        let mut gg = vec![E::zero(); s.c];
        for ni in 0..s.n {
            for ch in 0..s.c {
                let base = (ni * s.c + ch) * s.plane;
                let mut acc = E::zero();
                for p in 0..s.plane {
                    acc += gy[base + p] * (s.x[base + p] - s.mean[ch]) * s.inv_std[ch];
                }
                gg[ch] += acc;
            }
        }
        gg
    });
    let gb = wanted[2].then(|| {
        let mut gb = vec![E::zero(); s.c];
        for ni in 0..s.n {
            for ch in 0..s.c {
                let base = (ni * s.c + ch) * s.plane;
                let mut acc = E::zero();
                for p in 0..s.plane {
                    acc += gy[base + p];
                }
                gb[ch] += acc;
            }
        }
        gb
    });
    (gx, gg, gb)
}

/// Depth-to-space: `[n, c*r^2, h, w] -> [n, c, h*r, w*r]` with
/// `out[n][c][hr+dy][wr+dx] = x[n][c*r^2 + dy*r + dx][h][w]`.
/// `dims` describes the *input* tensor.
pub fn pixel_shuffle_forward<E: Element>(x: &[E], d: &PoolDims, r: usize) -> Vec<E> {
    let c_out = d.c / (r * r);
    let (oh, ow) = (d.h * r, d.w * r);
    let mut out = vec![E::zero(); d.n * c_out * oh * ow];
    for ni in 0..d.n {
        for co in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let x_plane = &x[(ni * d.c + ci) * d.h * d.w..][..d.h * d.w];
                    let o_plane = &mut out[(ni * c_out + co) * oh * ow..][..oh * ow];
                    for hi in 0..d.h {
                        let x_row = &x_plane[hi * d.w..][..d.w];
                        let o_row = &mut o_plane[(hi * r + dy) * ow..][..ow];
                        for wi in 0..d.w {
                            o_row[wi * r + dx] = x_row[wi];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<E: Element>(gy: &[E], d: &PoolDims, r: usize) -> Vec<E> {
    let c_out = d.c / (r * r);
    let (oh, ow) = (d.h * r, d.w * r);
    let mut gx = vec![E::zero(); d.n * d.c * d.h * d.w];
    for ni in 0..d.n {
        for co in 0..c_out {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let gx_plane = &mut gx[(ni * d.c + ci) * d.h * d.w..][..d.h * d.w];
                    let gy_plane = &gy[(ni * c_out + co) * oh * ow..][..oh * ow];
                    for hi in 0..d.h {
                        let gx_row = &mut gx_plane[hi * d.w..][..d.w];
                        let gy_row = &gy_plane[(hi * r + dy) * ow..][..ow];
                        for wi in 0..d.w {
                            gx_row[wi] = gy_row[wi * r + dx];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_no_padding() {
        // out = (5 - 3)/1 + 1 = 3, every tap in range for k in 0..3
        for k in 0..3 {
            assert_eq!(valid_range(3, 5, k, 1, 0), (0, 3));
        }
    }

    #[test]
    fn valid_range_with_padding() {
        // in=4, k=3, pad=1, stride=1 -> out=4
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4)); // tap 0 misses first output
        assert_eq!(valid_range(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3)); // tap 2 misses last output
    }

    #[test]
    fn valid_range_stride_two() {
        // in=8, k=7-tap, pad=3, stride=2 -> out=(8+6-7)/2+1=4
        let (lo, hi) = valid_range(4, 8, 0, 2, 3);
        // j*2 - 3 in [0,8) -> j in {2,3}
        assert_eq!((lo, hi), (2, 4));
    }

    #[test]
    fn pixel_shuffle_roundtrip_layout() {
        let d = PoolDims { n: 1, c: 4, h: 2, w: 2 };
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let y = pixel_shuffle_forward(&x, &d, 2);
        // channel 0 goes to even rows/cols
        assert_eq!(y[0], x[0]);
        assert_eq!(y[1], x[4]); // channel 1 -> dx=1
        assert_eq!(y[4], x[8]); // channel 2 -> dy=1
        let gx = pixel_shuffle_backward(&y, &d, 2);
        assert_eq!(gx, x);
    }
}
