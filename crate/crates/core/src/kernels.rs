//! Numeric kernels behind the graph operations.
//!
//! Every reduction walks its inputs in a fixed order, so results are
//! bit-reproducible run to run.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec { stride, pad, groups }
    }
}

/// Checks conv operands and returns the output shape.
pub fn conv2d_shape(x: Shape4, w: Shape4, bias_len: Option<usize>, spec: ConvSpec) -> Result<Shape4> {
    let ConvSpec { stride, pad, groups } = spec;
    if groups == 0 || x.c % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} not divisible by groups {groups}", x.c),
        ));
    }
    if w.n % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("output channels {} not divisible by groups {groups}", w.n),
        ));
    }
    if w.c != x.c / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight input channels {} != input channels {} / groups {groups}",
                w.c, x.c
            ),
        ));
    }
    if w.h != w.w || w.h % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {}x{}", w.h, w.w),
        ));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::shape("conv2d", format!("stride must be 1 or 2, got {stride}")));
    }
    if let Some(b) = bias_len {
        if b != w.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {b} != output channels {}", w.n),
            ));
        }
    }
    let k = w.h;
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("height/width {}x{} too small for kernel {k} with padding {pad}", x.h, x.w),
        ));
    }
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    Ok(Shape4::new(x.n, w.n, ho, wo))
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &Tensor4, w: &Tensor4, bias: Option<&[f64]>, spec: ConvSpec) -> Result<Tensor4> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_shape(xs, ws, bias.map(|b| b.len()), spec)?;
    let ConvSpec { stride, pad, groups } = spec;
    let k = ws.h;
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; os.numel()];
    let oplane = os.plane();
    let iplane = xs.plane();

    for n in 0..xs.n {
        for co in 0..os.c {
            let g = co / cout_g;
            let obase = (n * os.c + co) * oplane;
            let orow_all = &mut out[obase..obase + oplane];
            if let Some(b) = bias {
                orow_all.fill(b[co]);
            }
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                let xbase = (n * xs.c + ci) * iplane;
                let xplane = &xd[xbase..xbase + iplane];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(os.h, xs.h, ky, pad, stride);
                    for kx in 0..k {
                        let wv = wd[((co * cin_g + cl) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(os.w, xs.w, kx, pad, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                            let orow = &mut orow_all[oy * os.w..(oy + 1) * os.w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let src = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o, s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

pub struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    gout: &[f64],
    spec: ConvSpec,
    want: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_shape(xs, ws, None, spec).expect("shape validated in forward");
    let ConvSpec { stride, pad, groups } = spec;
    let k = ws.h;
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let (xd, wd) = (x.data(), w.data());
    let oplane = os.plane();
    let iplane = xs.plane();

    let gx = want.0.then(|| {
        let mut gx = vec![0.0; xs.numel()];
        for n in 0..xs.n {
            for co in 0..os.c {
                let g = co / cout_g;
                let gbase = (n * os.c + co) * oplane;
                let gplane = &gout[gbase..gbase + oplane];
                for cl in 0..cin_g {
                    let ci = g * cin_g + cl;
                    let xbase = (n * xs.c + ci) * iplane;
                    let gxplane = &mut gx[xbase..xbase + iplane];
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = valid_range(os.h, xs.h, ky, pad, stride);
                        for kx in 0..k {
                            let wv = wd[((co * cin_g + cl) * k + ky) * k + kx];
                            let (ox_lo, ox_hi) = valid_range(os.w, xs.w, kx, pad, stride);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gplane[oy * os.w..(oy + 1) * os.w];
                                let xrow = &mut gxplane[iy * xs.w..(iy + 1) * xs.w];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let dst = &mut xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                    for (d, g) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                        *d += wv * g;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        xrow[ox * stride + kx - pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    });

    let gw = want.1.then(|| {
        let mut gw = vec![0.0; ws.numel()];
        for co in 0..os.c {
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(os.h, xs.h, ky, pad, stride);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(os.w, xs.w, kx, pad, stride);
                        let mut acc = 0.0;
                        if ox_lo < ox_hi {
                            for n in 0..xs.n {
                                let gbase = (n * os.c + co) * oplane;
                                let xbase = (n * xs.c + ci) * iplane;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gout[gbase + oy * os.w..gbase + (oy + 1) * os.w];
                                    let xrow = &xd[xbase + iy * xs.w..xbase + (iy + 1) * xs.w];
                                    if stride == 1 {
                                        let ix0 = ox_lo + kx - pad;
                                        let src = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                        for (g, s) in grow[ox_lo..ox_hi].iter().zip(src) {
                                            acc += g * s;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            acc += grow[ox] * xrow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                        gw[((co * cin_g + cl) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
        gw
    });

    let gb = want.2.then(|| {
        let mut gb = vec![0.0; os.c];
        for n in 0..os.n {
            for (co, b) in gb.iter_mut().enumerate() {
                let base = (n * os.c + co) * oplane;
                *b += gout[base..base + oplane].iter().sum::<f64>();
            }
        }
        gb
    });

    ConvGrads { x: gx, w: gw, bias: gb }
}

/// Multiply-accumulate count of a conv: k² · cin/groups · cout · Hout · Wout (per batch item).
pub fn conv2d_macs(x: Shape4, w: Shape4, out: Shape4) -> u64 {
    (w.h * w.w * w.c * w.n * out.h * out.w * x.n) as u64
}

/// Bilinear resampling taps for one axis (half-pixel centers, edge clamp).
pub(crate) fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 >= in_len - 1 {
                    (in_len - 1, in_len - 1, 0.0)
                } else {
                    (i0, i0 + 1, src - i0 as f64)
                }
            }
        })
        .collect()
}

/// Upsamples every plane by an integer factor with bilinear interpolation.
pub fn upsample_bilinear(x: &Tensor4, factor: usize) -> Tensor4 {
    let s = x.shape();
    let os = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let xd = x.data();
    let mut out = vec![0.0; os.numel()];
    for p in 0..s.n * s.c {
        let src = &xd[p * s.plane()..(p + 1) * s.plane()];
        let dst = &mut out[p * os.plane()..(p + 1) * os.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                dst[oy * os.w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor4::from_vec(os, out).expect("shape computed above")
}

pub(crate) fn upsample_bilinear_backward(in_shape: Shape4, factor: usize, gout: &[f64]) -> Vec<f64> {
    let s = in_shape;
    let (oh, ow) = (s.h * factor, s.w * factor);
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let mut gx = vec![0.0; s.numel()];
    for p in 0..s.n * s.c {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * s.plane()..(p + 1) * s.plane()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * s.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * s.w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * s.w + x0] += v * fy * (1.0 - fx);
                dst[y1 * s.w + x1] += v * fy * fx;
            }
        }
    }
    gx
}

/// Kernelized linear attention over spatial tokens.
///
/// `q` and `k` must already be mapped through a positive feature map. For each
/// image and head: `y_i = q_i · (Σ_j k_j v_jᵀ) / (q_i · Σ_j k_j + eps)`.
pub fn linear_attention_forward(q: &Tensor4, k: &Tensor4, v: &Tensor4, heads: usize, eps: f64) -> Tensor4 {
    let s = q.shape();
    let d = s.c / heads;
    let tokens = s.plane();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; s.numel()];
    let mut kv = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    for n in 0..s.n {
        for h in 0..heads {
            let base = (n * s.c + h * d) * tokens;
            let ch = |c: usize, t: usize| base + c * tokens + t;
            kv.fill(0.0);
            z.fill(0.0);
            for a in 0..d {
                for t in 0..tokens {
                    z[a] += kd[ch(a, t)];
                }
                for e in 0..d {
                    let mut acc = 0.0;
                    for t in 0..tokens {
                        acc += kd[ch(a, t)] * vd[ch(e, t)];
                    }
                    kv[a * d + e] = acc;
                }
            }
            for t in 0..tokens {
                let mut den = eps;
                for a in 0..d {
                    den += qd[ch(a, t)] * z[a];
                }
                for e in 0..d {
                    let mut num = 0.0;
                    for a in 0..d {
                        num += qd[ch(a, t)] * kv[a * d + e];
                    }
                    out[ch(e, t)] = num / den;
                }
            }
        }
    }
    Tensor4::from_vec(s, out).expect("same shape as input")
}

pub fn linear_attention_backward(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    heads: usize,
    eps: f64,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = q.shape();
    let d = s.c / heads;
    let tokens = s.plane();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; s.numel()];
    let mut gk = vec![0.0; s.numel()];
    let mut gv = vec![0.0; s.numel()];
    let mut kv = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    let mut gkv = vec![0.0; d * d];
    let mut gz = vec![0.0; d];
    let mut gnum = vec![0.0; d];
    for n in 0..s.n {
        for h in 0..heads {
            let base = (n * s.c + h * d) * tokens;
            let ch = |c: usize, t: usize| base + c * tokens + t;
            kv.fill(0.0);
            z.fill(0.0);
            for a in 0..d {
                for t in 0..tokens {
                    z[a] += kd[ch(a, t)];
                }
                for e in 0..d {
                    let mut acc = 0.0;
                    for t in 0..tokens {
                        acc += kd[ch(a, t)] * vd[ch(e, t)];
                    }
                    kv[a * d + e] = acc;
                }
            }
            gkv.fill(0.0);
            gz.fill(0.0);
            for t in 0..tokens {
                let mut den = eps;
                for a in 0..d {
                    den += qd[ch(a, t)] * z[a];
                }
                // y_e = num_e / den, so dL/dden = -Σ_e g_e y_e / den.
                let mut gden = 0.0;
                for e in 0..d {
                    let mut num = 0.0;
                    for a in 0..d {
                        num += qd[ch(a, t)] * kv[a * d + e];
                    }
                    let g = gout[ch(e, t)];
                    gnum[e] = g / den;
                    gden -= g * num / (den * den);
                }
                for a in 0..d {
                    let qa = qd[ch(a, t)];
                    let mut acc = gden * z[a];
                    for e in 0..d {
                        acc += gnum[e] * kv[a * d + e];
                        gkv[a * d + e] += qa * gnum[e];
                    }
                    gq[ch(a, t)] = acc;
                    gz[a] += gden * qa;
                }
            }
            for t in 0..tokens {
                for a in 0..d {
                    let mut acc = gz[a];
                    for e in 0..d {
                        acc += gkv[a * d + e] * vd[ch(e, t)];
                    }
                    gk[ch(a, t)] = acc;
                }
                for e in 0..d {
                    let mut acc = 0.0;
                    for a in 0..d {
                        acc += kd[ch(a, t)] * gkv[a * d + e];
                    }
                    gv[ch(e, t)] = acc;
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Multiply-accumulates of the attention aggregation (excluding projections).
pub fn linear_attention_macs(s: Shape4, heads: usize) -> u64 {
    let d = s.c / heads;
    let tokens = s.plane();
    // K^T V, K^T 1, q·KV, q·z per head.
    (s.n * heads * (2 * tokens * d * d + 2 * tokens * d)) as u64
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
