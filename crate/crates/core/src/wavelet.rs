//! Orthonormal 2-D Haar analysis/synthesis and the wavelet-domain convolution layer.
//!
//! Subbands for a 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! `LH` carries horizontal differences, `HL` vertical ones. Packed tensors
//! store the four subbands band-major along channels: `[LL | LH | HL | HH]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Init, Layer};
use crate::param::{he_normal, ParamId, ParamStore};
use crate::tensor::{Shape4, Tensor4};

/// The four subbands of one analysis level.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Tensor4,
    pub lh: Tensor4,
    pub hl: Tensor4,
    pub hh: Tensor4,
}

impl Subbands {
    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    fn pack(&self) -> Result<Tensor4> {
        let s = self.ll.shape();
        for (name, b) in [("LH", &self.lh), ("HL", &self.hl), ("HH", &self.hh)] {
            if b.shape() != s {
                return Err(Error::shape(
                    "idwt2_haar",
                    format!("subband {name} is {} but LL is {s}", b.shape()),
                ));
            }
        }
        let plane = s.c * s.plane();
        let mut data = Vec::with_capacity(4 * s.numel());
        for n in 0..s.n {
            for b in [&self.ll, &self.lh, &self.hl, &self.hh] {
                data.extend_from_slice(&b.data()[n * plane..(n + 1) * plane]);
            }
        }
        Tensor4::from_vec(Shape4::new(s.n, 4 * s.c, s.h, s.w), data)
    }

    fn unpack(packed: &Tensor4) -> Subbands {
        let c = packed.shape().c / 4;
        Subbands {
            ll: packed.channel_slice(0, c),
            lh: packed.channel_slice(c, 2 * c),
            hl: packed.channel_slice(2 * c, 3 * c),
            hh: packed.channel_slice(3 * c, 4 * c),
        }
    }
}

/// Single-level analysis into packed `[LL | LH | HL | HH]` channels.
pub fn haar_analysis_packed(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(
            "dwt2_haar",
            format!("height and width must be even, got {}x{} (pad first)", s.h, s.w),
        ));
    }
    let (h2, w2) = (s.h / 2, s.w / 2);
    let os = Shape4::new(s.n, 4 * s.c, h2, w2);
    let xd = x.data();
    let mut out = vec![0.0; os.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &xd[(n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()];
            let band = |b: usize| (n * os.c + b * s.c + c) * h2 * w2;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * s.w + 2 * j];
                    let b = src[2 * i * s.w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * s.w + 2 * j];
                    let d = src[(2 * i + 1) * s.w + 2 * j + 1];
                    let o = i * w2 + j;
                    out[ll + o] = 0.5 * (a + b + cc + d);
                    out[lh + o] = 0.5 * (a - b + cc - d);
                    out[hl + o] = 0.5 * (a + b - cc - d);
                    out[hh + o] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

/// Exact inverse of [`haar_analysis_packed`].
pub fn haar_synthesis_packed(packed: &Tensor4) -> Result<Tensor4> {
    let ps = packed.shape();
    if ps.c % 4 != 0 {
        return Err(Error::shape(
            "idwt2_haar",
            format!("packed subband channels {} not divisible by 4", ps.c),
        ));
    }
    let c4 = ps.c / 4;
    let os = Shape4::new(ps.n, c4, ps.h * 2, ps.w * 2);
    let pd = packed.data();
    let mut out = vec![0.0; os.numel()];
    let bplane = ps.plane();
    for n in 0..ps.n {
        for c in 0..c4 {
            let band = |b: usize| (n * ps.c + b * c4 + c) * bplane;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let dst = &mut out[(n * c4 + c) * os.plane()..(n * c4 + c + 1) * os.plane()];
            for i in 0..ps.h {
                for j in 0..ps.w {
                    let o = i * ps.w + j;
                    let (l0, l1, l2, l3) = (pd[ll + o], pd[lh + o], pd[hl + o], pd[hh + o]);
                    dst[2 * i * os.w + 2 * j] = 0.5 * (l0 + l1 + l2 + l3);
                    dst[2 * i * os.w + 2 * j + 1] = 0.5 * (l0 - l1 + l2 - l3);
                    dst[(2 * i + 1) * os.w + 2 * j] = 0.5 * (l0 + l1 - l2 - l3);
                    dst[(2 * i + 1) * os.w + 2 * j + 1] = 0.5 * (l0 - l1 - l2 + l3);
                }
            }
        }
    }
    Tensor4::from_vec(os, out)
}

/// MACs of one transform counted as four stride-2 depthwise 2×2 convolutions.
pub fn haar_macs(full_res: Shape4) -> u64 {
    // 4 bands × 4 taps × (h/2 · w/2) outputs per channel.
    (4 * full_res.n * full_res.c * full_res.h * full_res.w) as u64
}

pub fn dwt2_haar(x: &Tensor4) -> Result<Subbands> {
    Ok(Subbands::unpack(&haar_analysis_packed(x)?))
}

pub fn idwt2_haar(bands: &Subbands) -> Result<Tensor4> {
    haar_synthesis_packed(&bands.pack()?)
}

/// Multi-level Haar decomposition: level `ℓ` analyses the LL band of level `ℓ-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<Subbands>,
    pub base_shape: (usize, usize),
}

impl WaveletPyramid {
    pub fn analyze(x: &Tensor4, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("wavelet pyramid needs at least one level".into()));
        }
        let s = x.shape();
        let m = 1 << levels;
        if s.h % m != 0 || s.w % m != 0 {
            return Err(Error::shape(
                "wavelet_pyramid",
                format!("{}x{} not divisible by 2^{levels}; pad first", s.h, s.w),
            ));
        }
        let mut out = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for _ in 0..levels {
            let b = dwt2_haar(&cur)?;
            cur = b.ll.clone();
            out.push(b);
        }
        Ok(WaveletPyramid {
            levels: out,
            base_shape: (s.h, s.w),
        })
    }

    /// Recomposes from the deepest level upwards.
    pub fn synthesize(&self) -> Result<Tensor4> {
        let mut ll: Option<Tensor4> = None;
        for b in self.levels.iter().rev() {
            let mut bands = b.clone();
            if let Some(deeper) = ll.take() {
                bands.ll = deeper;
            }
            ll = Some(idwt2_haar(&bands)?);
        }
        Ok(ll.expect("at least one level"))
    }
}

/// Weights of a wavelet-domain convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WtConvParams {
    /// Depthwise `C×1×k×k` kernel applied at full resolution.
    pub base_kernel: Tensor4,
    /// One `4C×1×k×k` depthwise kernel per level, one filter per (band, channel).
    pub subband_kernels: Vec<Tensor4>,
}

impl WtConvParams {
    pub fn levels(&self) -> usize {
        self.subband_kernels.len()
    }

    /// Identity base kernel with zeroed subband kernels.
    pub fn identity(channels: usize, levels: usize, k: usize) -> Self {
        let base_kernel = Tensor4::from_fn(Shape4::new(channels, 1, k, k), |_, _, y, x| {
            if y == k / 2 && x == k / 2 {
                1.0
            } else {
                0.0
            }
        });
        WtConvParams {
            base_kernel,
            subband_kernels: vec![Tensor4::zeros(Shape4::new(4 * channels, 1, k, k)); levels],
        }
    }
}

/// Records a wavelet convolution on `g`.
///
/// Output = depthwise(`base`, x) + wavelet path, where the wavelet path
/// filters the packed subbands of every level depthwise and recomposes them
/// from the deepest level to the shallowest, adding each deeper result into
/// the LL band of the level above. Inputs whose sides are not multiples of
/// `2^levels` are reflect-padded and the wavelet path is cropped back.
pub fn wtconv_graph(g: &mut Graph, x: Var, base: Var, subbands: &[Var]) -> Result<Var> {
    let s = g.shape(x);
    let levels = subbands.len();
    if levels == 0 {
        return Err(Error::InvalidArgument("wtconv needs at least one level".into()));
    }
    let bs = g.shape(base);
    if bs.n != s.c || bs.c != 1 {
        return Err(Error::shape(
            "wtconv",
            format!("base kernel {bs} is not depthwise for {} channels", s.c),
        ));
    }
    for &sb in subbands {
        let ss = g.shape(sb);
        if ss.n != 4 * s.c || ss.c != 1 {
            return Err(Error::shape(
                "wtconv",
                format!("subband kernel {ss} is not depthwise over {} packed channels", 4 * s.c),
            ));
        }
    }
    let base_out = g.conv2d(x, base, None, ConvSpec::new(1, bs.h / 2, s.c))?;

    let m = 1usize << levels;
    let (pad_h, pad_w) = ((m - s.h % m) % m, (m - s.w % m) % m);
    let xp = if pad_h > 0 || pad_w > 0 { g.reflect_pad(x, pad_h, pad_w)? } else { x };

    let mut filtered = Vec::with_capacity(levels);
    let mut ll = xp;
    for &sb in subbands {
        let packed = g.haar_dwt(ll)?;
        ll = g.slice_channels(packed, 0, s.c)?;
        let k = g.shape(sb).h;
        filtered.push(g.conv2d(packed, sb, None, ConvSpec::new(1, k / 2, 4 * s.c))?);
    }
    let mut deeper: Option<Var> = None;
    for &f in filtered.iter().rev() {
        let merged = match deeper {
            None => f,
            Some(d) => {
                let fll = g.slice_channels(f, 0, s.c)?;
                let highs = g.slice_channels(f, s.c, 4 * s.c)?;
                let sum = g.add(fll, d)?;
                g.concat_channels(&[sum, highs])?
            }
        };
        deeper = Some(g.haar_idwt(merged)?);
    }
    let mut wave = deeper.expect("at least one level");
    if pad_h > 0 || pad_w > 0 {
        wave = g.crop(wave, s.h, s.w)?;
    }
    g.add(base_out, wave)
}

/// Stateless wavelet convolution of a tensor.
pub fn wtconv_forward(x: &Tensor4, p: &WtConvParams) -> Result<Tensor4> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let base = g.input(p.base_kernel.clone());
    let subs: Vec<Var> = p.subband_kernels.iter().map(|k| g.input(k.clone())).collect();
    let y = wtconv_graph(&mut g, xv, base, &subs)?;
    Ok(g.value(y).clone())
}

/// Trainable wavelet convolution layer (depthwise, shape-preserving).
#[derive(Debug, Clone)]
pub struct WtConv {
    pub channels: usize,
    pub base: ParamId,
    pub subbands: Vec<ParamId>,
}

impl WtConv {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, levels: usize, k: usize) -> Result<Self> {
        let base = he_normal(Shape4::new(channels, 1, k, k), k * k, 1.0, init.rng);
        let base = init.tensor(&format!("{name}.base"), base, true)?;
        let mut subbands = Vec::with_capacity(levels);
        for l in 0..levels {
            let w = he_normal(Shape4::new(4 * channels, 1, k, k), k * k, 0.1, init.rng);
            subbands.push(init.tensor(&format!("{name}.level{l}"), w, true)?);
        }
        Ok(WtConv {
            channels,
            base,
            subbands,
        })
    }

    pub fn params(&self, store: &ParamStore) -> WtConvParams {
        WtConvParams {
            base_kernel: store.get(self.base).value.clone(),
            subband_kernels: self.subbands.iter().map(|&i| store.get(i).value.clone()).collect(),
        }
    }
}

impl Layer for WtConv {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let base = g.param(store, self.base);
        let subs: Vec<Var> = self.subbands.iter().map(|&i| g.param(store, i)).collect();
        wtconv_graph(g, x, base, &subs)
    }
}
