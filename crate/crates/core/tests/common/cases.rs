//! Gradient-suite cases: every differentiable graph op and the composite blocks.

use aaw_core::attention::{AttentionC2f, LinearAttention};
use aaw_core::graph::{CellAnchor, Graph, Var};
use aaw_core::kernels::ConvSpec;
use aaw_core::nn::{Init, Layer};
use aaw_core::wavelet::WtConv;
use aaw_core::zoo::{wtc2f, Bottleneck, C2f, Downsample, HeadKind, WaveletConfig};
use aaw_core::{ParamStore, Result, Shape4, Tensor4};
use rand::Rng;

use super::{rand_tensor, rng, GradCheck};

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor4>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[Shape4], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    let mut r = rng(seed);
    OpCase {
        name,
        inputs: shapes.iter().map(|&s| rand_tensor(s, &mut r)).collect(),
        f: Box::new(f),
    }
}

const fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w)
}

pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("conv2d", &[sh(2, 3, 5, 5), sh(4, 3, 3, 3), sh(1, 4, 1, 1)], 1, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1, 1))
        }),
        case("conv2d_stride2", &[sh(1, 2, 6, 7), sh(3, 2, 3, 3)], 2, |g, v| {
            g.conv2d(v[0], v[1], None, ConvSpec::new(2, 1, 1))
        }),
        case("conv2d_depthwise", &[sh(1, 4, 5, 5), sh(4, 1, 3, 3)], 3, |g, v| {
            g.conv2d(v[0], v[1], None, ConvSpec::new(1, 1, 4))
        }),
        case("conv2d_grouped_1x1", &[sh(1, 4, 3, 3), sh(6, 2, 1, 1), sh(1, 6, 1, 1)], 4, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 0, 2))
        }),
        case("affine", &[sh(2, 3, 2, 2), sh(1, 3, 1, 1), sh(1, 3, 1, 1)], 5, |g, v| g.affine(v[0], v[1], v[2])),
        case("silu", &[sh(1, 2, 3, 3)], 6, |g, v| Ok(g.silu(v[0]))),
        case("elu1", &[sh(1, 2, 3, 3)], 7, |g, v| Ok(g.elu1(v[0]))),
        case("scale", &[sh(1, 2, 2, 2)], 8, |g, v| Ok(g.scale(v[0], -0.7))),
        case("add", &[sh(1, 2, 2, 3), sh(1, 2, 2, 3)], 9, |g, v| g.add(v[0], v[1])),
        case("mul", &[sh(1, 2, 2, 3), sh(1, 2, 2, 3)], 10, |g, v| g.mul(v[0], v[1])),
        case("upsample2x", &[sh(1, 2, 3, 2)], 11, |g, v| Ok(g.upsample2x(v[0]))),
        case("upsample_bilinear", &[sh(1, 2, 3, 3)], 12, |g, v| Ok(g.upsample_bilinear(v[0], 4))),
        case("concat_channels", &[sh(1, 2, 2, 2), sh(1, 3, 2, 2)], 13, |g, v| g.concat_channels(&[v[0], v[1]])),
        case("slice_channels", &[sh(2, 4, 2, 2)], 14, |g, v| g.slice_channels(v[0], 1, 3)),
        case("haar_dwt", &[sh(1, 2, 4, 6)], 15, |g, v| g.haar_dwt(v[0])),
        case("haar_idwt", &[sh(1, 8, 2, 3)], 16, |g, v| g.haar_idwt(v[0])),
        case("reflect_pad", &[sh(1, 2, 3, 5)], 17, |g, v| g.reflect_pad(v[0], 3, 2)),
        case("crop", &[sh(1, 2, 5, 5)], 18, |g, v| g.crop(v[0], 3, 4)),
        case("linear_attention", &[sh(1, 4, 3, 3), sh(1, 4, 3, 3), sh(1, 4, 3, 3)], 19, |g, v| {
            let q = g.elu1(v[0]);
            let k = g.elu1(v[1]);
            g.linear_attention(q, k, v[2], 2, 1e-9)
        }),
        case("select_cell", &[sh(2, 6, 3, 3)], 20, |g, v| g.select_cell(v[0], 1, 1, 2, 1, 4)),
        case("proto_mix", &[sh(1, 3, 1, 1), sh(2, 3, 4, 4)], 21, |g, v| g.proto_mix(v[0], v[1], 1)),
        case("sum", &[sh(1, 3, 2, 2)], 22, |g, v| Ok(g.sum(v[0]))),
        case("weighted_sum", &[sh(1, 2, 2, 2), sh(1, 2, 2, 2)], 23, |g, v| {
            let a = g.sum(v[0]);
            let m = g.mul(v[0], v[1])?;
            let b = g.sum(m);
            g.weighted_sum(&[(a, 0.3), (b, -1.2)])
        }),
        case("box_iou_loss", &[sh(1, 4, 1, 1)], 24, |g, v| {
            let anchor = CellAnchor {
                cx: 8.0,
                cy: 8.0,
                stride: 8.0,
            };
            g.box_iou_loss(v[0], anchor, [2.0, 3.0, 15.0, 12.0])
        }),
    ];
    let mut r = rng(25);
    let target: Vec<f64> = (0..18).map(|_| f64::from(u8::from(r.random::<bool>()))).collect();
    let weight: Vec<f64> = (0..18).map(|_| r.random_range(0.1..1.0)).collect();
    cases.push(case("bce_logits", &[sh(1, 2, 3, 3)], 26, move |g, v| {
        g.bce_logits(v[0], target.clone(), weight.clone())
    }));
    cases
}

pub struct BlockCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub layer: Box<dyn Layer>,
    pub x: Tensor4,
}

fn block(
    name: &'static str,
    x: Shape4,
    seed: u64,
    build: impl FnOnce(&mut Init<'_>) -> Result<Box<dyn Layer>>,
) -> BlockCase {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = build(&mut Init::new(&mut store, &mut r)).unwrap();
    // Perturb the zero-initialised shifts so every parameter sees a generic point.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    BlockCase {
        name,
        store,
        layer,
        x: rand_tensor(x, &mut r),
    }
}

/// The composite blocks: the four novel ones first.
pub fn block_cases() -> Vec<BlockCase> {
    let wl = WaveletConfig::default();
    vec![
        block("wtconv", sh(1, 4, 8, 8), 31, |i| Ok(Box::new(WtConv::new(i, "wt", 4, 2, 3)?))),
        block("wtconv_padded", sh(1, 2, 6, 10), 32, |i| Ok(Box::new(WtConv::new(i, "wt", 2, 2, 3)?))),
        block("linear_attention", sh(1, 4, 4, 4), 33, |i| Ok(Box::new(LinearAttention::new(i, "la", 4, 2)?))),
        block("attention_c2f", sh(1, 8, 4, 4), 34, |i| Ok(Box::new(AttentionC2f::new(i, "ac", 8, 8, 1, 2)?))),
        block("wtc2f", sh(1, 4, 8, 8), 35, |i| Ok(Box::new(wtc2f(i, "wc", 4, 4, 1, wl)?))),
        block("c2f", sh(1, 4, 4, 4), 36, |i| Ok(Box::new(C2f::new(i, "c2f", 4, 4, 1, None)?))),
        block("bottleneck", sh(1, 2, 4, 4), 37, |i| Ok(Box::new(Bottleneck::new(i, "bn", 2)?))),
        block("wavelet_downsample", sh(1, 2, 8, 8), 38, |i| {
            Ok(Box::new(Downsample::new(i, "down", HeadKind::WtConv, 2, 4, wl)?))
        }),
    ]
}

/// Finite-difference check of a layer's parameters and input.
///
/// `points` coordinates of every parameter tensor and of the input are checked.
pub fn grad_check_layer(c: &BlockCase, points: usize, seed: u64) -> GradCheck {
    const EPS: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut r = rng(seed);
    let eval = |store: &ParamStore, x: &Tensor4, proj: Option<&Tensor4>| -> (f64, Shape4) {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = c.layer.forward(&mut g, store, xv).unwrap();
        let s = g.shape(y);
        let p = g.input(proj.cloned().unwrap_or_else(|| Tensor4::full(s, 1.0)));
        let m = g.mul(y, p).unwrap();
        let l = g.sum(m);
        (g.value(l).item(), s)
    };
    let (_, out_shape) = eval(&c.store, &c.x, None);
    let proj = rand_tensor(out_shape, &mut r);

    let mut store = c.store.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let xv = g.variable(c.x.clone());
    let y = c.layer.forward(&mut g, &store, xv).unwrap();
    let p = g.input(proj.clone());
    let m = g.mul(y, p).unwrap();
    let loss = g.sum(m);
    let grads = g.backward_into(loss, &mut store).unwrap();
    let gx = grads.get(xv).unwrap().to_vec();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut compare = |a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        worst = worst.max(rel);
        checked += 1;
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let len = store.get(id).value.len();
        let analytic = store.get(id).value.grad.clone().unwrap_or_else(|| vec![0.0; len]);
        for _ in 0..points {
            let i = r.random_range(0..len);
            let mut plus = c.store.clone();
            plus.get_mut(id).value.data_mut()[i] += EPS;
            let mut minus = c.store.clone();
            minus.get_mut(id).value.data_mut()[i] -= EPS;
            let n = (eval(&plus, &c.x, Some(&proj)).0 - eval(&minus, &c.x, Some(&proj)).0) / (2.0 * EPS);
            compare(analytic[i], n);
        }
    }
    for _ in 0..points {
        let i = r.random_range(0..c.x.len());
        let mut plus = c.x.clone();
        plus.data_mut()[i] += EPS;
        let mut minus = c.x.clone();
        minus.data_mut()[i] -= EPS;
        let n = (eval(&c.store, &plus, Some(&proj)).0 - eval(&c.store, &minus, Some(&proj)).0) / (2.0 * EPS);
        compare(gx[i], n);
    }
    GradCheck { worst, checked }
}
