//! Reverse-mode differentiation over a recorded forward graph.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node only ever refers to earlier nodes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, sigmoid, softplus, ConvSpec};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape4, Tensor4};
use crate::wavelet;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Location of a prediction cell, used to decode distance-style box offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellAnchor {
    pub cx: f64,
    pub cy: f64,
    pub stride: f64,
}

impl CellAnchor {
    /// Box `(x1, y1, x2, y2)` from raw left/top/right/bottom logits.
    pub fn decode(&self, raw: [f64; 4]) -> [f64; 4] {
        let s = self.stride;
        [
            self.cx - s * softplus(raw[0]),
            self.cy - s * softplus(raw[1]),
            self.cx + s * softplus(raw[2]),
            self.cy + s * softplus(raw[3]),
        ]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Affine { x: Var, scale: Var, shift: Var },
    Silu(Var),
    Elu1(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Upsample2x(Var),
    UpsampleBilinear(Var, usize),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    HaarDwt(Var),
    HaarIdwt(Var),
    ReflectPad { x: Var },
    Crop { x: Var },
    LinearAttention { q: Var, k: Var, v: Var, heads: usize, eps: f64 },
    SelectCell { x: Var, n: usize, y: usize, x_: usize, start: usize },
    ProtoMix { coeffs: Var, protos: Var, n: usize },
    BceLogits { x: Var, target: Vec<f64>, weight: Vec<f64> },
    BoxIouLoss { raw: Var, anchor: CellAnchor, target: [f64; 4] },
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv { .. } => "conv2d",
            Op::Affine { .. } => "affine",
            Op::Silu(_) => "silu",
            Op::Elu1(_) => "elu1",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Upsample2x(_) => "upsample2x",
            Op::UpsampleBilinear(..) => "upsample_bilinear",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::HaarDwt(_) => "haar_dwt",
            Op::HaarIdwt(_) => "haar_idwt",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::Crop { .. } => "crop",
            Op::LinearAttention { .. } => "linear_attention",
            Op::SelectCell { .. } => "select_cell",
            Op::ProtoMix { .. } => "proto_mix",
            Op::BceLogits { .. } => "bce_logits",
            Op::BoxIouLoss { .. } => "box_iou_loss",
            Op::Sum(_) => "sum",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
    macs: u64,
}

/// One multiply-accumulate-bearing node of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacEntry {
    pub op: &'static str,
    pub output: Shape4,
    pub macs: u64,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool, macs: u64) -> Var {
        debug_assert!(!value.data().iter().any(|v| v.is_nan()), "NaN produced by {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            macs,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false, 0)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true, 0)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut value = p.value.clone();
        value.grad = None;
        let v = self.push(value, Op::Param, p.trainable, 0);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_forward(self.value(x), self.value(w), bias.as_deref(), spec)?;
        let macs = kernels::conv2d_macs(self.shape(x), self.shape(w), out.shape());
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec }, ng, macs))
    }

    /// Per-channel `x * scale + shift`; `scale` and `shift` are `1×C×1×1`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x);
        let want = Shape4::new(1, s.c, 1, 1);
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != want {
                return Err(Error::shape(
                    "affine",
                    format!("{name} must be {want} for input {s}, got {}", self.shape(v)),
                ));
            }
        }
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let plane = s.plane();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = i % s.c;
            for v in chunk {
                *v = *v * sc[c] + sh[c];
            }
        }
        let out = Tensor4::from_vec(s, out)?;
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(out, Op::Affine { x, scale, shift }, ng, 0))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor4::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(out, op, ng, 0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// `elu(x) + 1`, a strictly positive feature map.
    pub fn elu1(&mut self, x: Var) -> Var {
        self.map(x, Op::Elu1(x), |v| if v > 0.0 { v + 1.0 } else { v.exp() })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, format!("operands {sa} and {sb} differ")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor4::from_vec(sa, data)?, op, ng, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let out = Tensor4::from_fn(Shape4::new(s.n, s.c, s.h * 2, s.w * 2), |n, c, y, xx| t.at(n, c, y / 2, xx / 2));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2x(x), ng, 0)
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let out = kernels::upsample_bilinear(self.value(x), factor);
        let ng = self.ng(x);
        self.push(out, Op::UpsampleBilinear(x, factor), ng, 0)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape(
                    "concat",
                    format!("input {s} does not match batch/spatial dims of {s0}"),
                ));
            }
            c += s.c;
        }
        let os = Shape4::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor4::from_vec(os, data)?, Op::Concat(xs.to_vec()), ng, 0))
    }

    /// Channels `[start, end)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} invalid for {} channels", s.c),
            ));
        }
        let out = self.value(x).channel_slice(start, end);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, start }, ng, 0))
    }

    /// Orthonormal Haar analysis; output channels are `[LL | LH | HL | HH]`.
    pub fn haar_dwt(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::haar_analysis_packed(self.value(x))?;
        let macs = wavelet::haar_macs(self.shape(x));
        let ng = self.ng(x);
        Ok(self.push(out, Op::HaarDwt(x), ng, macs))
    }

    /// Inverse of [`Graph::haar_dwt`].
    pub fn haar_idwt(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::haar_synthesis_packed(self.value(x))?;
        let macs = wavelet::haar_macs(out.shape());
        let ng = self.ng(x);
        Ok(self.push(out, Op::HaarIdwt(x), ng, macs))
    }

    /// Pads bottom and right edges by mirror reflection (edge pixel not repeated).
    pub fn reflect_pad(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape("reflect_pad", format!("cannot pad empty input {s}")));
        }
        let out = Tensor4::from_fn(Shape4::new(s.n, s.c, s.h + pad_h, s.w + pad_w), |n, c, y, xx| {
            t.at(n, c, refl(y, s.h), refl(xx, s.w))
        });
        let ng = self.ng(x);
        Ok(self.push(out, Op::ReflectPad { x }, ng, 0))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if h > s.h || w > s.w || h == 0 || w == 0 {
            return Err(Error::shape("crop", format!("cannot crop {s} to {h}x{w}")));
        }
        let out = Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| t.at(n, c, y, xx));
        let ng = self.ng(x);
        Ok(self.push(out, Op::Crop { x }, ng, 0))
    }

    /// Kernelized attention with already feature-mapped `q` and `k`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, eps: f64) -> Result<Var> {
        let s = self.shape(q);
        if self.shape(k) != s || self.shape(v) != s {
            return Err(Error::shape(
                "linear_attention",
                format!("q {s}, k {}, v {} must match", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || s.c % heads != 0 {
            return Err(Error::shape(
                "linear_attention",
                format!("channels {} not divisible by heads {heads}", s.c),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("attention eps must be positive, got {eps}")));
        }
        let out = kernels::linear_attention_forward(self.value(q), self.value(k), self.value(v), heads, eps);
        let macs = kernels::linear_attention_macs(s, heads);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::LinearAttention { q, k, v, heads, eps }, ng, macs))
    }

    /// Channels `[start, end)` of image `n` at `(y, x)`, as a `1×(end-start)×1×1` tensor.
    pub fn select_cell(&mut self, x: Var, n: usize, y: usize, xx: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if n >= s.n || y >= s.h || xx >= s.w || start >= end || end > s.c {
            return Err(Error::shape(
                "select_cell",
                format!("cell ({n}, {start}..{end}, {y}, {xx}) outside {s}"),
            ));
        }
        let data = (start..end).map(|c| t.at(n, c, y, xx)).collect();
        let out = Tensor4::from_vec(Shape4::new(1, end - start, 1, 1), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SelectCell { x, n, y, x_: xx, start }, ng, 0))
    }

    /// `Σ_p coeffs[p] · protos[n, p]` as a `1×1×H×W` map.
    pub fn proto_mix(&mut self, coeffs: Var, protos: Var, n: usize) -> Result<Var> {
        let (cs, ps) = (self.shape(coeffs), self.shape(protos));
        if cs != Shape4::new(1, ps.c, 1, 1) || n >= ps.n {
            return Err(Error::shape(
                "proto_mix",
                format!("coefficients {cs} incompatible with prototypes {ps} at image {n}"),
            ));
        }
        let (c, p) = (self.value(coeffs).data(), self.value(protos).data());
        let plane = ps.plane();
        let mut out = vec![0.0; plane];
        for (k, &ck) in c.iter().enumerate() {
            let src = &p[(n * ps.c + k) * plane..(n * ps.c + k + 1) * plane];
            for (o, s) in out.iter_mut().zip(src) {
                *o += ck * s;
            }
        }
        let macs = (plane * ps.c) as u64;
        let ng = self.ng(coeffs) || self.ng(protos);
        let out = Tensor4::from_vec(Shape4::new(1, 1, ps.h, ps.w), out)?;
        Ok(self.push(out, Op::ProtoMix { coeffs, protos, n }, ng, macs))
    }

    /// Scalar `Σ weight_i · BCE(sigmoid(x_i), target_i)`, evaluated from logits.
    pub fn bce_logits(&mut self, x: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let len = self.value(x).len();
        if target.len() != len || weight.len() != len {
            return Err(Error::shape(
                "bce_logits",
                format!("logits have {len} values, targets {}, weights {}", target.len(), weight.len()),
            ));
        }
        let mut total = 0.0;
        for ((&z, &t), &w) in self.value(x).data().iter().zip(&target).zip(&weight) {
            if w != 0.0 {
                total += w * (softplus(z) - t * z);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor4::scalar(total), Op::BceLogits { x, target, weight }, ng, 0))
    }

    /// Scalar `1 - IoU(decoded box, target)` for raw `1×4×1×1` ltrb logits.
    pub fn box_iou_loss(&mut self, raw: Var, anchor: CellAnchor, target: [f64; 4]) -> Result<Var> {
        if self.shape(raw) != Shape4::new(1, 4, 1, 1) {
            return Err(Error::shape("box_iou_loss", format!("raw box must be 1x4x1x1, got {}", self.shape(raw))));
        }
        let r = self.value(raw).data();
        let pred = anchor.decode([r[0], r[1], r[2], r[3]]);
        let loss = 1.0 - box_iou(pred, target);
        let ng = self.ng(raw);
        Ok(self.push(Tensor4::scalar(loss), Op::BoxIouLoss { raw, anchor, target }, ng, 0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor4::scalar(total), Op::Sum(x), ng, 0)
    }

    /// `Σ w_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.shape(v) != Shape4::scalar() {
                return Err(Error::shape("weighted_sum", format!("term {} is not scalar", self.shape(v))));
            }
            total += w * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor4::scalar(total), Op::WeightedSum(terms.to_vec()), ng, 0))
    }

    /// Multiply-accumulate bearing nodes in forward order.
    pub fn mac_trace(&self) -> Vec<MacEntry> {
        self.nodes
            .iter()
            .filter(|n| n.macs > 0)
            .map(|n| MacEntry {
                op: n.op.name(),
                output: n.value.shape(),
                macs: n.macs,
            })
            .collect()
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| n.macs).sum()
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != Shape4::scalar() {
            return Err(Error::shape("backward", format!("loss must be 1x1x1x1, got {s}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {
                out.leaves.insert(Var(i), g);
            }
            Op::Conv { x, w, b, spec } => {
                let want = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *spec, want);
                if let Some(gx) = cg.x {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = cg.w {
                    self.acc(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.acc(grads, *b, gb);
                }
            }
            Op::Affine { x, scale, shift } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let plane = s.plane();
                let sc = self.value(*scale).data();
                let mut gscale = vec![0.0; s.c];
                let mut gshift = vec![0.0; s.c];
                let mut gx = vec![0.0; g.len()];
                for (idx, (gc, xc)) in g.chunks(plane).zip(xv.data().chunks(plane)).enumerate() {
                    let c = idx % s.c;
                    for j in 0..plane {
                        gscale[c] += gc[j] * xc[j];
                        gshift[c] += gc[j];
                        gx[idx * plane + j] = gc[j] * sc[c];
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *scale, gscale);
                self.acc(grads, *shift, gshift);
            }
            Op::Silu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Elu1(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { gv * v.exp() })
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(av).map(|(g, a)| g * a).collect();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, f) => {
                self.acc(grads, *x, g.iter().map(|v| v * f).collect());
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let ow = s.w * 2;
                let mut gx = vec![0.0; s.numel()];
                for p in 0..s.n * s.c {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let o = p * 4 * s.plane() + 2 * y * ow + 2 * xx;
                            gx[p * s.plane() + y * s.w + xx] = g[o] + g[o + 1] + g[o + ow] + g[o + ow + 1];
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::UpsampleBilinear(x, f) => {
                let gx = kernels::upsample_bilinear_backward(self.shape(*x), *f, &g);
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let mut offset = 0;
                for &v in xs {
                    let vs = self.shape(v);
                    let per = vs.c * vs.plane();
                    if self.ng(v) {
                        let mut gv = Vec::with_capacity(vs.numel());
                        for n in 0..s.n {
                            let base = n * s.c * s.plane() + offset;
                            gv.extend_from_slice(&g[base..base + per]);
                        }
                        self.acc(grads, v, gv);
                    }
                    offset += per;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let os = node.value.shape();
                let plane = xs.plane();
                let per = os.c * plane;
                self.acc_with(grads, *x, |gx| {
                    for n in 0..xs.n {
                        let dst = (n * xs.c + start) * plane;
                        gx[dst..dst + per]
                            .iter_mut()
                            .zip(&g[n * per..(n + 1) * per])
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::HaarDwt(x) => {
                let gt = Tensor4::from_vec(node.value.shape(), g).expect("grad matches node");
                let gx = wavelet::haar_synthesis_packed(&gt).expect("valid packed shape");
                self.acc(grads, *x, gx.into_data());
            }
            Op::HaarIdwt(x) => {
                let gt = Tensor4::from_vec(node.value.shape(), g).expect("grad matches node");
                let gx = wavelet::haar_analysis_packed(&gt).expect("even output dims");
                self.acc(grads, *x, gx.into_data());
            }
            Op::ReflectPad { x } => {
                let s = self.shape(*x);
                let os = node.value.shape();
                self.acc_with(grads, *x, |gx| {
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for y in 0..os.h {
                                for xx in 0..os.w {
                                    gx[s.index(n, c, refl(y, s.h), refl(xx, s.w))] += g[os.index(n, c, y, xx)];
                                }
                            }
                        }
                    }
                });
            }
            Op::Crop { x } => {
                let s = self.shape(*x);
                let os = node.value.shape();
                self.acc_with(grads, *x, |gx| {
                    for n in 0..os.n {
                        for c in 0..os.c {
                            for y in 0..os.h {
                                for xx in 0..os.w {
                                    gx[s.index(n, c, y, xx)] += g[os.index(n, c, y, xx)];
                                }
                            }
                        }
                    }
                });
            }
            Op::LinearAttention { q, k, v, heads, eps } => {
                let (gq, gk, gv) = kernels::linear_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    *eps,
                    &g,
                );
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::SelectCell { x, n, y, x_, start } => {
                let s = self.shape(*x);
                self.acc_with(grads, *x, |gx| {
                    for (j, gv) in g.iter().enumerate() {
                        gx[s.index(*n, start + j, *y, *x_)] += gv;
                    }
                });
            }
            Op::ProtoMix { coeffs, protos, n } => {
                let ps = self.shape(*protos);
                let plane = ps.plane();
                let pv = self.value(*protos).data();
                let cv = self.value(*coeffs).data();
                if self.ng(*coeffs) {
                    let gc = (0..ps.c)
                        .map(|k| {
                            let src = &pv[(n * ps.c + k) * plane..(n * ps.c + k + 1) * plane];
                            src.iter().zip(&g).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    self.acc(grads, *coeffs, gc);
                }
                self.acc_with(grads, *protos, |gp| {
                    for (k, &ck) in cv.iter().enumerate() {
                        let dst = &mut gp[(n * ps.c + k) * plane..(n * ps.c + k + 1) * plane];
                        dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += ck * gv);
                    }
                });
            }
            Op::BceLogits { x, target, weight } => {
                let g0 = g[0];
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&z, &t), &w)| if w == 0.0 { 0.0 } else { g0 * w * (sigmoid(z) - t) })
                    .collect();
                self.acc(grads, *x, gx);
            }
            Op::BoxIouLoss { raw, anchor, target } => {
                let r = self.value(*raw).data();
                let graw = box_iou_grad([r[0], r[1], r[2], r[3]], *anchor, *target);
                self.acc(grads, *raw, graw.iter().map(|v| -v * g[0]).collect());
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; len]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, vec![g[0] * w]);
                }
            }
        }
    }
}

/// Mirror index into `[0, len)`; reflects repeatedly when `i` runs past twice the length.
fn refl(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// IoU of two `(x1, y1, x2, y2)` boxes; zero when either is degenerate.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// d IoU / d raw for the ltrb parameterisation of [`CellAnchor::decode`].
fn box_iou_grad(raw: [f64; 4], anchor: CellAnchor, t: [f64; 4]) -> [f64; 4] {
    let s = anchor.stride;
    let d: [f64; 4] = raw.map(|r| s * softplus(r));
    let p = anchor.decode(raw);
    let iw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih = p[3].min(t[3]) - p[1].max(t[1]);
    let (iw, ih) = (iw.max(0.0), ih.max(0.0));
    let inter = iw * ih;
    let area_p = (d[0] + d[2]) * (d[1] + d[3]);
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);
    let union = area_p + area_t - inter;
    if union <= 0.0 {
        return [0.0; 4];
    }
    // IoU = I / (Ap + At - I)
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // Partial derivatives of the intersection w.r.t. the predicted edges.
    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    if iw > 0.0 && ih > 0.0 {
        if p[0] > t[0] {
            dx1 = -ih;
        }
        if p[2] < t[2] {
            dx2 = ih;
        }
        if p[1] > t[1] {
            dy1 = -iw;
        }
        if p[3] < t[3] {
            dy2 = iw;
        }
    }
    // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b
    let g_l = d_inter * (-dx1) + d_area * (d[1] + d[3]);
    let g_t = d_inter * (-dy1) + d_area * (d[0] + d[2]);
    let g_r = d_inter * dx2 + d_area * (d[1] + d[3]);
    let g_b = d_inter * dy2 + d_area * (d[0] + d[2]);
    let dd = raw.map(|r| s * sigmoid(r));
    [g_l * dd[0], g_t * dd[1], g_r * dd[2], g_b * dd[3]]
}
