//! Linear attention over spatial tokens and the attention-based C2F block.
//!
//! Every spatial position of a feature map is a token. With the positive
//! feature map `φ(u) = elu(u) + 1`, each head computes
//!
//! ```text
//! y_i = φ(q_i)ᵀ (Σ_j φ(k_j) v_jᵀ) / (φ(q_i)ᵀ Σ_j φ(k_j) + eps)
//! ```
//!
//! in `O(N · d²)` rather than the `O(N² · d)` of materialising all pairwise
//! weights. No positional term is added, so the map is permutation-equivariant
//! over tokens.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Conv, ConvBnAct, Init, Layer};
use crate::param::ParamStore;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_EPS: f64 = 1e-9;

/// Weights of one attention unit. Projections are `C×C×1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAttnParams {
    pub wq: Tensor4,
    pub wk: Tensor4,
    pub wv: Tensor4,
    /// Output mix applied after the residual add.
    pub wo: Tensor4,
    pub heads: usize,
    pub eps: f64,
}

impl LinearAttnParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let want = Shape4::new(channels, channels, 1, 1);
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != want {
                return Err(Error::shape("linear_attention", format!("{name} is {}, expected {want}", w.shape())));
            }
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::shape(
                "linear_attention",
                format!("channels {channels} not divisible by heads {}", self.heads),
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Projects `x` to queries, keys and values and aggregates (no residual).
pub fn attention_core_graph(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var, heads: usize, eps: f64) -> Result<Var> {
    let pw = ConvSpec::new(1, 0, 1);
    let q = g.conv2d(x, wq, None, pw)?;
    let k = g.conv2d(x, wk, None, pw)?;
    let v = g.conv2d(x, wv, None, pw)?;
    let q = g.elu1(q);
    let k = g.elu1(k);
    g.linear_attention(q, k, v, heads, eps)
}

/// Attention output before the residual connection.
pub fn attention_tokens(x: &Tensor4, p: &LinearAttnParams) -> Result<Tensor4> {
    p.validate(x.shape().c)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let [wq, wk, wv] = [&p.wq, &p.wk, &p.wv].map(|w| g.input(w.clone()));
    let y = attention_core_graph(&mut g, xv, wq, wk, wv, p.heads, p.eps)?;
    Ok(g.value(y).clone())
}

/// Full attention unit: `wo ∗ (x + attention(x))`.
pub fn linear_attention(x: &Tensor4, p: &LinearAttnParams) -> Result<Tensor4> {
    p.validate(x.shape().c)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let [wq, wk, wv, wo] = [&p.wq, &p.wk, &p.wv, &p.wo].map(|w| g.input(w.clone()));
    let a = attention_core_graph(&mut g, xv, wq, wk, wv, p.heads, p.eps)?;
    let r = g.add(xv, a)?;
    let y = g.conv2d(r, wo, None, ConvSpec::new(1, 0, 1))?;
    Ok(g.value(y).clone())
}

/// Trainable attention unit.
#[derive(Debug, Clone)]
pub struct LinearAttention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub mix: Conv,
    pub heads: usize,
    pub eps: f64,
}

impl LinearAttention {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::shape(
                "linear_attention",
                format!("channels {channels} not divisible by heads {heads}"),
            ));
        }
        let pw = ConvSpec::new(1, 0, 1);
        // Damped projections keep the attention output near the residual's scale.
        let mut proj = |suffix: &str, gain: f64| init.conv(&format!("{name}.{suffix}"), channels, channels, 1, pw, false, gain);
        Ok(LinearAttention {
            q: proj("q", 0.5)?,
            k: proj("k", 0.5)?,
            v: proj("v", 0.7)?,
            mix: proj("mix", 0.7)?,
            heads,
            eps: DEFAULT_EPS,
        })
    }

    pub fn params(&self, store: &ParamStore) -> LinearAttnParams {
        let get = |c: &Conv| store.get(c.weight).value.clone();
        LinearAttnParams {
            wq: get(&self.q),
            wk: get(&self.k),
            wv: get(&self.v),
            wo: get(&self.mix),
            heads: self.heads,
            eps: self.eps,
        }
    }
}

impl Layer for LinearAttention {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wq = g.param(store, self.q.weight);
        let wk = g.param(store, self.k.weight);
        let wv = g.param(store, self.v.weight);
        let a = attention_core_graph(g, x, wq, wk, wv, self.heads, self.eps)?;
        let r = g.add(x, a)?;
        self.mix.forward(g, store, r)
    }
}

/// C2F block whose inner units are linear-attention units instead of bottlenecks.
///
/// Entry 1×1 conv to `2h` channels, split into halves `a | b`, run `b` through
/// the stacked units keeping every intermediate, concatenate
/// `[a, b, u_1, …, u_n]` and mix back with an exit 1×1 conv.
#[derive(Debug, Clone)]
pub struct AttentionC2f {
    pub hidden: usize,
    pub entry: ConvBnAct,
    pub units: Vec<LinearAttention>,
    pub exit: ConvBnAct,
}

impl AttentionC2f {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, n_attn: usize, heads: usize) -> Result<Self> {
        let hidden = cout / 2;
        if hidden == 0 {
            return Err(Error::InvalidArgument(format!("attention C2F needs at least 2 channels, got {cout}")));
        }
        let entry = init.conv_bn_act(&format!("{name}.entry"), cin, 2 * hidden, 1, 1)?;
        let units = (0..n_attn)
            .map(|i| LinearAttention::new(init, &format!("{name}.attn{i}"), hidden, heads))
            .collect::<Result<Vec<_>>>()?;
        let exit = init.conv_bn_act(&format!("{name}.exit"), (2 + n_attn) * hidden, cout, 1, 1)?;
        Ok(AttentionC2f {
            hidden,
            entry,
            units,
            exit,
        })
    }
}

impl Layer for AttentionC2f {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.entry.forward(g, store, x)?;
        let a = g.slice_channels(y, 0, self.hidden)?;
        let mut b = g.slice_channels(y, self.hidden, 2 * self.hidden)?;
        let mut parts = vec![a, b];
        for u in &self.units {
            b = u.forward(g, store, b)?;
            parts.push(b);
        }
        let cat = g.concat_channels(&parts)?;
        self.exit.forward(g, store, cat)
    }
}
