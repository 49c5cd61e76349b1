//! Parameterised layers shared by every block.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::param::{he_normal, ParamId, ParamStore};
use crate::tensor::{Shape4, Tensor4};

/// Anything that maps one feature map to another.
pub trait Layer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var>;
}

/// Parameter factory: registers named, seeded tensors in a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor4, trainable: bool) -> Result<ParamId> {
        self.store.add(name, value, trainable)
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        gain: f64,
    ) -> Result<Conv> {
        let cin_g = cin / spec.groups;
        let w = he_normal(Shape4::new(cout, cin_g, k, k), cin_g * k * k, gain, self.rng);
        let weight = self.store.add(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, cout, 1, 1)), true)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    pub fn conv_bn_act(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ConvBnAct> {
        let conv = self.conv(name, cin, cout, k, ConvSpec::new(stride, k / 2, 1), false, 1.0)?;
        let norm = self.norm(name, cout)?;
        Ok(ConvBnAct { conv, norm })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<ChannelAffine> {
        let scale = self.store.add(format!("{name}.norm.scale"), Tensor4::full(Shape4::new(1, c, 1, 1), 1.0), true)?;
        let shift = self.store.add(format!("{name}.norm.shift"), Tensor4::zeros(Shape4::new(1, c, 1, 1)), true)?;
        Ok(ChannelAffine { scale, shift })
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Layer for Conv {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec)
    }
}

/// Batch norm in inference form: learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Layer for ChannelAffine {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        g.affine(x, s, b)
    }
}

/// Convolution, affine norm, SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub norm: ChannelAffine,
}

impl Layer for ConvBnAct {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.silu(y))
    }
}
