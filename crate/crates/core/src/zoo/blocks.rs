//! C2F-family blocks and stage downsampling heads.

use crate::attention::AttentionC2f;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvBnAct, Init, Layer};
use crate::param::ParamStore;
use crate::wavelet::WtConv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Plain C2F with residual bottlenecks.
    C2f,
    /// C2F whose entry head is a wavelet convolution; bottlenecks kept.
    WtC2f,
    /// C2F whose bottlenecks are replaced by linear-attention units.
    AttnC2f,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::C2f => "c2f",
            BlockKind::WtC2f => "wtc2f",
            BlockKind::AttnC2f => "attn_c2f",
        }
    }
}

/// Stride-2 layer at the start of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// 3×3 stride-2 convolution.
    Conv,
    /// Wavelet convolution followed by a 1×1 stride-2 projection.
    WtConv,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Conv => "conv",
            HeadKind::WtConv => "wtconv",
        }
    }
}

/// Hyper-parameters shared by wavelet layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaveletConfig {
    pub levels: usize,
    pub kernel: usize,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig { levels: 2, kernel: 3 }
    }
}

/// Two 3×3 convolutions with an identity shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: ConvBnAct,
    pub cv2: ConvBnAct,
}

impl Bottleneck {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        Ok(Bottleneck {
            cv1: init.conv_bn_act(&format!("{name}.cv1"), c, c, 3, 1)?,
            cv2: init.conv_bn_act(&format!("{name}.cv2"), c, c, 3, 1)?,
        })
    }
}

impl Layer for Bottleneck {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, store, x)?;
        let y = self.cv2.forward(g, store, y)?;
        g.add(x, y)
    }
}

/// C2F topology with bottleneck units; `spatial` makes it a WTC2f block.
#[derive(Debug, Clone)]
pub struct C2f {
    pub hidden: usize,
    pub spatial: Option<WtConv>,
    pub entry: ConvBnAct,
    pub units: Vec<Bottleneck>,
    pub exit: ConvBnAct,
}

impl C2f {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        wavelet: Option<WaveletConfig>,
    ) -> Result<Self> {
        let hidden = cout / 2;
        if hidden == 0 {
            return Err(Error::InvalidArgument(format!("C2F needs at least 2 output channels, got {cout}")));
        }
        let spatial = wavelet
            .map(|w| WtConv::new(init, &format!("{name}.wt"), cin, w.levels, w.kernel))
            .transpose()?;
        let entry = init.conv_bn_act(&format!("{name}.entry"), cin, 2 * hidden, 1, 1)?;
        let units = (0..n)
            .map(|i| Bottleneck::new(init, &format!("{name}.m{i}"), hidden))
            .collect::<Result<Vec<_>>>()?;
        let exit = init.conv_bn_act(&format!("{name}.exit"), (2 + n) * hidden, cout, 1, 1)?;
        Ok(C2f {
            hidden,
            spatial,
            entry,
            units,
            exit,
        })
    }
}

impl Layer for C2f {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = match &self.spatial {
            Some(wt) => wt.forward(g, store, x)?,
            None => x,
        };
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

/// Builds the WTC2f block: wavelet-convolution head, retained bottlenecks.
pub fn wtc2f(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, n_bottleneck: usize, wavelet: WaveletConfig) -> Result<C2f> {
    C2f::new(init, name, cin, cout, n_bottleneck, Some(wavelet))
}

#[derive(Debug, Clone)]
pub enum Block {
    C2f(C2f),
    Attn(AttentionC2f),
}

impl Block {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        kind: BlockKind,
        c: usize,
        repeats: usize,
        wavelet: WaveletConfig,
        heads: usize,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::C2f => Block::C2f(C2f::new(init, name, c, c, repeats, None)?),
            BlockKind::WtC2f => Block::C2f(wtc2f(init, name, c, c, repeats, wavelet)?),
            BlockKind::AttnC2f => Block::Attn(AttentionC2f::new(init, name, c, c, repeats, heads)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::C2f(c) if c.spatial.is_some() => BlockKind::WtC2f,
            Block::C2f(_) => BlockKind::C2f,
            Block::Attn(_) => BlockKind::AttnC2f,
        }
    }
}

impl Layer for Block {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Block::C2f(b) => b.forward(g, store, x),
            Block::Attn(b) => b.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Downsample {
    Conv(ConvBnAct),
    Wavelet { wt: WtConv, proj: ConvBnAct },
}

impl Downsample {
    pub fn new(init: &mut Init<'_>, name: &str, kind: HeadKind, cin: usize, cout: usize, wavelet: WaveletConfig) -> Result<Self> {
        Ok(match kind {
            HeadKind::Conv => Downsample::Conv(init.conv_bn_act(name, cin, cout, 3, 2)?),
            HeadKind::WtConv => Downsample::Wavelet {
                wt: WtConv::new(init, &format!("{name}.wt"), cin, wavelet.levels, wavelet.kernel)?,
                proj: init.conv_bn_act(&format!("{name}.proj"), cin, cout, 1, 2)?,
            },
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Downsample::Conv(_) => HeadKind::Conv,
            Downsample::Wavelet { .. } => HeadKind::WtConv,
        }
    }
}

impl Layer for Downsample {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Downsample::Conv(c) => c.forward(g, store, x),
            Downsample::Wavelet { wt, proj } => {
                let y = wt.forward(g, store, x)?;
                proj.forward(g, store, y)
            }
        }
    }
}
