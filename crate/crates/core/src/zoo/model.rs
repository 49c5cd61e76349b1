//! The five backbone variants, the shared neck and the segmentation head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{Block, BlockKind, C2f, Downsample, HeadKind, WaveletConfig};
use crate::attention::DEFAULT_HEADS;
use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Conv, ConvBnAct, Init, Layer};
use crate::param::ParamStore;
use crate::tensor::{Shape4, Tensor4};

/// Ablation variants, one per backbone design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    BaselineWt,
    Aa,
    AaWt,
    Aaw,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::BaselineWt, Variant::Aa, Variant::AaWt, Variant::Aaw];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineWt => "baseline_wt",
            Variant::Aa => "aa",
            Variant::AaWt => "aa_wt",
            Variant::Aaw => "aaw",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Baseline => "Yolo 11 Baseline",
            Variant::BaselineWt => "Yolo 11 w/ WTConv",
            Variant::Aa => "AA-YOLO",
            Variant::AaWt => "AA-YOLO w/ WTConv",
            Variant::Aaw => "AAW-YOLO (Proposed)",
        }
    }

    /// Per-stage (head, block) kinds, shallowest first.
    ///
    /// Attention blocks sit in the two deepest stages; wavelet blocks replace
    /// the plain ones in the two shallow stages; the `_wt` variants swap the
    /// stride-2 stage heads for wavelet convolutions.
    pub fn stage_kinds(self) -> [(HeadKind, BlockKind); 4] {
        use BlockKind::*;
        use HeadKind::Conv as H;
        use HeadKind::WtConv as W;
        match self {
            Variant::Baseline => [(H, C2f), (H, C2f), (H, C2f), (H, C2f)],
            Variant::BaselineWt => [(W, C2f), (W, C2f), (W, C2f), (W, C2f)],
            Variant::Aa => [(H, C2f), (H, C2f), (H, AttnC2f), (H, AttnC2f)],
            Variant::AaWt => [(W, C2f), (W, C2f), (W, AttnC2f), (W, AttnC2f)],
            Variant::Aaw => [(H, WtC2f), (H, WtC2f), (H, AttnC2f), (H, AttnC2f)],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Variant::ALL.map(Variant::name).join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub head: HeadKind,
    pub block: BlockKind,
    pub channels: usize,
    pub repeats: usize,
}

/// A variant's concrete stage layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneVariant {
    pub variant: Variant,
    pub stages: Vec<StageSpec>,
}

impl BackboneVariant {
    pub fn new(variant: Variant, cfg: &ModelConfig) -> Self {
        let stages = variant
            .stage_kinds()
            .iter()
            .zip(cfg.widths)
            .map(|(&(head, block), channels)| StageSpec {
                head,
                block,
                channels,
                repeats: cfg.repeats,
            })
            .collect();
        BackboneVariant { variant, stages }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub repeats: usize,
    pub num_classes: usize,
    pub num_protos: usize,
    pub wavelet: WaveletConfig,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: [16, 32, 64, 128],
            repeats: 1,
            num_classes: NUM_CLASSES,
            num_protos: 8,
            wavelet: WaveletConfig::default(),
            heads: DEFAULT_HEADS,
        }
    }
}

impl ModelConfig {
    /// Channels per detection cell: class logits, 4 box offsets, mask coefficients.
    pub fn cell_channels(&self) -> usize {
        self.num_classes + 4 + self.num_protos
    }

    pub fn box_offset(&self) -> usize {
        self.num_classes
    }

    pub fn coeff_offset(&self) -> usize {
        self.num_classes + 4
    }
}

/// Detection strides, finest first.
pub const DETECT_STRIDES: [usize; 2] = [8, 16];
pub const PROTO_STRIDE: usize = 4;

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Downsample,
    pub block: Block,
}

#[derive(Debug, Clone)]
pub struct Neck {
    pub fuse8: C2f,
    pub fuse4: C2f,
}

#[derive(Debug, Clone)]
pub struct DetectBranch {
    pub stem: ConvBnAct,
    pub pred: Conv,
}

#[derive(Debug, Clone)]
pub struct SegHead {
    pub detect: Vec<DetectBranch>,
    pub proto_stem: ConvBnAct,
    pub proto: Conv,
}

/// Backbone, neck and head with their parameters.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: ModelConfig,
    pub backbone: BackboneVariant,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    pub neck: Neck,
    pub head: SegHead,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    /// `(stride, N×cell_channels×H/stride×W/stride)` per detection scale.
    pub scales: Vec<(usize, Var)>,
    /// `N×P×H/4×W/4` prototype masks.
    pub protos: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput {
    pub stride: usize,
    pub map: Tensor4,
}

/// Materialised head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub scales: Vec<ScaleOutput>,
    pub protos: Tensor4,
    pub config: ModelConfig,
}

const PRED_GAIN: f64 = 1.0;
/// Logit at which the class sigmoid equals 0.01.
const CLASS_PRIOR_LOGIT: f64 = -4.595;
/// `softplus(0.912) ≈ 1.25`: initial boxes span 2.5 strides.
const BOX_PRIOR_LOGIT: f64 = 0.912;

pub fn build_variant(name: &str, seed: u64) -> Result<SegModel> {
    SegModel::new(name.parse()?, ModelConfig::default(), seed)
}

impl SegModel {
    pub fn new(variant: Variant, config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneVariant::new(variant, &config);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let wl = config.wavelet;

        let mut stages = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for (i, s) in backbone.stages.iter().enumerate() {
            let name = format!("backbone.stage{}", i + 1);
            let down = Downsample::new(&mut init, &format!("{name}.down"), s.head, cin, s.channels, wl)?;
            let block = Block::new(&mut init, &format!("{name}.block"), s.block, s.channels, s.repeats, wl, config.heads)?;
            stages.push(Stage { down, block });
            cin = s.channels;
        }

        let [_, c4, c8, c16] = config.widths;
        let neck = Neck {
            fuse8: C2f::new(&mut init, "neck.fuse8", c16 + c8, c8, config.repeats, None)?,
            fuse4: C2f::new(&mut init, "neck.fuse4", c8 + c4, c4, config.repeats, None)?,
        };

        let cells = config.cell_channels();
        let pw = ConvSpec::new(1, 0, 1);
        let mut detect = Vec::new();
        for (stride, c) in DETECT_STRIDES.into_iter().zip([c8, c16]) {
            let name = format!("head.detect{stride}");
            detect.push(DetectBranch {
                stem: init.conv_bn_act(&format!("{name}.stem"), c, c, 3, 1)?,
                pred: init.conv(&format!("{name}.pred"), c, cells, 1, pw, true, PRED_GAIN)?,
            });
        }
        let proto_stem = init.conv_bn_act("head.proto.stem", c4, c4, 3, 1)?;
        let proto = init.conv("head.proto.pred", c4, config.num_protos, 1, pw, true, 1.0)?;

        for d in &detect {
            let bias = d.pred.bias.expect("prediction conv has bias");
            let data = store.get_mut(bias).value.data_mut();
            data[..config.num_classes].fill(CLASS_PRIOR_LOGIT);
            data[config.box_offset()..config.coeff_offset()].fill(BOX_PRIOR_LOGIT);
        }

        Ok(SegModel {
            config,
            backbone,
            store,
            stages,
            neck,
            head: SegHead {
                detect,
                proto_stem,
                proto,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.backbone.variant
    }

    /// Records the forward pass on `g`. Height and width must be multiples of 16.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<GraphOutputs> {
        self.forward_graph_with(g, &self.store, x)
    }

    /// As [`SegModel::forward_graph`] with parameter values taken from `store`.
    pub fn forward_graph_with(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<GraphOutputs> {
        let s = g.shape(x);
        check_input(s, &self.config)?;
        let mut feats = Vec::with_capacity(4);
        let mut y = x;
        for st in &self.stages {
            y = st.down.forward(g, store, y)?;
            y = st.block.forward(g, store, y)?;
            feats.push(y);
        }
        let (f4, f8, f16) = (feats[1], feats[2], feats[3]);

        let up = g.upsample2x(f16);
        let cat = g.concat_channels(&[up, f8])?;
        let n8 = self.neck.fuse8.forward(g, store, cat)?;
        let up = g.upsample2x(n8);
        let cat = g.concat_channels(&[up, f4])?;
        let n4 = self.neck.fuse4.forward(g, store, cat)?;

        let mut scales = Vec::with_capacity(2);
        for ((stride, feat), branch) in DETECT_STRIDES.into_iter().zip([n8, f16]).zip(&self.head.detect) {
            let h = branch.stem.forward(g, store, feat)?;
            scales.push((stride, branch.pred.forward(g, store, h)?));
        }
        let p = self.head.proto_stem.forward(g, store, n4)?;
        let protos = self.head.proto.forward(g, store, p)?;
        Ok(GraphOutputs { scales, protos })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<RawOutputs> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.forward_graph(&mut g, xv)?;
        Ok(RawOutputs {
            scales: out
                .scales
                .iter()
                .map(|&(stride, v)| ScaleOutput {
                    stride,
                    map: g.value(v).clone(),
                })
                .collect(),
            protos: g.value(out.protos).clone(),
            config: self.config,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }
}

fn check_input(s: Shape4, cfg: &ModelConfig) -> Result<()> {
    if s.c != cfg.in_channels {
        return Err(Error::shape(
            "forward",
            format!("model expects {} input channels, got {}", cfg.in_channels, s.c),
        ));
    }
    if s.h == 0 || s.w == 0 || s.h % 16 != 0 || s.w % 16 != 0 {
        return Err(Error::shape(
            "forward",
            format!("input height/width {}x{} must be positive multiples of 16", s.h, s.w),
        ));
    }
    Ok(())
}
