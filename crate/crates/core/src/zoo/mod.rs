//! Model zoo: blocks, variants, head and decoding.

pub mod blocks;
pub mod decode;
pub mod instance;
pub mod model;

pub use blocks::{wtc2f, Block, BlockKind, Bottleneck, C2f, Downsample, HeadKind, WaveletConfig};
pub use decode::{decode, nms, Detection};
pub use instance::{Instance, Mask};
pub use model::{
    build_variant, BackboneVariant, GraphOutputs, ModelConfig, RawOutputs, ScaleOutput, SegModel, StageSpec, Variant,
    DETECT_STRIDES, PROTO_STRIDE,
};
