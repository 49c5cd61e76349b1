//! Desk-scale YOLO-style instance segmentation with wavelet convolutions and
//! linear attention, built on a small from-scratch autodiff engine.
//!
//! * [`tensor`], [`graph`], [`kernels`]: dense NCHW tensors and reverse-mode gradients.
//! * [`wavelet`]: Haar analysis/synthesis and the wavelet-domain convolution.
//! * [`attention`]: linear attention and the attention C2F block.
//! * [`zoo`]: the five backbone variants, neck, head and decoding.
//! * [`metrics`]: Dice / IoU / precision / recall / mAP with laterality subgroups.
//! * [`synth`]: synthetic Doppler-like frames and the dataset format.
//! * [`train`]: target assignment, loss and SGD training.
//! * [`bench`]: parameter, FLOP and latency accounting.

pub mod attention;
pub mod bench;
pub mod classes;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::{Shape4, Tensor4};
pub use zoo::{Instance, Mask};
