//! Turning raw head outputs into scored instances.

use std::cmp::Ordering;

use super::instance::{Instance, Mask};
use super::model::{RawOutputs, PROTO_STRIDE};
use crate::error::{Error, Result};
use crate::graph::{box_iou, CellAnchor};
use crate::kernels::{sigmoid, upsample_bilinear};
use crate::tensor::{Shape4, Tensor4};

/// A scored box with its mask coefficients, before mask assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
    pub coeffs: Vec<f64>,
}

impl Detection {
    fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }
}

/// Strict total order: score desc, area desc, then x1, y1, x2, y2 ascending.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.area().total_cmp(&a.area()))
        .then_with(|| a.bbox[0].total_cmp(&b.bbox[0]))
        .then_with(|| a.bbox[1].total_cmp(&b.bbox[1]))
        .then_with(|| a.bbox[2].total_cmp(&b.bbox[2]))
        .then_with(|| a.bbox[3].total_cmp(&b.bbox[3]))
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Greedy per-class non-maximum suppression on box IoU.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && box_iou(k.bbox, d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Candidate detections of image `n`, one per cell whose best class clears `score_thresh`.
pub fn candidates(raw: &RawOutputs, n: usize, score_thresh: f64) -> Vec<Detection> {
    let cfg = raw.config;
    let frame = frame_size(raw);
    let mut out = Vec::new();
    for s in &raw.scales {
        let sh = s.map.shape();
        for gy in 0..sh.h {
            for gx in 0..sh.w {
                let mut best = 0;
                for c in 1..cfg.num_classes {
                    if s.map.at(n, c, gy, gx) > s.map.at(n, best, gy, gx) {
                        best = c;
                    }
                }
                let score = sigmoid(s.map.at(n, best, gy, gx));
                if score < score_thresh {
                    continue;
                }
                let anchor = CellAnchor {
                    cx: (gx as f64 + 0.5) * s.stride as f64,
                    cy: (gy as f64 + 0.5) * s.stride as f64,
                    stride: s.stride as f64,
                };
                let o = cfg.box_offset();
                let raw_box = [0, 1, 2, 3].map(|i| s.map.at(n, o + i, gy, gx));
                let b = anchor.decode(raw_box);
                let bbox = [
                    b[0].clamp(0.0, frame.1 as f64),
                    b[1].clamp(0.0, frame.0 as f64),
                    b[2].clamp(0.0, frame.1 as f64),
                    b[3].clamp(0.0, frame.0 as f64),
                ];
                if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                    continue;
                }
                let coeffs = (0..cfg.num_protos)
                    .map(|p| s.map.at(n, cfg.coeff_offset() + p, gy, gx))
                    .collect();
                out.push(Detection {
                    class_id: best,
                    score,
                    bbox,
                    coeffs,
                });
            }
        }
    }
    out
}

fn frame_size(raw: &RawOutputs) -> (usize, usize) {
    let p = raw.protos.shape();
    (p.h * PROTO_STRIDE, p.w * PROTO_STRIDE)
}

/// Frame-resolution mask logits: prototypes mixed by `coeffs`, bilinearly upsampled.
pub fn mask_logits(protos: &Tensor4, n: usize, coeffs: &[f64]) -> Tensor4 {
    let ps = protos.shape();
    let plane = ps.plane();
    let mut mix = vec![0.0; plane];
    for (k, &c) in coeffs.iter().enumerate() {
        let src = &protos.data()[(n * ps.c + k) * plane..(n * ps.c + k + 1) * plane];
        mix.iter_mut().zip(src).for_each(|(m, s)| *m += c * s);
    }
    let t = Tensor4::from_vec(Shape4::new(1, 1, ps.h, ps.w), mix).expect("one plane");
    upsample_bilinear(&t, PROTO_STRIDE)
}

/// Whether pixel `(y, x)` has its center inside `bbox`.
#[inline]
pub fn pixel_in_box(bbox: [f64; 4], y: usize, x: usize) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    cx >= bbox[0] && cx < bbox[2] && cy >= bbox[1] && cy < bbox[3]
}

/// Thresholds mask logits at 0 (probability 0.5) inside `bbox`.
pub fn assemble_mask(logits: &Tensor4, bbox: [f64; 4]) -> Mask {
    let s = logits.shape();
    let mut m = Mask::new(s.h, s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            if logits.at(0, 0, y, x) > 0.0 && pixel_in_box(bbox, y, x) {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Decodes every image of the batch into instances.
pub fn decode(raw: &RawOutputs, score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Instance>>> {
    for (name, v) in [("score_thresh", score_thresh), ("nms_iou", nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let batch = raw.protos.shape().n;
    Ok((0..batch)
        .map(|n| {
            nms(candidates(raw, n, score_thresh), nms_iou)
                .into_iter()
                .map(|d| {
                    let logits = mask_logits(&raw.protos, n, &d.coeffs);
                    Instance {
                        class_id: d.class_id,
                        score: d.score,
                        bbox: d.bbox,
                        mask: assemble_mask(&logits, d.bbox),
                    }
                })
                .collect()
        })
        .collect())
}
