//! Pixel-level Dice, IoU, precision and recall, mask-IoU average precision,
//! and the per-class / laterality-subgroup report.
//!
//! Scores are macro-averaged over *cells*: one cell per (frame, class) pair
//! where the class occurs in the ground truth or the predictions of that
//! frame. A cell compares the union of that class's predicted masks with the
//! union of its ground-truth masks.

use std::cmp::Ordering;

use serde::Serialize;

use crate::classes::{laterality, Laterality, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::zoo::{Instance, Mask};

/// Default mask-IoU threshold for a prediction to count as a match.
pub const DEFAULT_AP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        dice(self)
    }

    pub fn iou(&self) -> f64 {
        iou(self)
    }

    pub fn precision(&self) -> Option<f64> {
        precision(self)
    }

    pub fn recall(&self) -> Option<f64> {
        recall(self)
    }
}

pub fn pixel_counts(pred: &Mask, gt: &Mask) -> Result<PixelCounts> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "pixel_counts",
            format!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let mut c = PixelCounts::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(c: &PixelCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `TP / (TP + FP + FN)`; 1 when both masks are empty.
pub fn iou(c: &PixelCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `TP / (TP + FP)`; undefined (skipped in means) when nothing was predicted.
pub fn precision(c: &PixelCounts) -> Option<f64> {
    let den = c.tp + c.fp;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// `TP / (TP + FN)`; undefined (skipped in means) when the ground truth is empty.
pub fn recall(c: &PixelCounts) -> Option<f64> {
    let den = c.tp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

/// Ground truth and predictions for one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameEval {
    pub gts: Vec<Instance>,
    pub preds: Vec<Instance>,
}

/// Area under the all-point interpolated precision envelope.
///
/// `hits` is the ranked list of predictions (true = matched a ground truth).
pub fn ap_from_ranked(hits: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    Some(ap)
}

/// Ranks all predictions of `class_id` and greedily matches them to ground truth.
///
/// Returns the hit flags in rank order and the ground-truth count. Ranking is
/// by score descending, ties by frame then prediction index. Each prediction
/// takes the unmatched ground truth of its frame with the highest mask IoU,
/// provided that IoU reaches `iou_thresh`.
pub fn rank_and_match(frames: &[FrameEval], class_id: usize, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    let mut n_gt = 0;
    for (f, fr) in frames.iter().enumerate() {
        n_gt += fr.gts.iter().filter(|g| g.class_id == class_id).count();
        for (i, p) in fr.preds.iter().enumerate() {
            if p.class_id == class_id {
                ranked.push((f, i, p.score));
            }
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = frames.iter().map(|fr| vec![false; fr.gts.len()]).collect();
    let hits = ranked
        .iter()
        .map(|&(f, i, _)| {
            let pred = &frames[f].preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in frames[f].gts.iter().enumerate() {
                if g.class_id != class_id || used[f][j] {
                    continue;
                }
                let v = pred.mask.iou(&g.mask);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v.total_cmp(&b) == Ordering::Greater) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[f][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, n_gt)
}

/// Average precision of one class; `None` when the class has no ground truth.
pub fn average_precision(frames: &[FrameEval], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let (hits, n_gt) = rank_and_match(frames, class_id, iou_thresh);
    ap_from_ranked(&hits, n_gt)
}

/// Unweighted mean of the defined per-class APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Pixel counts of one (frame, class) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub frame: usize,
    pub class_id: usize,
    pub counts: PixelCounts,
}

pub fn frame_cells(frames: &[FrameEval]) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        let Some((h, w)) = fr.gts.iter().chain(&fr.preds).map(|i| (i.mask.h, i.mask.w)).next() else {
            continue;
        };
        for class_id in 0..NUM_CLASSES {
            let union = |list: &[Instance]| -> Result<Option<Mask>> {
                let mut acc: Option<Mask> = None;
                for inst in list.iter().filter(|i| i.class_id == class_id) {
                    if (inst.mask.h, inst.mask.w) != (h, w) {
                        return Err(Error::shape(
                            "frame_cells",
                            format!("frame {f} mixes mask sizes {h}x{w} and {}x{}", inst.mask.h, inst.mask.w),
                        ));
                    }
                    acc.get_or_insert_with(|| Mask::new(h, w)).union_with(&inst.mask);
                }
                Ok(acc)
            };
            let (g, p) = (union(&fr.gts)?, union(&fr.preds)?);
            if g.is_none() && p.is_none() {
                continue;
            }
            let g = g.unwrap_or_else(|| Mask::new(h, w));
            let p = p.unwrap_or_else(|| Mask::new(h, w));
            cells.push(Cell {
                frame: f,
                class_id,
                counts: pixel_counts(&p, &g)?,
            });
        }
    }
    Ok(cells)
}

/// Means of the four pixel metrics over a set of cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelScores {
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub cells: usize,
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn pixel_scores<'a>(cells: impl Iterator<Item = &'a Cell> + Clone) -> PixelScores {
    PixelScores {
        dice: mean(cells.clone().map(|c| c.counts.dice())),
        iou: mean(cells.clone().map(|c| c.counts.iou())),
        precision: mean(cells.clone().filter_map(|c| c.counts.precision())),
        recall: mean(cells.clone().filter_map(|c| c.counts.recall())),
        cells: cells.count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: &'static str,
    #[serde(flatten)]
    pub pixel: PixelScores,
    pub ap: Option<f64>,
}

/// Aggregate scores of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    #[serde(rename = "Model Variant")]
    pub model: String,
    #[serde(rename = "Dice")]
    pub dice: Option<f64>,
    #[serde(rename = "IoU")]
    pub iou: Option<f64>,
    #[serde(rename = "Precision")]
    pub precision: Option<f64>,
    #[serde(rename = "Recall")]
    pub recall: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
}

/// One metric split by laterality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupRow {
    #[serde(rename = "Model Variant")]
    pub model: String,
    #[serde(rename = "Metric")]
    pub metric: &'static str,
    #[serde(rename = "Ipsilateral")]
    pub ipsilateral: Option<f64>,
    #[serde(rename = "Contralateral")]
    pub contralateral: Option<f64>,
    #[serde(rename = "Difference")]
    pub difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub summary: SummaryRow,
    pub subgroup: Vec<SubgroupRow>,
    pub per_class: Vec<ClassScores>,
    pub ap_iou_threshold: f64,
}

/// Scores every class, the aggregate row and the ipsilateral/contralateral rows.
///
/// ACA_A2 contributes to the aggregate but to neither laterality subgroup.
pub fn subgroup_report(model: &str, frames: &[FrameEval], iou_thresh: f64) -> Result<MetricReport> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold must lie in (0, 1), got {iou_thresh}")));
    }
    let cells = frame_cells(frames)?;
    let aps: Vec<Option<f64>> = (0..NUM_CLASSES).map(|c| average_precision(frames, c, iou_thresh)).collect();
    let per_class = (0..NUM_CLASSES)
        .map(|c| ClassScores {
            class: CLASS_NAMES[c],
            pixel: pixel_scores(cells.iter().filter(move |cell| cell.class_id == c)),
            ap: aps[c],
        })
        .collect();
    let all = pixel_scores(cells.iter());
    let summary = SummaryRow {
        model: model.to_string(),
        dice: all.dice,
        iou: all.iou,
        precision: all.precision,
        recall: all.recall,
        map: mean_ap(&aps),
    };
    let ipsi = pixel_scores(cells.iter().filter(|c| laterality(c.class_id) == Laterality::Ipsilateral));
    let contra = pixel_scores(cells.iter().filter(|c| laterality(c.class_id) == Laterality::Contralateral));
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let subgroup = [
        ("Dice", ipsi.dice, contra.dice),
        ("IoU", ipsi.iou, contra.iou),
        ("Precision", ipsi.precision, contra.precision),
        ("Recall", ipsi.recall, contra.recall),
    ]
    .into_iter()
    .map(|(metric, i, c)| SubgroupRow {
        model: model.to_string(),
        metric,
        ipsilateral: i,
        contralateral: c,
        difference: diff(i, c),
    })
    .collect();
    Ok(MetricReport {
        summary,
        subgroup,
        per_class,
        ap_iou_threshold: iou_thresh,
    })
}
