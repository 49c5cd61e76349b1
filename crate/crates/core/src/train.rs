//! Target assignment, the segmentation loss, and SGD-with-momentum training.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{CellAnchor, Graph, Var};
use crate::metrics::{dice, pixel_counts};
use crate::synth::FrameSample;
use crate::tensor::{Shape4, Tensor4};
use crate::zoo::decode::{assemble_mask, mask_logits, pixel_in_box};
use crate::zoo::{GraphOutputs, Instance, ModelConfig, SegModel, DETECT_STRIDES, PROTO_STRIDE};

/// Preferred box side, in strides, when choosing a detection scale.
pub const TARGET_SIDE_IN_STRIDES: f64 = 2.5;
/// Training aborts once the total loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            box_: 2.0,
            mask: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub mask: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Combines components in the same order as the loss graph.
    pub fn new(cls: f64, box_: f64, mask: f64, weights: LossWeights) -> Self {
        let total = 0.0 + weights.cls * cls + weights.box_ * box_ + weights.mask * mask;
        LossBreakdown {
            cls,
            box_,
            mask,
            total,
            weights,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.box_, self.mask, self.total].iter().all(|v| v.is_finite())
    }
}

/// A ground-truth instance bound to one prediction cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub gt: usize,
    pub stride: usize,
    pub gy: usize,
    pub gx: usize,
}

/// Index into `strides` whose `TARGET_SIDE_IN_STRIDES` multiple is closest
/// (in log ratio) to the box's geometric-mean side. Ties go to the finer stride.
pub fn best_stride(bbox: [f64; 4], strides: &[usize]) -> usize {
    let side = ((bbox[2] - bbox[0]).max(1e-9) * (bbox[3] - bbox[1]).max(1e-9)).sqrt();
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, &s) in strides.iter().enumerate() {
        let err = (side / (s as f64 * TARGET_SIDE_IN_STRIDES)).ln().abs();
        if err < best_err {
            best = i;
            best_err = err;
        }
    }
    best
}

/// Assigns every instance to the cell containing its box centre at its best
/// stride. A cell keeps one instance: the larger box, then the lower class id,
/// then the earlier instance. Losing instances are left unassigned.
pub fn assign_targets(gts: &[Instance], hw: (usize, usize), strides: &[usize]) -> Vec<Target> {
    let mut out: Vec<Target> = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let stride = strides[best_stride(gt.bbox, strides)];
        let (cx, cy) = gt.center();
        let gx = ((cx / stride as f64).floor().max(0.0) as usize).min(hw.1 / stride - 1);
        let gy = ((cy / stride as f64).floor().max(0.0) as usize).min(hw.0 / stride - 1);
        let t = Target { gt: i, stride, gy, gx };
        match out.iter_mut().find(|o| (o.stride, o.gy, o.gx) == (stride, gy, gx)) {
            Some(slot) => {
                let cur = &gts[slot.gt];
                let wins = gt
                    .area()
                    .total_cmp(&cur.area())
                    .then(cur.class_id.cmp(&gt.class_id))
                    .is_gt();
                if wins {
                    *slot = t;
                }
            }
            None => out.push(t),
        }
    }
    out.sort_by_key(|t| t.gt);
    out
}

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub box_: Var,
    pub mask: Var,
    pub total: Var,
}

/// Records the loss of `out` against per-image ground truth on `g`.
pub fn loss_graph(
    g: &mut Graph,
    out: &GraphOutputs,
    cfg: &ModelConfig,
    gts: &[&[Instance]],
    weights: LossWeights,
) -> Result<LossVars> {
    let ps = g.shape(out.protos);
    if gts.len() != ps.n {
        return Err(Error::shape("loss", format!("{} ground-truth lists for batch of {}", gts.len(), ps.n)));
    }
    let hw = (ps.h * PROTO_STRIDE, ps.w * PROTO_STRIDE);
    let strides: Vec<usize> = out.scales.iter().map(|&(s, _)| s).collect();
    let targets: Vec<Vec<Target>> = gts.iter().map(|g| assign_targets(g, hw, &strides)).collect();
    let n_pos: usize = targets.iter().map(Vec::len).sum();
    let norm = 1.0 / n_pos.max(1) as f64;

    let mut cls_terms = Vec::with_capacity(out.scales.len());
    for &(stride, map) in &out.scales {
        let s = g.shape(map);
        let mut target = vec![0.0; s.numel()];
        let mut weight = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..cfg.num_classes {
                let base = s.index(n, c, 0, 0);
                weight[base..base + s.plane()].fill(norm);
            }
            for t in targets[n].iter().filter(|t| t.stride == stride) {
                target[s.index(n, gts[n][t.gt].class_id, t.gy, t.gx)] = 1.0;
            }
        }
        cls_terms.push((g.bce_logits(map, target, weight)?, 1.0));
    }
    let cls = g.weighted_sum(&cls_terms)?;

    let mut box_terms = Vec::with_capacity(n_pos);
    let mut mask_terms = Vec::with_capacity(n_pos);
    for (n, ts) in targets.iter().enumerate() {
        for t in ts {
            let gt = &gts[n][t.gt];
            let map = out.scales.iter().find(|s| s.0 == t.stride).expect("target stride from outputs").1;
            let o = cfg.box_offset();
            let raw = g.select_cell(map, n, t.gy, t.gx, o, o + 4)?;
            let anchor = CellAnchor {
                cx: (t.gx as f64 + 0.5) * t.stride as f64,
                cy: (t.gy as f64 + 0.5) * t.stride as f64,
                stride: t.stride as f64,
            };
            box_terms.push((g.box_iou_loss(raw, anchor, gt.bbox)?, norm));

            let co = cfg.coeff_offset();
            let coeffs = g.select_cell(map, n, t.gy, t.gx, co, co + cfg.num_protos)?;
            let mix = g.proto_mix(coeffs, out.protos, n)?;
            let logits = g.upsample_bilinear(mix, PROTO_STRIDE);
            let (h, w) = hw;
            let mut target = vec![0.0; h * w];
            let mut inside = vec![0.0; h * w];
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if pixel_in_box(gt.bbox, y, x) {
                        inside[y * w + x] = 1.0;
                        count += 1;
                        if gt.mask.get(y, x) {
                            target[y * w + x] = 1.0;
                        }
                    }
                }
            }
            let scale = 1.0 / count.max(1) as f64;
            inside.iter_mut().for_each(|v| *v *= scale);
            mask_terms.push((g.bce_logits(logits, target, inside)?, norm));
        }
    }
    let zero = g.input(Tensor4::scalar(0.0));
    if box_terms.is_empty() {
        box_terms.push((zero, 1.0));
        mask_terms.push((zero, 1.0));
    }
    let box_ = g.weighted_sum(&box_terms)?;
    let mask = g.weighted_sum(&mask_terms)?;
    let total = g.weighted_sum(&[(cls, weights.cls), (box_, weights.box_), (mask, weights.mask)])?;
    Ok(LossVars { cls, box_, mask, total })
}

fn breakdown(g: &Graph, v: &LossVars, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        cls: g.value(v.cls).item(),
        box_: g.value(v.box_).item(),
        mask: g.value(v.mask).item(),
        total: g.value(v.total).item(),
        weights,
    }
}

/// Stacks `1×3×H×W` frames into one batch.
pub fn stack_images<'a>(frames: impl IntoIterator<Item = &'a Tensor4>) -> Result<Tensor4> {
    let mut data = Vec::new();
    let mut shape: Option<Shape4> = None;
    let mut n = 0;
    for f in frames {
        let s = f.shape();
        if s.n != 1 || shape.is_some_and(|p| p != s) {
            return Err(Error::shape("stack_images", format!("cannot stack {s} onto {shape:?}")));
        }
        shape = Some(s);
        data.extend_from_slice(f.data());
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Tensor4::from_vec(Shape4::new(n, s.c, s.h, s.w), data)
}

/// Forward-only loss of `frames`.
pub fn loss(model: &SegModel, frames: &[&FrameSample], weights: LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let x = g.input(stack_images(frames.iter().map(|f| &f.image))?);
    let out = model.forward_graph(&mut g, x)?;
    let gts: Vec<&[Instance]> = frames.iter().map(|f| f.instances.as_slice()).collect();
    let v = loss_graph(&mut g, &out, &model.config, &gts, weights)?;
    Ok(breakdown(&g, &v, weights))
}

/// Mean Dice of each ground-truth instance against the mask predicted at its
/// assigned cell, cropped to the ground-truth box. Unassigned instances score 0.
pub fn mask_dice(model: &SegModel, frames: &[FrameSample]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for f in frames {
        let raw = model.forward(&f.image)?;
        let s = f.image.shape();
        let targets = assign_targets(&f.instances, (s.h, s.w), &DETECT_STRIDES);
        for (i, gt) in f.instances.iter().enumerate() {
            count += 1;
            let Some(t) = targets.iter().find(|t| t.gt == i) else { continue };
            let map = &raw.scales.iter().find(|o| o.stride == t.stride).expect("stride").map;
            let co = model.config.coeff_offset();
            let coeffs: Vec<f64> = (0..model.config.num_protos).map(|p| map.at(0, co + p, t.gy, t.gx)).collect();
            let pred = assemble_mask(&mask_logits(&raw.protos, 0, &coeffs), gt.bbox);
            total += dice(&pixel_counts(&pred, &gt.mask)?);
        }
    }
    Ok(if count == 0 { 1.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Validation mask-Dice is recorded every this many steps (0 disables).
    pub eval_every: usize,
    /// Rescales the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Stops after the first validation eval whose mask-Dice exceeds this.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 0,
            clip_norm: Some(5.0),
            stop_at_dice: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
    /// `(step, mask_dice)` on the validation frames.
    pub evals: Vec<(usize, f64)>,
}

/// Seeded minibatch order: reshuffled every pass over the data.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Batches {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

fn grad_norm(model: &SegModel) -> f64 {
    let mut sq = 0.0;
    for (_, p) in model.store.iter() {
        if let Some(g) = &p.value.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq.sqrt()
}

/// One SGD-with-momentum update from the gradients held in the store.
fn sgd_step(model: &mut SegModel, velocity: &mut [Vec<f64>], lr: f64, momentum: f64, grad_scale: f64) {
    for (p, v) in model.store.iter_mut().zip(velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let Some(grad) = p.value.grad.take() else { continue };
        for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vel = momentum * *vel + grad_scale * g;
            *w -= lr * *vel;
        }
    }
}

/// Trains in place. `on_step` sees every loss record as it is produced.
pub fn train(
    model: &mut SegModel,
    data: &[FrameSample],
    val: &[FrameSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs frames and a positive batch size".into()));
    }
    if cfg.clip_norm.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::InvalidArgument("clip norm must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument(format!(
            "lr must be finite and non-negative and momentum in [0, 1); got lr {} momentum {}",
            cfg.lr, cfg.momentum
        )));
    }
    let mut velocity: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let mut g = Graph::new();
        let x = g.input(stack_images(idx.iter().map(|&i| &data[i].image))?);
        let out = model.forward_graph(&mut g, x)?;
        let gts: Vec<&[Instance]> = idx.iter().map(|&i| data[i].instances.as_slice()).collect();
        let vars = loss_graph(&mut g, &out, &model.config, &gts, cfg.weights)?;
        let loss = breakdown(&g, &vars, cfg.weights);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("cls {} box {} mask {}", loss.cls, loss.box_, loss.mask),
            });
        }
        if loss.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, total: loss.total });
        }
        model.store.zero_grad();
        g.backward_into(vars.total, &mut model.store)?;
        drop(g);
        let norm = grad_norm(model);
        let grad_scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        sgd_step(model, &mut velocity, cfg.lr, cfg.momentum, grad_scale);

        let rec = StepRecord { step, loss };
        on_step(&rec);
        report.trace.push(rec);
        if cfg.eval_every > 0 && !val.is_empty() && (step + 1) % cfg.eval_every == 0 {
            let d = mask_dice(model, val)?;
            report.evals.push((step + 1, d));
            if cfg.stop_at_dice.is_some_and(|t| d > t) {
                break;
            }
        }
    }
    Ok(report)
}

/// `step total cls box mask`, one line per step.
pub fn format_trace_line(r: &StepRecord) -> String {
    format!("{} {} {} {} {}", r.step, r.loss.total, r.loss.cls, r.loss.box_, r.loss.mask)
}

pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = || -> std::io::Result<()> {
        for r in trace {
            writeln!(w, "{}", format_trace_line(r))?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Saves the model parameters with the variant name as checkpoint metadata.
pub fn save_checkpoint(model: &SegModel, path: &Path, steps: usize) -> Result<()> {
    let steps = steps.to_string();
    model
        .store
        .save(path, &[("variant", model.variant().name()), ("steps", steps.as_str())])
}

/// Rebuilds the variant named in the checkpoint and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let (store, meta) = crate::param::ParamStore::load(path)?;
    let variant = meta
        .iter()
        .find(|(k, _)| k == "variant")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            msg: "checkpoint has no variant metadata".into(),
        })?;
    let mut model = crate::zoo::build_variant(&variant, 0)?;
    model.store.load_values_from(&store)?;
    Ok(model)
}
