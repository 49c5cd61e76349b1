//! Reference implementations written independently of the crate's kernels.
#![allow(dead_code)]

pub mod cases;

use aaw_core::graph::{Graph, Var};
use aaw_core::{Result, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: Shape4, rng: &mut impl Rng) -> Tensor4 {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Direct six-loop convolution with zero padding.
pub fn naive_conv2d(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor4 {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let ho = (xs.h + 2 * pad - k) / stride + 1;
    let wo = (xs.w + 2 * pad - k) / stride + 1;
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, ho, wo));
    for n in 0..xs.n {
        for co in 0..ws.n {
            let gidx = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, gidx * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Orthonormal 1-D Haar analysis matrix: low-pass rows then high-pass rows.
pub fn haar_matrix(n: usize) -> Vec<Vec<f64>> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n / 2 {
        m[i][2 * i] = r;
        m[i][2 * i + 1] = r;
        m[n / 2 + i][2 * i] = r;
        m[n / 2 + i][2 * i + 1] = -r;
    }
    m
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `[LL, LH, HL, HH]` of every plane via `H_h · X · H_wᵀ`.
pub fn haar2d_oracle(x: &Tensor4) -> [Tensor4; 4] {
    let s = x.shape();
    let (hh, hw) = (haar_matrix(s.h), haar_matrix(s.w));
    let half = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut bands = [(); 4].map(|_| Tensor4::zeros(half));
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<Vec<f64>> = (0..s.h).map(|y| (0..s.w).map(|xx| x.at(n, c, y, xx)).collect()).collect();
            let y = matmul(&matmul(&hh, &plane), &transpose(&hw));
            for i in 0..s.h / 2 {
                for j in 0..s.w / 2 {
                    bands[0].set(n, c, i, j, y[i][j]);
                    bands[1].set(n, c, i, j, y[i][s.w / 2 + j]);
                    bands[2].set(n, c, i, j, y[s.h / 2 + i][j]);
                    bands[3].set(n, c, i, j, y[s.h / 2 + i][s.w / 2 + j]);
                }
            }
        }
    }
    bands
}

/// Inverse of [`haar2d_oracle`]: `H_hᵀ · Y · H_w`.
pub fn ihaar2d_oracle(bands: &[Tensor4; 4]) -> Tensor4 {
    let b = bands[0].shape();
    let (h, w) = (2 * b.h, 2 * b.w);
    let (hh, hw) = (haar_matrix(h), haar_matrix(w));
    let mut out = Tensor4::zeros(Shape4::new(b.n, b.c, h, w));
    for n in 0..b.n {
        for c in 0..b.c {
            let mut y = vec![vec![0.0; w]; h];
            for i in 0..b.h {
                for j in 0..b.w {
                    y[i][j] = bands[0].at(n, c, i, j);
                    y[i][b.w + j] = bands[1].at(n, c, i, j);
                    y[b.h + i][j] = bands[2].at(n, c, i, j);
                    y[b.h + i][b.w + j] = bands[3].at(n, c, i, j);
                }
            }
            let x = matmul(&matmul(&transpose(&hh), &y), &hw);
            for i in 0..h {
                for j in 0..w {
                    out.set(n, c, i, j, x[i][j]);
                }
            }
        }
    }
    out
}

pub fn elu1(u: f64) -> f64 {
    if u > 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

pub fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

/// 1×1 convolution as an explicit channel matrix product.
pub fn pointwise(x: &Tensor4, w: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let cout = w.shape().n;
    Tensor4::from_fn(Shape4::new(s.n, cout, s.h, s.w), |n, co, y, xx| {
        (0..s.c).map(|ci| w.at(co, ci, 0, 0) * x.at(n, ci, y, xx)).sum()
    })
}

/// Explicit O(N²) kernelised attention over spatial tokens (no residual).
///
/// Row weights `φ(q_i)·φ(k_j)` are normalised to sum to one.
pub fn quadratic_attention(x: &Tensor4, wq: &Tensor4, wk: &Tensor4, wv: &Tensor4, heads: usize) -> Tensor4 {
    let s = x.shape();
    let (q, k, v) = (pointwise(x, wq), pointwise(x, wk), pointwise(x, wv));
    let d = s.c / heads;
    let tokens = s.h * s.w;
    let tok = |t: &Tensor4, n: usize, c: usize, i: usize| t.at(n, c, i / s.w, i % s.w);
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for h in 0..heads {
            for i in 0..tokens {
                let weights: Vec<f64> = (0..tokens)
                    .map(|j| (0..d).map(|c| elu1(tok(&q, n, h * d + c, i)) * elu1(tok(&k, n, h * d + c, j))).sum())
                    .collect();
                let total: f64 = weights.iter().sum();
                for c in 0..d {
                    let y: f64 = (0..tokens).map(|j| weights[j] / total * tok(&v, n, h * d + c, j)).sum();
                    out.set(n, h * d + c, i / s.w, i % s.w, y);
                }
            }
        }
    }
    out
}

/// Row weights of the quadratic form for token `i` of image 0, head 0.
pub fn attention_row_weights(x: &Tensor4, wq: &Tensor4, wk: &Tensor4, heads: usize, i: usize) -> Vec<f64> {
    let s = x.shape();
    let (q, k) = (pointwise(x, wq), pointwise(x, wk));
    let d = s.c / heads;
    let raw: Vec<f64> = (0..s.h * s.w)
        .map(|j| {
            (0..d)
                .map(|c| elu1(q.at(0, c, i / s.w, i % s.w)) * elu1(k.at(0, c, j / s.w, j % s.w)))
                .sum()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
}

/// Central-difference gradient check of `f` with respect to every input.
///
/// The scalar objective is `Σ r_i · f(inputs)_i` for a fixed random `r`.
/// `points` coordinates of each input are checked with step `eps`.
/// The relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    inputs: &[Tensor4],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    points: usize,
    seed: u64,
) -> GradCheck {
    const EPS: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut r = rng(seed);
    let objective = |vals: &[Tensor4], proj: Option<&Tensor4>| -> (f64, Tensor4, Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        let out = g.value(y).clone();
        let p = proj.cloned().unwrap_or_else(|| Tensor4::full(out.shape(), 1.0));
        let pv = g.input(p);
        let m = g.mul(y, pv).unwrap();
        let loss = g.sum(m);
        (g.value(loss).item(), out, g, vars, loss)
    };
    let (_, out, _, _, _) = objective(inputs, None);
    let proj = rand_tensor(out.shape(), &mut r);
    let (_, _, g, vars, loss) = objective(inputs, Some(&proj));
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for _ in 0..points {
            let i = r.random_range(0..input.len());
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[i] -= EPS;
            let numeric = (objective(&plus, Some(&proj)).0 - objective(&minus, Some(&proj)).0) / (2.0 * EPS);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    GradCheck { worst, checked }
}

/// Pixel-loop confusion counts.
pub fn loop_counts(pred: &[bool], gt: &[bool]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            tp += 1;
        } else if pred[i] {
            fp += 1;
        } else if gt[i] {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

/// Set-size formulation: `2|A∩B| / (|A| + |B|)`, with the empty-empty case = 1.
pub fn oracle_dice(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count() as u64;
    let (a, b) = (
        pred.iter().filter(|v| **v).count() as u64,
        gt.iter().filter(|v| **v).count() as u64,
    );
    if a + b == 0 {
        1.0
    } else {
        (2 * inter) as f64 / (a + b) as f64
    }
}

/// `|A∩B| / |A∪B|`, with the empty-empty case = 1.
pub fn oracle_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count() as u64;
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count() as u64;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP by enumerating every prefix of the ranked hit list.
///
/// Each prefix is a PR point; the interpolated precision at recall level
/// `r_k` is the best precision of any prefix reaching at least that recall.
pub fn prefix_ap(hits: &[bool], n_gt: usize) -> f64 {
    let points: Vec<(f64, f64)> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|h| **h).count() as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// Brute-force matching of a single class: ranked predictions greedily claim
/// the best-IoU unclaimed ground truth of their frame.
pub fn oracle_hits(
    frames: &[(Vec<(usize, Vec<bool>)>, Vec<(usize, f64, Vec<bool>)>)],
    class_id: usize,
    thresh: f64,
) -> (Vec<bool>, usize) {
    let iou = |a: &[bool], b: &[bool]| {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    for (f, (gts, preds)) in frames.iter().enumerate() {
        n_gt += gts.iter().filter(|g| g.0 == class_id).count();
        for (i, p) in preds.iter().enumerate() {
            if p.0 == class_id {
                ranked.push((f, i, p.1));
            }
        }
    }
    // stable sort keeps (frame, index) order among equal scores
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    let mut claimed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.0.len()]).collect();
    let mut hits = Vec::new();
    for (f, i, _) in ranked {
        let pred = &frames[f].1[i].2;
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in frames[f].0.iter().enumerate() {
            if gt.0 != class_id || claimed[f][j] {
                continue;
            }
            let v = iou(pred, &gt.1);
            if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            claimed[f][j] = true;
        }
        hits.push(best.is_some());
    }
    (hits, n_gt)
}
