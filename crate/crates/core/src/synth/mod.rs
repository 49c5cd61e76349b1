//! Synthetic Doppler-like frames with per-instance ground truth.
//!
//! Each frame has a probe side. Ipsilateral vessels are laid out on the probe
//! half, contralateral ones mirrored onto the far half, ACA_A2 on the midline.
//! Contralateral ribbons are drawn thinner and with lower contrast.

mod io;

pub use io::{read_dataset, read_instances, write_dataset, write_instances, DatasetFrame};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::classes::{counterpart, laterality, Laterality, CLASS_NAMES, INSTANCE_COUNTS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use crate::zoo::{Instance, Mask};

pub const DEFAULT_FRAME_SIZE: usize = 128;
pub const MIN_INSTANCES: usize = 3;
pub const MAX_INSTANCES: usize = 6;
/// Highest mask IoU allowed between two instances of one class in a frame.
pub const MAX_SAME_CLASS_IOU: f64 = 0.2;

const PLACEMENT_ATTEMPTS: usize = 200;
const CURVE_SEGMENTS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            _ => None,
        }
    }

    pub fn flipped(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Red,
    Blue,
}

/// Canonical placement of a vessel on the probe half.
///
/// Points are `(d, y)`: `d` is the distance from the midline as a fraction of
/// the width (0 = midline, 0.5 = frame edge), `y` a fraction of the height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub start: (f64, f64),
    pub end: (f64, f64),
    /// Control-point offset perpendicular to the chord, as a fraction of its length.
    pub curvature: (f64, f64),
    /// Ribbon width as a fraction of the frame size.
    pub thickness: (f64, f64),
    /// Peak intensity added on top of the background.
    pub contrast: (f64, f64),
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: &'static str,
    pub sampling_weight: u32,
    pub geometry: Geometry,
}

const IPSI_THICKNESS: (f64, f64) = (0.08, 0.11);
const CONTRA_THICKNESS: (f64, f64) = (0.05, 0.075);
const MIDLINE_THICKNESS: (f64, f64) = (0.065, 0.09);
const IPSI_CONTRAST: (f64, f64) = (0.55, 0.75);
const CONTRA_CONTRAST: (f64, f64) = (0.3, 0.45);
const MIDLINE_CONTRAST: (f64, f64) = (0.45, 0.6);

/// Layout of the four paired segments: ACA_A1, MCA_M1, PCA_P1, PCA_P2.
const PAIRED: [((f64, f64), (f64, f64), (f64, f64), Polarity); 4] = [
    ((0.15, 0.36), (0.03, 0.29), (0.05, 0.12), Polarity::Blue),
    ((0.17, 0.40), (0.43, 0.35), (0.03, 0.10), Polarity::Red),
    ((0.04, 0.58), (0.17, 0.61), (0.02, 0.08), Polarity::Red),
    ((0.18, 0.62), (0.35, 0.80), (0.05, 0.12), Polarity::Blue),
];

fn flip_polarity(p: Polarity) -> Polarity {
    match p {
        Polarity::Red => Polarity::Blue,
        Polarity::Blue => Polarity::Red,
    }
}

/// The nine class specs in canonical class order.
pub fn class_specs() -> [ClassSpec; NUM_CLASSES] {
    std::array::from_fn(|class_id| {
        let geometry = match laterality(class_id) {
            Laterality::Midline => Geometry {
                start: (0.0, 0.08),
                end: (0.0, 0.27),
                curvature: (0.02, 0.08),
                thickness: MIDLINE_THICKNESS,
                contrast: MIDLINE_CONTRAST,
                polarity: Polarity::Blue,
            },
            side => {
                let (start, end, curvature, polarity) = PAIRED[(class_id - 1) % 4];
                let contra = side == Laterality::Contralateral;
                Geometry {
                    start,
                    end,
                    curvature,
                    thickness: if contra { CONTRA_THICKNESS } else { IPSI_THICKNESS },
                    contrast: if contra { CONTRA_CONTRAST } else { IPSI_CONTRAST },
                    // Flow toward the probe on one side is flow away from it on the other.
                    polarity: if contra { flip_polarity(polarity) } else { polarity },
                }
            }
        };
        ClassSpec {
            class_id,
            name: CLASS_NAMES[class_id],
            sampling_weight: INSTANCE_COUNTS[class_id],
            geometry,
        }
    })
}

/// Sampled parameters of one rendered vessel.
#[derive(Debug, Clone, PartialEq)]
pub struct Vessel {
    pub class_id: usize,
    /// Quadratic Bézier control points in pixel coordinates.
    pub points: [(f64, f64); 3],
    pub thickness_px: f64,
    pub contrast: f64,
    pub polarity: Polarity,
    /// Intensity multiplier at the start and end of the curve.
    pub gradient: (f64, f64),
    pub mask: Mask,
}

impl Vessel {
    pub fn centerline(&self) -> Vec<(f64, f64)> {
        let [p0, p1, p2] = self.points;
        (0..=CURVE_SEGMENTS)
            .map(|i| {
                let t = i as f64 / CURVE_SEGMENTS as f64;
                let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                (a * p0.0 + b * p1.0 + c * p2.0, a * p0.1 + b * p1.1 + c * p2.1)
            })
            .collect()
    }

    pub fn length(&self) -> f64 {
        self.centerline().windows(2).map(|s| (s[1].0 - s[0].0).hypot(s[1].1 - s[0].1)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePlan {
    pub side: Side,
    pub vessels: Vec<Vessel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub index: usize,
    /// `1×3×H×W`, values quantized to multiples of 1/255.
    pub image: Tensor4,
    pub instances: Vec<Instance>,
    pub side: Side,
    pub rng_seed: u64,
}

impl FrameSample {
    pub fn hw(&self) -> usize {
        self.image.shape().h
    }
}

fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_hw(hw: usize) -> Result<()> {
    if hw == 0 || hw % 16 != 0 {
        return Err(Error::InvalidArgument(format!("frame size must be a positive multiple of 16, got {hw}")));
    }
    Ok(())
}

/// Draws a frame's class multiset; classes are i.i.d. with the annotated instance proportions.
pub fn sample_classes(rng: &mut impl Rng) -> Vec<usize> {
    let dist = WeightedIndex::new(INSTANCE_COUNTS).expect("static weights are positive");
    let n = rng.random_range(MIN_INSTANCES..=MAX_INSTANCES);
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn to_pixels(side: Side, lat: Laterality, (d, y): (f64, f64), hw: usize) -> (f64, f64) {
    let probe_left = side == Side::Left;
    let on_left = match lat {
        Laterality::Ipsilateral => probe_left,
        Laterality::Contralateral => !probe_left,
        Laterality::Midline => true,
    };
    let x = if on_left { 0.5 - d } else { 0.5 + d };
    let s = hw as f64;
    (x.clamp(0.04, 0.96) * s, y.clamp(0.04, 0.96) * s)
}

/// Pixels whose centre lies within `thickness/2` of the polyline.
pub fn rasterize(line: &[(f64, f64)], thickness: f64, hw: usize) -> Mask {
    let mut m = Mask::new(hw, hw);
    let r = 0.5 * thickness;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in line {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let lo = |v: f64| ((v - r - 1.0).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + r + 1.0).ceil().max(0.0) as usize).min(hw);
    for py in lo(y0)..hi(y1) {
        for px in lo(x0)..hi(x1) {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            if nearest_on_polyline(line, p).1 <= r {
                m.set(py, px, true);
            }
        }
    }
    m
}

/// Curve parameter in [0, 1] and distance of the closest polyline point.
fn nearest_on_polyline(line: &[(f64, f64)], p: (f64, f64)) -> (f64, f64) {
    let segs = (line.len() - 1).max(1) as f64;
    let mut best = (0.0, f64::MAX);
    for (i, s) in line.windows(2).enumerate() {
        let (ax, ay) = s[0];
        let (dx, dy) = (s[1].0 - ax, s[1].1 - ay);
        let len2 = dx * dx + dy * dy;
        let u = if len2 > 0.0 {
            (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = (p.0 - ax - u * dx).hypot(p.1 - ay - u * dy);
        if d < best.1 {
            best = ((i as f64 + u) / segs, d);
        }
    }
    best
}

fn place_vessel(rng: &mut impl Rng, spec: &ClassSpec, side: Side, hw: usize, attempt: usize) -> Vessel {
    let g = &spec.geometry;
    let lat = laterality(spec.class_id);
    // Later attempts wander further from the canonical layout.
    let jitter = 0.03 + 0.01 * attempt as f64;
    let mut jit = |(d, y): (f64, f64)| {
        let d = if lat == Laterality::Midline {
            rng.random_range(-jitter..=jitter)
        } else {
            (d + rng.random_range(-jitter..=jitter)).max(0.0)
        };
        (d, y + rng.random_range(-jitter..=jitter))
    };
    let (s, e) = (jit(g.start), jit(g.end));
    let bend = uniform(rng, g.curvature);
    let (mx, my) = (0.5 * (s.0 + e.0), 0.5 * (s.1 + e.1));
    let (cx, cy) = (e.0 - s.0, e.1 - s.1);
    let ctrl = (mx - cy * bend * 2.0, my + cx * bend * 2.0);
    let points = [s, ctrl, e].map(|p| to_pixels(side, lat, p, hw));
    let thickness_px = uniform(rng, g.thickness) * hw as f64;
    let contrast = uniform(rng, g.contrast);
    let gradient = (uniform(rng, (0.85, 1.0)), uniform(rng, (0.6, 0.8)));
    let mut v = Vessel {
        class_id: spec.class_id,
        points,
        thickness_px,
        contrast,
        polarity: g.polarity,
        gradient,
        mask: Mask::new(hw, hw),
    };
    v.mask = rasterize(&v.centerline(), thickness_px, hw);
    v
}

/// Samples the side, the class multiset and every vessel's geometry.
///
/// A vessel is redrawn while it overlaps a same-class vessel by more than
/// [`MAX_SAME_CLASS_IOU`]; after [`PLACEMENT_ATTEMPTS`] it is dropped.
pub fn plan_frame(rng: &mut impl Rng, hw: usize) -> Result<FramePlan> {
    check_hw(hw)?;
    let specs = class_specs();
    let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
    let mut vessels: Vec<Vessel> = Vec::new();
    for class_id in sample_classes(rng) {
        for attempt in 0..PLACEMENT_ATTEMPTS {
            let v = place_vessel(rng, &specs[class_id], side, hw, attempt);
            let clash = vessels
                .iter()
                .any(|o| o.class_id == class_id && o.mask.iou(&v.mask) > MAX_SAME_CLASS_IOU);
            if !clash && !v.mask.is_empty() {
                vessels.push(v);
                break;
            }
        }
    }
    if vessels.is_empty() {
        return Err(Error::InvalidArgument(format!("frame size {hw} too small to place any vessel")));
    }
    Ok(FramePlan { side, vessels })
}

fn background(rng: &mut impl Rng, hw: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let base = rng.random_range(0.2..0.3);
    let speckle = Gamma::new(4.0, 0.25).expect("valid gamma");
    let s = hw as f64;
    let mut out = Vec::with_capacity(hw * hw);
    for y in 0..hw {
        for x in 0..hw {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let field: f64 = base
                + waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos())
                    .sum::<f64>();
            out.push(field.max(0.0) * speckle.sample(rng));
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a plan onto a speckled background.
pub fn render(rng: &mut impl Rng, plan: &FramePlan, hw: usize) -> Tensor4 {
    let bg = background(rng, hw);
    let plane = hw * hw;
    let mut rgb = vec![0.0; 3 * plane];
    for c in 0..3 {
        rgb[c * plane..(c + 1) * plane].copy_from_slice(&bg);
    }
    let flow_noise = Gamma::new(16.0, 1.0 / 16.0).expect("valid gamma");
    for v in &plan.vessels {
        let line = v.centerline();
        let dominant = match v.polarity {
            Polarity::Red => 0,
            Polarity::Blue => 2,
        };
        for y in 0..hw {
            for x in 0..hw {
                if !v.mask.get(y, x) {
                    continue;
                }
                let (t, _) = nearest_on_polyline(&line, (x as f64 + 0.5, y as f64 + 0.5));
                let gain = v.gradient.0 + (v.gradient.1 - v.gradient.0) * t;
                let i = y * hw + x;
                let b = bg[i];
                rgb[dominant * plane + i] = b + v.contrast * gain * flow_noise.sample(rng);
                rgb[plane + i] = 0.6 * b;
                rgb[(2 - dominant) * plane + i] = 0.6 * b;
            }
        }
    }
    let data = rgb.into_iter().map(quantize).collect();
    Tensor4::from_vec(Shape4::new(1, 3, hw, hw), data).expect("sized above")
}

/// Plan of frame `index` under `seed`, without rendering.
pub fn frame_plan(hw: usize, seed: u64, index: usize) -> Result<FramePlan> {
    plan_frame(&mut frame_rng(seed, index), hw)
}

/// Frame `index` of the stream for `seed`. Frames use independent RNG streams.
pub fn generate_frame(hw: usize, seed: u64, index: usize) -> Result<FrameSample> {
    let mut rng = frame_rng(seed, index);
    let plan = plan_frame(&mut rng, hw)?;
    let image = render(&mut rng, &plan, hw);
    let instances = plan
        .vessels
        .iter()
        .map(|v| Instance::from_mask(v.class_id, v.mask.clone()).expect("placed vessels are non-empty"))
        .collect();
    Ok(FrameSample {
        index,
        image,
        instances,
        side: plan.side,
        rng_seed: seed,
    })
}

pub fn generate(n_frames: usize, hw: usize, seed: u64) -> Result<Vec<FrameSample>> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("at least one frame is required".into()));
    }
    check_hw(hw)?;
    (0..n_frames).map(|i| generate_frame(hw, seed, i)).collect()
}

/// Left-right mirror with ipsilateral and contralateral labels swapped.
pub fn mirror_frame(s: &FrameSample) -> FrameSample {
    let sh = s.image.shape();
    let image = Tensor4::from_fn(sh, |n, c, y, x| s.image.at(n, c, y, sh.w - 1 - x));
    let instances = s.instances.iter().map(|i| mirror_instance(i, sh.w)).collect();
    FrameSample {
        index: s.index,
        image,
        instances,
        side: s.side.flipped(),
        rng_seed: s.rng_seed,
    }
}

pub fn mirror_instance(i: &Instance, w: usize) -> Instance {
    let w = w as f64;
    Instance {
        class_id: counterpart(i.class_id).unwrap_or(i.class_id),
        score: i.score,
        bbox: [w - i.bbox[2], i.bbox[1], w - i.bbox[0], i.bbox[3]],
        mask: i.mask.mirrored(),
    }
}

/// Seeded 70/15/15 split of frame indices into train, val and test.
pub fn split(n_frames: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n_frames).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n_frames as f64 * 0.7).round() as usize;
    let n_val = ((n_frames as f64 * 0.15).round() as usize).min(n_frames - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}
