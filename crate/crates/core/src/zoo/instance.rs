use serde::{Deserialize, Serialize};

/// Binary mask over a frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == h * w).then_some(Mask { h, w, bits })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Mask IoU; two empty masks score 0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight box `(x1, y1, x2, y2)` with exclusive right/bottom edges.
    pub fn tight_box(&self) -> Option<[usize; 4]> {
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    any = true;
                    b[0] = b[0].min(x);
                    b[1] = b[1].min(y);
                    b[2] = b[2].max(x + 1);
                    b[3] = b[3].max(y + 1);
                }
            }
        }
        any.then_some(b)
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Mask {
        let mut m = Mask::new(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                m.set(y, self.w - 1 - x, self.get(y, x));
            }
        }
        m
    }
}

/// One predicted or ground-truth artery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub score: f64,
    /// `(x1, y1, x2, y2)` in pixels; right/bottom edges exclusive.
    pub bbox: [f64; 4],
    pub mask: Mask,
}

impl Instance {
    /// Ground-truth instance with a tight box derived from its mask.
    pub fn from_mask(class_id: usize, mask: Mask) -> Option<Instance> {
        let b = mask.tight_box()?;
        Some(Instance {
            class_id,
            score: 1.0,
            bbox: b.map(|v| v as f64),
            mask,
        })
    }

    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]).max(0.0) * (self.bbox[3] - self.bbox[1]).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.bbox[0] + self.bbox[2]), 0.5 * (self.bbox[1] + self.bbox[3]))
    }
}
