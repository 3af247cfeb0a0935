//! Axis-aligned boxes in image pixels.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Regression target `(dx, dy, dw, dh)` moving `self` onto `target`.
    pub fn deltas_to(&self, target: &BBox) -> [f64; 4] {
        let (ax, ay) = self.center();
        let (gx, gy) = target.center();
        [
            (gx - ax) / self.width(),
            (gy - ay) / self.height(),
            (target.width() / self.width()).ln(),
            (target.height() / self.height()).ln(),
        ]
    }

    /// Inverse of [`BBox::deltas_to`]. Log-scale deltas are clamped so a
    /// wild prediction cannot overflow.
    pub fn apply_deltas(&self, d: &[f64]) -> BBox {
        const MAX_LOG_SCALE: f64 = 4.0;
        let (ax, ay) = self.center();
        let cx = ax + d[0] * self.width();
        let cy = ay + d[1] * self.height();
        let w = self.width() * d[2].min(MAX_LOG_SCALE).exp();
        let h = self.height() * d[3].min(MAX_LOG_SCALE).exp();
        BBox::from_center(cx, cy, w, h)
    }
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score, ties broken by lower index; returns kept indices in that order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    let order = rank_by_score(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Indices sorted by descending score with index tie-break.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}
