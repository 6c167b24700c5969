use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel units, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn has_positive_area(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }

    pub fn clip(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Mirror across the vertical axis of an image of the given width.
    pub fn flip_horizontal(&self, width: usize) -> BBox {
        let w = width as f64;
        BBox {
            x0: w - self.x1,
            y0: self.y0,
            x1: w - self.x0,
            y1: self.y1,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Greedy suppression: walks `order` (already sorted by preference) and keeps
/// a box unless it overlaps an already kept box with IoU strictly above
/// `threshold`. Stops once `limit` boxes are kept.
pub fn greedy_nms(boxes: &[BBox], order: &[usize], threshold: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(limit.min(order.len()));
    for &i in order {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}
