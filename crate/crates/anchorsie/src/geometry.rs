//! Normalized bounding boxes and overlap measures.
//!
//! Boxes are stored in center-size form `(cx, cy, w, h)` with all coordinates
//! normalized to `[0, 1]` by page width/height. Corner form `(x0, y0, x1, y1)`
//! is available through conversions and is what the JSON interfaces use.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Build from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Corner coordinates `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    /// Corner form as an array, the order used by the JSON interfaces.
    pub fn corner_array(&self) -> [f64; 4] {
        let (x0, y0, x1, y1) = self.corners();
        [x0, y0, x1, y1]
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    /// True when `(x, y)` lies inside the box, boundary inclusive.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    /// Smallest box covering both `self` and `other`.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        BBox::from_corners(ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1))
    }

    /// Coordinates within `[0, 1]` and non-negative extents.
    pub fn is_normalized(&self) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        self.w >= 0.0
            && self.h >= 0.0
            && (-1e-9..=1.0 + 1e-9).contains(&x0)
            && (-1e-9..=1.0 + 1e-9).contains(&y0)
            && x1 <= 1.0 + 1e-9
            && y1 <= 1.0 + 1e-9
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Intersection over union. Zero-area unions yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`: IoU minus the hull area not covered by the
/// union, as a fraction of the hull. Degenerate (zero-hull) pairs yield the
/// plain IoU.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    let hull = a.union_hull(b).area();
    if hull <= 0.0 {
        return i;
    }
    i - (hull - union.max(0.0)) / hull
}
