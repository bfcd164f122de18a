//! Boxes and square crop regions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box in center form. Pixel `i` covers `[i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Square region `side x side` centered at `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.check()?;
        Ok(b)
    }

    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn top_left(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn check(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return invalid(format!("invalid box {self:?}"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
    let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Exemplar region: side `sqrt((w + c)(h + c))` with `c = context (w + h)`.
pub fn object_roi(b: &BoundingBox, context: f64) -> Roi {
    let c = context * (b.w + b.h);
    Roi { cx: b.cx, cy: b.cy, side: ((b.w + c) * (b.h + c)).sqrt() }
}

/// Search region around the same center, enlarged by `search / object`.
pub fn search_roi(b: &BoundingBox, context: f64, object_size: usize, search_size: usize) -> Roi {
    let o = object_roi(b, context);
    let ratio = (search_size as f64 - object_size as f64) / object_size as f64 + 1.0;
    Roi { side: o.side * ratio, ..o }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_roi_examples() {
        let b = BoundingBox::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let r = object_roi(&b, 0.5);
        assert_eq!((r.cx, r.cy), (100.0, 100.0));
        assert!((r.side - 100.0).abs() < 1e-12);
        let sq = BoundingBox::new(3.0, 4.0, 17.5, 17.5).unwrap();
        assert!((object_roi(&sq, 0.5).side - 35.0).abs() < 1e-12);
    }

    #[test]
    fn search_ratio() {
        let b = BoundingBox::new(10.0, 20.0, 30.0, 12.0).unwrap();
        let o = object_roi(&b, 0.5).side;
        let full = search_roi(&b, 0.5, 127, 255).side;
        assert!((full / o - 255.0 / 127.0).abs() < 1e-12);
        assert!((search_roi(&b, 0.5, 40, 80).side / o - 2.0).abs() < 1e-15);
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::from_top_left(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::from_top_left(5.0, 0.0, 10.0, 10.0).unwrap();
        let c = BoundingBox::from_top_left(20.0, 20.0, 5.0, 5.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn top_left_round_trip() {
        let b = BoundingBox::from_top_left(1.5, 2.0, 4.0, 6.0).unwrap();
        assert_eq!((b.cx, b.cy), (3.5, 5.0));
        assert_eq!(b.top_left(), (1.5, 2.0, 4.0, 6.0));
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }
}
