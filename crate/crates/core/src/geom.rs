//! Box types and overlap math.
//!
//! `BBox` is a center-format box normalized to [0,1] relative to a region
//! (the search crop). `PixelBox` is a top-left-format box in frame pixels.

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::contract(format!(
                "box center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 || self.w > 1.0 || self.h > 1.0 {
            return Err(Error::contract(format!(
                "box size ({}, {}) outside (0,1]",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union for top-left pixel boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let a = PixelBox::new(3.0, 4.0, 10.0, 6.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0);
        let b = PixelBox::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_geometry() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0);
        let b = PixelBox::new(1.0, 0.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::new(0.5, 0.5, 0.2, 0.2).is_ok());
        assert!(BBox::new(1.5, 0.5, 0.2, 0.2).is_err());
        assert!(BBox::new(0.5, 0.5, 0.0, 0.2).is_err());
    }
}
