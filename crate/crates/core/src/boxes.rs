//! Axis-aligned bounding boxes and plain-number box losses.
//!
//! Boxes live in pixel units with a top-left origin, stored as (x, y, w, h).
//! Loss computation converts to corner form (x1, y1, x2, y2). The
//! differentiable twins of these losses live in [`crate::losses`]; the
//! versions here are the straight-line reference used by evaluation and by
//! test oracles.

use crate::{Result, TrackError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x: x1, y: y1, w: x2 - x1, h: y2 - y1 }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x, self.y, self.x + self.w, self.y + self.h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn center_distance(&self, other: &BoundingBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Intersection area; 0 when disjoint.
    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: IoU minus the enclosing-hull area not covered by the
    /// union, relative to the hull. In (-1, 1].
    pub fn giou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
        inter / union - (hull - union) / hull
    }

    /// Whether the box lies fully inside a width x height frame.
    pub fn inside_frame(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    /// Clip to the frame, keeping at least 1 px of extent. Returns the
    /// clipped box and whether clipping changed it.
    pub fn clip_to_frame(&self, width: usize, height: usize) -> (BoundingBox, bool) {
        let (fw, fh) = (width as f64, height as f64);
        let x1 = self.x.clamp(0.0, fw - 1.0);
        let y1 = self.y.clamp(0.0, fh - 1.0);
        let x2 = (self.x + self.w).clamp(x1 + 1.0, fw);
        let y2 = (self.y + self.h).clamp(y1 + 1.0, fh);
        let clipped = BoundingBox::from_corners(x1, y1, x2, y2);
        let changed = (clipped.x - self.x).abs() > 1e-9
            || (clipped.y - self.y).abs() > 1e-9
            || (clipped.w - self.w).abs() > 1e-9
            || (clipped.h - self.h).abs() > 1e-9;
        (clipped, changed)
    }
}

/// 1 - GIoU. Zero for identical boxes, approaching 2 for far-apart boxes.
pub fn giou_loss(b: &BoundingBox, bhat: &BoundingBox) -> Result<f64> {
    for bb in [b, bhat] {
        if !(bb.w > 0.0 && bb.h > 0.0) {
            return Err(TrackError::DegenerateBox { w: bb.w, h: bb.h });
        }
    }
    Ok(1.0 - b.giou(bhat))
}

/// Mean absolute corner-coordinate difference, normalized by the crop side.
pub fn l1_box_loss(b: &BoundingBox, bhat: &BoundingBox, norm: f64) -> f64 {
    let (ax1, ay1, ax2, ay2) = b.corners();
    let (bx1, by1, bx2, by2) = bhat.corners();
    ((ax1 - bx1).abs() + (ay1 - by1).abs() + (ax2 - bx2).abs() + (ay2 - by2).abs()) / 4.0 / norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_loss_hand_values() {
        // Disjoint: IoU 0, union 8, hull 10 -> GIoU -0.2.
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(3.0, 0.0, 2.0, 2.0);
        assert!((giou_loss(&a, &b).unwrap() - 1.2).abs() < 1e-12);

        // Overlapping: inter 2, union 6, hull 6 -> GIoU 1/3.
        let c = BoundingBox::new(1.0, 0.0, 2.0, 2.0);
        assert!((giou_loss(&a, &c).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn giou_loss_rejects_degenerate_boxes() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let flat = BoundingBox::new(0.0, 0.0, 2.0, 0.0);
        assert!(matches!(
            giou_loss(&a, &flat),
            Err(TrackError::DegenerateBox { .. })
        ));
    }

    #[test]
    fn l1_loss_hand_value_and_symmetry() {
        let a = BoundingBox::new(0.0, 0.0, 8.0, 8.0);
        let b = BoundingBox::new(4.0, 0.0, 8.0, 8.0);
        assert!((l1_box_loss(&a, &b, 64.0) - 1.0 / 32.0).abs() < 1e-12);
        assert_eq!(l1_box_loss(&a, &b, 64.0), l1_box_loss(&b, &a, 64.0));
        assert_eq!(l1_box_loss(&a, &a, 64.0), 0.0);
    }

    #[test]
    fn losses_are_translation_invariant() {
        let a = BoundingBox::new(3.0, 7.0, 5.0, 9.0);
        let b = BoundingBox::new(6.0, 2.0, 4.0, 11.0);
        let (dx, dy) = (17.3, -4.2);
        let at = BoundingBox::new(a.x + dx, a.y + dy, a.w, a.h);
        let bt = BoundingBox::new(b.x + dx, b.y + dy, b.w, b.h);
        assert!((giou_loss(&a, &b).unwrap() - giou_loss(&at, &bt).unwrap()).abs() < 1e-12);
        assert!((l1_box_loss(&a, &b, 64.0) - l1_box_loss(&at, &bt, 64.0)).abs() < 1e-12);
    }

    #[test]
    fn clip_keeps_minimum_extent() {
        let b = BoundingBox::new(-5.0, -5.0, 3.0, 3.0);
        let (c, changed) = b.clip_to_frame(64, 64);
        assert!(changed);
        assert!(c.inside_frame(64, 64));
        assert!(c.w >= 1.0 && c.h >= 1.0);

        let inside = BoundingBox::new(10.0, 10.0, 8.0, 8.0);
        let (same, changed) = inside.clip_to_frame(64, 64);
        assert!(!changed);
        assert_eq!(same, inside);
    }

    #[test]
    fn giou_bounded_above_by_iou() {
        let a = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        let b = BoundingBox::new(2.0, 1.0, 5.0, 3.0);
        assert!(a.giou(&b) <= a.iou(&b) + 1e-12);
        assert!(a.giou(&b) > -1.0);
    }
}
