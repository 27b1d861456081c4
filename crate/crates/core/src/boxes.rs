//! Box geometry: center-form/corner-form conversions, IoU and generalized IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center form `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box in corner form `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCorners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn corners(&self) -> BoxCorners {
        BoxCorners {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when the box sits inside the unit square with positive extents.
    pub fn inside_unit_square(&self) -> bool {
        let c = self.corners();
        self.w > 0.0 && self.h > 0.0 && c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 1.0 && c.y2 <= 1.0
    }
}

impl BoxCorners {
    pub fn center_form(&self) -> BoxCxcywh {
        BoxCxcywh {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid(
                op,
                format!("degenerate box ({}, {}, {}, {})", self.x1, self.y1, self.x2, self.y2),
            ));
        }
        Ok(())
    }
}

/// One annotated object: a foreground class id and its normalized box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
}

pub fn intersection_area(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Plain intersection-over-union of two valid corner-form boxes.
pub fn iou(a: &BoxCorners, b: &BoxCorners) -> Result<f64> {
    a.validate("iou")?;
    b.validate("iou")?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: `IoU - (enclose - union) / enclose`, in `(-1, 1]`.
///
/// Unlike plain IoU it keeps discriminating between disjoint boxes, which is
/// what makes it usable as a regression loss component.
pub fn giou(a: &BoxCorners, b: &BoxCorners) -> Result<f64> {
    a.validate("giou")?;
    b.validate("giou")?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = ew * eh;
    Ok(inter / union - (enclose - union) / enclose)
}
