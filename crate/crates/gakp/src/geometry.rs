//! Bounding-box arithmetic and conversion into the filter measurement space.

use crate::error::{Error, Result};
use nalgebra::Vector4;

/// Axis-aligned box in image pixels, stored as top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite fields and non-positive sizes.
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self> {
        let fields = [left, top, width, height];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(
                "bounding box",
                format!("non-finite field in ({left}, {top}, {width}, {height})"),
            ));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::input(
                "bounding box",
                format!("non-positive size {width}x{height}"),
            ));
        }
        Ok(BoundingBox {
            left,
            top,
            width,
            height,
        })
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Center point `(u, v)`.
    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }
}

/// A box expressed as the filter observes it: center position, aspect ratio
/// (width over height), and height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub u: f64,
    pub v: f64,
    pub gamma: f64,
    pub h: f64,
}

impl Measurement {
    /// Builds a measurement, rejecting non-finite fields and non-positive
    /// aspect ratio or height.
    pub fn new(u: f64, v: f64, gamma: f64, h: f64) -> Result<Self> {
        let fields = [u, v, gamma, h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(
                "measurement",
                format!("non-finite field in ({u}, {v}, {gamma}, {h})"),
            ));
        }
        if gamma <= 0.0 || h <= 0.0 {
            return Err(Error::input(
                "measurement",
                format!("non-positive aspect ratio {gamma} or height {h}"),
            ));
        }
        Ok(Measurement { u, v, gamma, h })
    }

    /// The measurement as a column vector `[u, v, gamma, h]`.
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.u, self.v, self.gamma, self.h)
    }
}

/// Intersection-over-union of two boxes. Zero when disjoint, one when
/// identical; always in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.left.max(b.left)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.top.max(b.top)).max(0.0);
    let intersection = ix * iy;
    if intersection <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - intersection;
    intersection / union
}

/// Converts a box into measurement space.
pub fn box_to_measurement(b: &BoundingBox) -> Measurement {
    let (u, v) = b.center();
    Measurement {
        u,
        v,
        gamma: b.width / b.height,
        h: b.height,
    }
}

/// Converts a measurement back into a pixel-space box.
pub fn measurement_to_box(m: &Measurement) -> BoundingBox {
    let width = m.gamma * m.h;
    BoundingBox {
        left: m.u - width / 2.0,
        top: m.v - m.h / 2.0,
        width,
        height: m.h,
    }
}
