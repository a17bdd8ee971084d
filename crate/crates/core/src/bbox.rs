use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle; `x0`/`y0` inclusive, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    /// Builds a box and checks it is non-empty and inside a `width x height` image.
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, width: usize, height: usize) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate(width, height)?;
        Ok(b)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::data(format!("box {self:?} invalid for {width}x{height} image")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// True when `other` lies entirely inside `self`.
    pub fn encloses(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    /// Centered box with half the image width and height (a quarter of the area).
    pub fn centered_quarter(width: usize, height: usize) -> Self {
        let (w, h) = ((width / 2).max(1), (height / 2).max(1));
        let x0 = (width - w) / 2;
        let y0 = (height - h) / 2;
        BoundingBox { x0, y0, x1: x0 + w, y1: y0 + h }
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

/// Intersection over union of the pixel sets covered by two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}
