use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Gray levels of an ROI after equal-width binning, each in `1..=gray_levels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedRoi {
    width: usize,
    height: usize,
    gray_levels: usize,
    levels: Vec<usize>,
}

impl QuantizedRoi {
    pub fn from_levels(width: usize, height: usize, gray_levels: usize, levels: Vec<usize>) -> Result<Self> {
        if levels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::data(format!("{width}x{height} ROI cannot hold {} levels", levels.len())));
        }
        if let Some(&bad) = levels.iter().find(|&&l| l == 0 || l > gray_levels) {
            return Err(Error::data(format!("level {bad} outside 1..={gray_levels}")));
        }
        Ok(QuantizedRoi { width, height, gray_levels, levels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gray_levels(&self) -> usize {
        self.gray_levels
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level at column `x`, row `y`.
    pub fn at(&self, x: usize, y: usize) -> usize {
        self.levels[y * self.width + x]
    }

    /// Level at signed coordinates, `None` outside the ROI.
    pub(crate) fn get(&self, x: isize, y: isize) -> Option<usize> {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            None
        } else {
            Some(self.levels[y as usize * self.width + x as usize])
        }
    }
}

/// Equal-width binning of `values` over their own `[min, max]` range.
/// A constant input maps entirely to level 1.
pub fn bin_levels(values: &[f64], gray_levels: usize) -> Vec<usize> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                1
            } else {
                let bin = ((v - lo) / range * gray_levels as f64).floor() as usize + 1;
                bin.min(gray_levels)
            }
        })
        .collect()
}

/// Pixels of `image` inside `bbox` in row-major order.
pub fn roi_pixels(image: &GrayImage, bbox: &BoundingBox) -> Result<Vec<f64>> {
    bbox.validate(image.width(), image.height())?;
    let mut out = Vec::with_capacity(bbox.area());
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            out.push(image.get(x, y));
        }
    }
    Ok(out)
}

pub fn quantize(image: &GrayImage, bbox: &BoundingBox, gray_levels: usize) -> Result<QuantizedRoi> {
    if gray_levels < 2 {
        return Err(Error::config(format!("need at least 2 gray levels, got {gray_levels}")));
    }
    let pixels = roi_pixels(image, bbox)?;
    QuantizedRoi::from_levels(bbox.width(), bbox.height(), gray_levels, bin_levels(&pixels, gray_levels))
}
