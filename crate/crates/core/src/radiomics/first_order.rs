use super::quantize::bin_levels;
use crate::bbox::BoundingBox;

/// Intensity-distribution statistics of an ROI, in registry order:
/// mean, median, min, max, range, variance, skewness, kurtosis, energy, entropy.
pub fn first_order(pixels: &[f64], gray_levels: usize) -> [f64; 10] {
    assert!(!pixels.is_empty(), "first-order statistics need at least one pixel");
    let n = pixels.len() as f64;
    let mut sorted = pixels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let mean = if max > min { pixels.iter().sum::<f64>() / n } else { min };

    let central = |k: i32| pixels.iter().map(|&x| (x - mean).powi(k)).sum::<f64>() / n;
    // a flat ROI must report exactly zero spread, not summation round-off
    let variance = if max > min { central(2) } else { 0.0 };
    let (skewness, kurtosis) = if variance > 0.0 {
        (central(3) / variance.powf(1.5), central(4) / (variance * variance))
    } else {
        (0.0, 0.0)
    };
    let energy = pixels.iter().map(|x| x * x).sum();

    let mut hist = vec![0usize; gray_levels + 1];
    for l in bin_levels(pixels, gray_levels) {
        hist[l] += 1;
    }
    let entropy = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();

    [mean, median, min, max, max - min, variance, skewness, kurtosis, energy, entropy]
}

/// Rectangle descriptors: pixel surface, perimeter, aspect ratio, and the
/// fraction of the image the box covers.
pub fn shape_features(bbox: &BoundingBox, image_width: usize, image_height: usize) -> [f64; 4] {
    let (w, h) = (bbox.width() as f64, bbox.height() as f64);
    [w * h, 2.0 * (w + h), w.max(h) / w.min(h), w * h / (image_width * image_height) as f64]
}
