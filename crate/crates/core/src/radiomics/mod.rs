//! Radiomic feature extraction from rectangular ROIs.
//!
//! A fixed, versioned registry of 33 features: first-order intensity
//! statistics, rectangle shape descriptors and five gray-level texture
//! families computed on an equal-width quantized copy of the ROI.

mod first_order;
mod quantize;
mod texture;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;

pub use first_order::{first_order, shape_features};
pub use quantize::{bin_levels, quantize, roi_pixels, QuantizedRoi};
pub use texture::{
    glcm_for_offsets, texture_features, texture_matrix, CountMatrix, Ngtdm, TextureKind, TextureMatrix, DIRECTIONS,
    MAX_COARSENESS,
};

pub const FEATURE_COUNT: usize = 33;
pub const REGISTRY_VERSION: u32 = 1;
pub const DEFAULT_GRAY_LEVELS: usize = 8;
/// z-scores are clamped to `[-Z_CLAMP, Z_CLAMP]`.
pub const Z_CLAMP: f64 = 6.0;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "firstorder_mean",
    "firstorder_median",
    "firstorder_min",
    "firstorder_max",
    "firstorder_range",
    "firstorder_variance",
    "firstorder_skewness",
    "firstorder_kurtosis",
    "firstorder_energy",
    "firstorder_entropy",
    "shape_pixel_surface",
    "shape_perimeter",
    "shape_aspect_ratio",
    "shape_relative_area",
    "glcm_contrast",
    "glcm_correlation",
    "glcm_joint_energy",
    "glcm_homogeneity",
    "glcm_entropy",
    "glcm_dissimilarity",
    "glrlm_short_run_emphasis",
    "glrlm_long_run_emphasis",
    "glrlm_gray_level_nonuniformity",
    "glrlm_run_percentage",
    "glszm_small_area_emphasis",
    "glszm_large_area_emphasis",
    "glszm_zone_percentage",
    "ngtdm_coarseness",
    "ngtdm_contrast",
    "ngtdm_busyness",
    "gldm_small_dependence_emphasis",
    "gldm_large_dependence_emphasis",
    "gldm_dependence_nonuniformity",
];

/// Short hex digest identifying the feature order; stored in checkpoints so
/// a radiomic encoder is never fed a differently ordered vector.
pub fn registry_hash() -> String {
    let mut h = Sha256::new();
    h.update(format!("radiomics-registry-v{REGISTRY_VERSION}:"));
    h.update(FEATURE_NAMES.join(","));
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiomicVector(pub Vec<f64>);

impl RadiomicVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }
}

/// The 33 unnormalized features of `bbox` within `image`.
pub fn raw_features(image: &GrayImage, bbox: &BoundingBox, gray_levels: usize) -> Result<[f64; FEATURE_COUNT]> {
    let pixels = roi_pixels(image, bbox)?;
    let roi = quantize(image, bbox, gray_levels)?;
    let mut out = [0.0; FEATURE_COUNT];
    out[..10].copy_from_slice(&first_order(&pixels, gray_levels));
    out[10..14].copy_from_slice(&shape_features(bbox, image.width(), image.height()));
    let mut k = 14;
    for kind in TextureKind::ALL {
        let feats = texture_features(&texture_matrix(&roi, kind)?);
        out[k..k + feats.len()].copy_from_slice(&feats);
        k += feats.len();
    }
    debug_assert_eq!(k, FEATURE_COUNT);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature { feature: FEATURE_NAMES[i], value: out[i] });
    }
    Ok(out)
}

/// Per-feature z-score parameters, frozen before training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub gray_levels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Mean 0, unit deviation: extraction returns clamped raw values.
    pub fn identity(gray_levels: usize) -> Self {
        NormalizationStats { gray_levels, mean: vec![0.0; FEATURE_COUNT], std: vec![1.0; FEATURE_COUNT] }
    }

    /// Population mean and deviation of each feature over the given ROIs.
    /// Features with zero spread keep a unit deviation.
    pub fn fit<'a, I>(samples: I, gray_levels: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a GrayImage, BoundingBox)>,
    {
        let rows: Vec<[f64; FEATURE_COUNT]> =
            samples.into_iter().map(|(img, b)| raw_features(img, &b, gray_levels)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(Error::data("cannot fit radiomic normalization on zero ROIs"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        let mut std = vec![0.0; FEATURE_COUNT];
        for k in 0..FEATURE_COUNT {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Ok(NormalizationStats { gray_levels, mean, std })
    }

    pub fn normalize(&self, raw: &[f64; FEATURE_COUNT]) -> RadiomicVector {
        RadiomicVector(
            raw.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(&x, (&m, &s))| ((x - m) / s).clamp(-Z_CLAMP, Z_CLAMP))
                .collect(),
        )
    }
}

/// Raw features of the ROI, z-scored by `stats` and clamped.
pub fn extract(image: &GrayImage, bbox: &BoundingBox, stats: &NormalizationStats) -> Result<RadiomicVector> {
    Ok(stats.normalize(&raw_features(image, bbox, stats.gray_levels)?))
}
