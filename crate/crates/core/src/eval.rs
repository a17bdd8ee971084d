//! Classification AUC, localization accuracy and the evaluation report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::ARTIFACT_VERSION;
use crate::bbox::{iou, BoundingBox};
use crate::cam::{gradcam_from_stage4, threshold_to_bbox};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::InferenceModel;
use crate::radiomics::registry_hash;
use crate::sampling::Label;
use crate::synth::{Dataset, LabeledImage, Split};

pub const DEFAULT_LOC_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// Rank-based AUC: the probability a random positive outscores a random
/// negative, ties counted as one half. `None` unless both classes occur.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "score and label counts differ");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` where a class had only positives or only negatives.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Per-class AUC of `scores[i][k]` against one-disease-or-normal labels.
pub fn eval_auc(scores: &[Vec<f64>], labels: &[Label], num_classes: usize) -> AucReport {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|l| l.disease() == Some(k)).collect();
            let a = auc(&s, &y);
            if a.is_none() {
                log::debug!("class {k} has a single label value; AUC undefined and excluded from the mean");
            }
            a
        })
        .collect();
    AucReport { mean: mean_defined(&per_class), per_class }
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTable {
    pub thresholds: Vec<f64>,
    /// `per_class[k][t]`: fraction of class-`k` images with IoU above threshold `t`.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub images_per_class: Vec<usize>,
    /// Mean over classes that have images.
    pub mean: Vec<Option<f64>>,
}

impl LocalizationTable {
    /// Builds the table from `(class, iou)` observations.
    pub fn from_ious(num_classes: usize, ious: &[(usize, f64)], thresholds: &[f64]) -> Self {
        let mut images_per_class = vec![0; num_classes];
        let mut hits = vec![vec![0usize; thresholds.len()]; num_classes];
        for &(k, v) in ious {
            images_per_class[k] += 1;
            for (t, &thr) in thresholds.iter().enumerate() {
                hits[k][t] += usize::from(v > thr);
            }
        }
        let per_class: Vec<Vec<Option<f64>>> = hits
            .iter()
            .zip(&images_per_class)
            .map(|(h, &n)| h.iter().map(|&c| (n > 0).then(|| c as f64 / n as f64)).collect())
            .collect();
        let mean = (0..thresholds.len())
            .map(|t| mean_defined(&per_class.iter().map(|r| r[t]).collect::<Vec<_>>()))
            .collect();
        LocalizationTable { thresholds: thresholds.to_vec(), per_class, images_per_class, mean }
    }

    /// Accuracy never rises as the IoU threshold rises, for every class and
    /// the mean (thresholds must be ascending).
    pub fn is_monotone(&self) -> bool {
        let rows = self.per_class.iter().chain(std::iter::once(&self.mean));
        rows.into_iter()
            .all(|r| r.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b <= a) || w[0].is_none()))
    }

    pub fn mean_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - threshold).abs() < 1e-12).and_then(|i| self.mean[i])
    }
}

/// One image's predicted box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: usize,
    pub class: usize,
    pub predicted: BoundingBox,
    pub truth: BoundingBox,
    pub iou: f64,
}

/// Grad-CAM box of the image's own class, thresholded and compared with its
/// ground truth. Images without a disease label or box are skipped.
pub fn localize(model: &InferenceModel, images: &[&LabeledImage], cam_threshold: f64) -> Result<Vec<BoxRecord>> {
    images
        .par_iter()
        .filter_map(|img| Some((img, img.label.disease()?, img.gt_box?)))
        .map(|(img, class, truth)| {
            let (_, stage4) = model.image_encoder.encode(&img.image)?;
            let (w, h) = (img.image.width(), img.image.height());
            let heat = gradcam_from_stage4(&model.head, &stage4, class, w, h)?;
            let predicted = threshold_to_bbox(&heat, cam_threshold, BoundingBox::centered_quarter(w, h))?;
            Ok(BoxRecord { image_id: img.id, class, predicted, truth, iou: iou(&predicted, &truth) })
        })
        .collect()
}

pub fn eval_localization(
    model: &InferenceModel,
    images: &[&LabeledImage],
    thresholds: &[f64],
    cam_threshold: f64,
) -> Result<LocalizationTable> {
    check_thresholds(thresholds)?;
    let records = localize(model, images, cam_threshold)?;
    let ious: Vec<(usize, f64)> = records.iter().map(|r| (r.class, r.iou)).collect();
    let table = LocalizationTable::from_ious(model.config.num_classes, &ious, thresholds);
    if !table.is_monotone() {
        return Err(Error::numerical("localization accuracy increased with the IoU threshold"));
    }
    Ok(table)
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty()
        || thresholds.iter().any(|t| !(0.0..1.0).contains(t))
        || thresholds.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::config(format!("IoU thresholds must be ascending values in [0, 1): {thresholds:?}")));
    }
    Ok(())
}

/// Class probabilities for each image.
pub fn predict(model: &InferenceModel, images: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let (y, _) = model.image_encoder.encode(&img.image)?;
            Ok(model.classify(&y)?.into_data())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub artifact_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub registry_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub class_names: Vec<String>,
    pub auc: AucReport,
    pub localization: LocalizationTable,
}

/// AUC on the unannotated test split and localization on the annotated test
/// split, using only the image encoder and classifier head.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, thresholds: &[f64]) -> Result<EvalReport> {
    let model = checkpoint.inference_model()?;
    let k = model.config.num_classes;
    if k != dataset.num_classes() {
        return Err(Error::data(format!("checkpoint predicts {k} classes, dataset has {}", dataset.num_classes())));
    }
    let test = dataset.split(Split::Test);
    let scores = predict(&model, &test)?;
    let labels: Vec<Label> = test.iter().map(|i| i.label).collect();
    let auc = eval_auc(&scores, &labels, k);
    let loc = dataset.split(Split::AnnotatedTest);
    let localization = eval_localization(&model, &loc, thresholds, checkpoint.meta.cam_threshold)?;
    Ok(EvalReport {
        meta: ReportMeta {
            artifact_version: ARTIFACT_VERSION,
            config_hash: checkpoint.meta.config_hash.clone(),
            seed: checkpoint.meta.seed,
            checkpoint_id: checkpoint.id(),
            registry_hash: registry_hash(),
        },
        class_names: checkpoint.meta.class_names.clone(),
        auc,
        localization,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "   -  ".to_string(), |x| format!("{x:.3}"))
}

impl EvalReport {
    /// AUC table followed by the localization table, one class per row.
    pub fn render_text(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:width$}  AUC", "class");
        for (name, a) in self.class_names.iter().zip(&self.auc.per_class) {
            let _ = writeln!(s, "{name:width$}  {}", cell(*a));
        }
        let _ = writeln!(s, "{:width$}  {}\n", "mean", cell(self.auc.mean));

        let _ = write!(s, "{:width$}  {:>3}", "T(IoU)", "n");
        for t in &self.localization.thresholds {
            let _ = write!(s, "  {t:>5.1}");
        }
        s.push('\n');
        for (k, name) in self.class_names.iter().enumerate() {
            let _ = write!(s, "{name:width$}  {:>3}", self.localization.images_per_class[k]);
            for v in &self.localization.per_class[k] {
                let _ = write!(s, "  {}", cell(*v));
            }
            s.push('\n');
        }
        let total: usize = self.localization.images_per_class.iter().sum();
        let _ = write!(s, "{:width$}  {total:>3}", "mean");
        for v in &self.localization.mean {
            let _ = write!(s, "  {}", cell(*v));
        }
        s.push('\n');
        s
    }
}
