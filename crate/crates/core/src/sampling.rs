//! Disease hierarchy and contrastive pair construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::radiomics::{extract, NormalizationStats, RadiomicVector};

pub const DEFAULT_NORMAL_CAP: usize = 8;

/// Image label: normal, or exactly one disease (index into the hierarchy).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Label {
    Normal,
    Disease(usize),
}

impl From<Option<usize>> for Label {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Label::Normal, Label::Disease)
    }
}

impl From<Label> for Option<usize> {
    fn from(l: Label) -> Self {
        l.disease()
    }
}

impl Label {
    pub fn disease(self) -> Option<usize> {
        match self {
            Label::Normal => None,
            Label::Disease(d) => Some(d),
        }
    }

    pub fn is_normal(self) -> bool {
        self == Label::Normal
    }

    /// Multi-hot target row over `k` classes (all zero for normal).
    pub fn targets(self, k: usize) -> Vec<f64> {
        let mut t = vec![0.0; k];
        if let Label::Disease(d) = self {
            t[d] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseNode {
    pub name: String,
    pub part: String,
}

/// Body parts, the diseases under each, and the normal label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawHierarchy", into = "RawHierarchy")]
pub struct DiseaseHierarchy {
    body_parts: Vec<String>,
    diseases: Vec<DiseaseNode>,
    normal: String,
    part_index: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHierarchy {
    body_parts: Vec<String>,
    diseases: Vec<DiseaseNode>,
    normal: String,
}

impl TryFrom<RawHierarchy> for DiseaseHierarchy {
    type Error = Error;

    fn try_from(r: RawHierarchy) -> Result<Self> {
        DiseaseHierarchy::new(r.body_parts, r.diseases, r.normal)
    }
}

impl From<DiseaseHierarchy> for RawHierarchy {
    fn from(h: DiseaseHierarchy) -> Self {
        RawHierarchy { body_parts: h.body_parts, diseases: h.diseases, normal: h.normal }
    }
}

impl DiseaseHierarchy {
    pub fn new(body_parts: Vec<String>, diseases: Vec<DiseaseNode>, normal: String) -> Result<Self> {
        let mut names: Vec<&str> = body_parts.iter().chain(diseases.iter().map(|d| &d.name)).map(String::as_str).collect();
        names.push(&normal);
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != total {
            return Err(Error::config("hierarchy node names must be unique"));
        }
        if diseases.is_empty() {
            return Err(Error::config("hierarchy needs at least one disease"));
        }
        let part_index = diseases
            .iter()
            .map(|d| {
                body_parts
                    .iter()
                    .position(|p| *p == d.part)
                    .ok_or_else(|| Error::config(format!("disease `{}` names unknown body part `{}`", d.name, d.part)))
            })
            .collect::<Result<_>>()?;
        Ok(DiseaseHierarchy { body_parts, diseases, normal, part_index })
    }

    fn from_table(parts: &[&str], diseases: &[(&str, &str)], normal: &str) -> Self {
        let diseases = diseases.iter().map(|(n, p)| DiseaseNode { name: n.to_string(), part: p.to_string() }).collect();
        DiseaseHierarchy::new(parts.iter().map(|s| s.to_string()).collect(), diseases, normal.into())
            .expect("built-in hierarchy is valid")
    }

    /// Chest X-ray organization: five body parts, fifteen findings, normal.
    pub fn chest_xray() -> Self {
        Self::from_table(
            &["Lung", "Pleura", "Heart", "Mediastinum", "Bone"],
            &[
                ("Atelectasis", "Lung"),
                ("Pneumonia", "Lung"),
                ("Edema", "Lung"),
                ("Infiltration", "Lung"),
                ("Mass", "Lung"),
                ("Nodule", "Lung"),
                ("Consolidation", "Lung"),
                ("Emphysema", "Lung"),
                ("Fibrosis", "Lung"),
                ("Effusion", "Pleura"),
                ("Pneumothorax", "Pleura"),
                ("Pleural Thickening", "Pleura"),
                ("Cardiomegaly", "Heart"),
                ("Hernia", "Mediastinum"),
                ("Bone Fractures", "Bone"),
            ],
            "Normal",
        )
    }

    /// The phantom dataset's hierarchy: three vertical zones and eight lesion
    /// types, one per generator.
    pub fn synthetic() -> Self {
        Self::from_table(
            &["left_zone", "middle_zone", "right_zone"],
            &[
                ("small_nodule", "left_zone"),
                ("faint_mass", "left_zone"),
                ("ring", "left_zone"),
                ("speckle", "middle_zone"),
                ("stripes", "middle_zone"),
                ("lucency", "middle_zone"),
                ("streak", "right_zone"),
                ("blocky", "right_zone"),
            ],
            "normal",
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn body_parts(&self) -> &[String] {
        &self.body_parts
    }

    pub fn diseases(&self) -> &[DiseaseNode] {
        &self.diseases
    }

    pub fn normal(&self) -> &str {
        &self.normal
    }

    pub fn num_diseases(&self) -> usize {
        self.diseases.len()
    }

    /// Body parts, diseases and the normal node.
    pub fn node_count(&self) -> usize {
        self.body_parts.len() + self.diseases.len() + 1
    }

    pub fn part_of(&self, disease: usize) -> usize {
        self.part_index[disease]
    }

    pub fn disease_index(&self, name: &str) -> Option<usize> {
        self.diseases.iter().position(|d| d.name == name)
    }

    pub fn label_name(&self, label: Label) -> &str {
        match label {
            Label::Normal => &self.normal,
            Label::Disease(d) => &self.diseases[d].name,
        }
    }

    /// Whether an image labeled `other` may serve as a negative for an anchor
    /// with disease `anchor`: normal, or same body part with another disease.
    pub fn is_negative(&self, anchor: usize, other: Label) -> bool {
        match other {
            Label::Normal => true,
            Label::Disease(l) => l != anchor && self.part_of(l) == self.part_of(anchor),
        }
    }
}

/// Indices of batch members eligible as negatives for the anchor at
/// `anchor_index`, which must be disease-positive. The anchor itself is excluded.
pub fn negative_candidates(anchor_index: usize, labels: &[Label], h: &DiseaseHierarchy) -> Vec<usize> {
    let Label::Disease(d) = labels[anchor_index] else {
        panic!("negative candidates requested for a normal anchor");
    };
    labels
        .iter()
        .enumerate()
        .filter(|&(j, &l)| j != anchor_index && h.is_negative(d, l))
        .map(|(j, _)| j)
        .collect()
}

/// One anchor image, its radiomic view and the batch indices of its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub anchor: usize,
    pub bbox: BoundingBox,
    pub radiomic: RadiomicVector,
    pub negatives: Vec<usize>,
}

/// Builds one pair per disease-positive batch member, in batch order.
/// Normal negatives beyond `normal_cap` (in batch order) are dropped. An
/// image whose ROI features cannot be extracted is skipped with a warning.
pub fn build_pairs(
    images: &[&GrayImage],
    labels: &[Label],
    boxes: &[Option<BoundingBox>],
    stats: &NormalizationStats,
    h: &DiseaseHierarchy,
    normal_cap: usize,
) -> Result<Vec<ContrastivePair>> {
    if images.len() != labels.len() || boxes.len() != labels.len() {
        return Err(Error::config("images, labels and boxes must have equal lengths"));
    }
    let mut pairs = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        if label.is_normal() {
            continue;
        }
        let bbox = boxes[i].ok_or_else(|| Error::config(format!("disease-positive batch item {i} has no box")))?;
        let radiomic = match extract(images[i], &bbox, stats) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping contrastive pair for batch item {i}: {e}");
                continue;
            }
        };
        let mut normals = 0;
        let negatives = negative_candidates(i, labels, h)
            .into_iter()
            .filter(|&j| {
                if labels[j].is_normal() {
                    normals += 1;
                    normals <= normal_cap
                } else {
                    true
                }
            })
            .collect();
        pairs.push(ContrastivePair { anchor: i, bbox, radiomic, negatives });
    }
    Ok(pairs)
}
