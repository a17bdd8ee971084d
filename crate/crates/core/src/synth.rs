//! Procedural phantom radiographs with textured lesions, and their on-disk format.
//!
//! Each image is a smooth background, three vertical body-part bands of
//! different brightness, and for diseased images a single lesion drawn by a
//! disease-specific generator inside the band of its body part.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{json_hash, sha256_hex, ARTIFACT_VERSION};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::sampling::{DiseaseHierarchy, Label};

pub const MANIFEST_FILE: &str = "manifest.json";
const NUM_GENERATORS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Normal images per diseased image.
    pub imbalance_ratio: f64,
    /// Relative frequency of each disease among diseased images.
    pub disease_frequencies: Vec<f64>,
    /// Fraction of all images that are annotated (drawn from diseased ones).
    pub annotated_fraction: f64,
    /// Train/validation/test fractions for unannotated images.
    pub unannotated_split: [f64; 3],
    /// Train/test fractions for annotated images.
    pub annotated_split: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_images: 2000,
            width: 64,
            height: 64,
            imbalance_ratio: 3.4,
            disease_frequencies: vec![0.20, 0.16, 0.14, 0.12, 0.11, 0.10, 0.09, 0.08],
            annotated_fraction: 0.008,
            unannotated_split: [0.7, 0.1, 0.2],
            annotated_split: [0.2, 0.8],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_images == 0 {
            return fail("n_images must be positive".into());
        }
        if self.width < 16 || self.height < 16 {
            return fail(format!("images must be at least 16x16, got {}x{}", self.width, self.height));
        }
        if !(self.imbalance_ratio >= 0.0 && self.imbalance_ratio.is_finite()) {
            return fail(format!("imbalance_ratio must be >= 0, got {}", self.imbalance_ratio));
        }
        if self.disease_frequencies.len() != NUM_GENERATORS
            || self.disease_frequencies.iter().any(|f| !(*f >= 0.0 && f.is_finite()))
            || self.disease_frequencies.iter().sum::<f64>() <= 0.0
        {
            return fail(format!("need {NUM_GENERATORS} nonnegative disease frequencies with a positive sum"));
        }
        if !(0.0..=1.0).contains(&self.annotated_fraction) {
            return fail(format!("annotated_fraction must be in [0, 1], got {}", self.annotated_fraction));
        }
        let sums_to_one = |f: &[f64]| f.iter().all(|v| *v >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !sums_to_one(&self.unannotated_split) || !sums_to_one(&self.annotated_split) {
            return fail("split fractions must be nonnegative and sum to 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// Number of normal images, then the number of images of each disease.
    pub fn label_counts(&self) -> (usize, Vec<usize>) {
        let n = self.n_images;
        let r = self.imbalance_ratio;
        let normal = ((n as f64 * r / (r + 1.0)).round() as usize).min(n);
        (normal, apportion(n - normal, &self.disease_frequencies))
    }
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the
/// lower index.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    AnnotatedTrain,
    AnnotatedTest,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Val, Split::Test, Split::AnnotatedTrain, Split::AnnotatedTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::AnnotatedTrain => "annotated_train",
            Split::AnnotatedTest => "annotated_test",
        }
    }

    /// Images used for fitting: unannotated and annotated training splits.
    pub fn is_training(self) -> bool {
        matches!(self, Split::Train | Split::AnnotatedTrain)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub image: GrayImage,
    pub label: Label,
    pub body_part: Option<usize>,
    pub gt_box: Option<BoundingBox>,
    pub annotated: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub hierarchy: DiseaseHierarchy,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&LabeledImage> {
        self.images.iter().filter(|i| i.split == split).collect()
    }

    pub fn training(&self) -> Vec<&LabeledImage> {
        self.images.iter().filter(|i| i.split.is_training()).collect()
    }

    pub fn get(&self, id: usize) -> Option<&LabeledImage> {
        self.images.get(id).filter(|i| i.id == id).or_else(|| self.images.iter().find(|i| i.id == id))
    }

    pub fn num_classes(&self) -> usize {
        self.hierarchy.num_diseases()
    }
}

/// A drawn lesion: additive intensity over the whole image and its support.
#[derive(Clone, Debug)]
pub struct Lesion {
    pub field: Vec<f64>,
    pub mask: Vec<bool>,
    pub bbox: BoundingBox,
}

/// Per-image generator stream, independent of every other image.
fn image_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

/// Column range `[lo, hi)` of body-part band `part` out of `parts`.
fn band(part: usize, parts: usize, width: usize) -> (usize, usize) {
    (part * width / parts, (part + 1) * width / parts)
}

const BAND_OFFSETS: [f64; 3] = [0.0, 0.12, 0.05];

fn background<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<f64> {
    let (fx, fy) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let (px, py) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let sx = (TAU * fx * x as f64 / w as f64 + px).sin();
            let sy = (TAU * fy * y as f64 / h as f64 + py).sin();
            let part = (x * BAND_OFFSETS.len() / w).min(BAND_OFFSETS.len() - 1);
            out.push(0.35 + 0.06 * sx + 0.06 * sy + BAND_OFFSETS[part]);
        }
    }
    out
}

/// Draws the lesion of `disease` with its center inside the band of `part`.
pub fn draw_lesion<R: Rng>(rng: &mut R, disease: usize, part: usize, parts: usize, w: usize, h: usize) -> Lesion {
    // half extents of the support in x and y
    let (rx, ry, kind_size) = match disease {
        0 => {
            let r = rng.gen_range(5.0..6.5);
            (r, r, r)
        }
        1 => {
            let r = rng.gen_range(11.0..13.0);
            (r, r, r)
        }
        2 => {
            let r = rng.gen_range(7.5..9.5);
            (r + 1.5, r + 1.5, r)
        }
        3 | 5 => {
            let r = rng.gen_range(8.5..11.0);
            (r, r, r)
        }
        4 => {
            let s = rng.gen_range(7.5..9.5);
            (s, s, s)
        }
        6 => (rng.gen_range(3.0..4.0), rng.gen_range(12.0..15.0), 0.0),
        7 => (9.0, 9.0, 9.0),
        _ => panic!("no lesion generator for disease {disease}"),
    };
    let (lo, hi) = band(part, parts, w);
    let pick = |rng: &mut R, lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..hi) } else { 0.5 * (lo + hi) };
    let cx = pick(rng, (lo as f64).max(rx + 1.0), (hi as f64 - 1.0).min(w as f64 - rx - 2.0));
    let cy = pick(rng, ry + 2.0, h as f64 - ry - 3.0);

    let phase = rng.gen_range(0.0..TAU);
    let blocks: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.4)).collect();
    let mut field = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let dome = |radius: f64| (radius > r).then(|| 1.0 - (r / radius).powi(2));
            let value = match disease {
                0 => dome(kind_size).map(|d| 0.4 * d),
                1 => dome(kind_size).map(|d| 0.16 * d.sqrt()),
                2 => {
                    let off = (r - kind_size).abs();
                    (off < 1.5).then(|| 0.35 * (1.0 - off / 1.5) + 0.02)
                }
                3 => dome(kind_size).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.1..0.4) } else { 0.0 }),
                4 => (dx.abs() < kind_size && dy.abs() < kind_size)
                    .then(|| 0.3 * (0.5 + 0.5 * (TAU * x as f64 / 3.0 + phase).sin())),
                5 => dome(kind_size).map(|d| -0.3 * d),
                6 => {
                    let q = (dx / rx).powi(2) + (dy / ry).powi(2);
                    (q < 1.0).then_some(0.3 * (1.0 - q))
                }
                7 => (dx.abs() < kind_size && dy.abs() < kind_size).then(|| {
                    let bx = ((dx + kind_size) / 4.5).floor().clamp(0.0, 3.0) as usize;
                    let by = ((dy + kind_size) / 4.5).floor().clamp(0.0, 3.0) as usize;
                    blocks[by * 4 + bx]
                }),
                _ => unreachable!(),
            };
            if let Some(v) = value {
                field[y * w + x] = v;
                mask[y * w + x] = true;
            }
        }
    }
    let bbox = crate::cam::components(&mask, w, h)
        .into_iter()
        .map(|c| c.bbox)
        .reduce(|a, b| BoundingBox {
            x0: a.x0.min(b.x0),
            y0: a.y0.min(b.y0),
            x1: a.x1.max(b.x1),
            y1: a.y1.max(b.y1),
        })
        .expect("lesion support is never empty");
    Lesion { field, mask, bbox }
}

/// Renders one image. Returns the pixels (already rounded to 16-bit
/// precision) and, for diseased labels, the lesion.
pub fn render(spec: &DatasetSpec, h: &DiseaseHierarchy, id: usize, label: Label) -> (GrayImage, Option<Lesion>) {
    let mut rng = image_rng(spec.seed, id);
    let (w, ht) = (spec.width, spec.height);
    let mut px = background(&mut rng, w, ht);
    let lesion = label.disease().map(|d| draw_lesion(&mut rng, d, h.part_of(d), h.body_parts().len(), w, ht));
    if let Some(l) = &lesion {
        px.iter_mut().zip(&l.field).for_each(|(p, f)| *p += f);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        px.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
    }
    let mut img = GrayImage::new(w, ht, px).expect("dimensions match");
    img.quantize_u16();
    (img, lesion)
}

/// Builds the whole dataset in memory.
pub fn synthesize(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let hierarchy = DiseaseHierarchy::synthetic();
    let (n_normal, per_disease) = spec.label_counts();
    let mut labels = vec![Label::Normal; n_normal];
    for (d, &c) in per_disease.iter().enumerate() {
        labels.extend(std::iter::repeat_n(Label::Disease(d), c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);

    let n_diseased = spec.n_images - n_normal;
    let n_annotated = ((spec.n_images as f64 * spec.annotated_fraction).round() as usize).min(n_diseased);
    let mut diseased: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_normal()).collect();
    diseased.shuffle(&mut rng);
    let mut annotated = vec![false; labels.len()];
    diseased.iter().take(n_annotated).for_each(|&i| annotated[i] = true);

    let (unann, ann): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| !annotated[i]);
    let u = unann.len() as f64;
    let n_train = (u * spec.unannotated_split[0]).round() as usize;
    let n_val = ((u * spec.unannotated_split[1]).round() as usize).min(unann.len() - n_train);
    let n_ann_train = (ann.len() as f64 * spec.annotated_split[0]).round() as usize;
    let order: Vec<(usize, Split)> = unann
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (i, s)
        })
        .chain(ann.iter().enumerate().map(|(k, &i)| {
            (i, if k < n_ann_train { Split::AnnotatedTrain } else { Split::AnnotatedTest })
        }))
        .collect();
    let mut order = order;
    // ids are contiguous within each split
    order.sort_by_key(|&(i, s)| (s, i));

    let images = order
        .into_iter()
        .enumerate()
        .map(|(id, (slot, split))| {
            let label = labels[slot];
            let (image, lesion) = render(spec, &hierarchy, id, label);
            LabeledImage {
                id,
                image,
                label,
                body_part: label.disease().map(|d| hierarchy.part_of(d)),
                gt_box: lesion.map(|l| l.bbox),
                annotated: annotated[slot],
                split,
            }
        })
        .collect();
    Ok(Dataset { spec: spec.clone(), hierarchy, images })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub label: Label,
    pub body_part: Option<usize>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub annotated: bool,
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub artifact_version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub hierarchy: DiseaseHierarchy,
    /// Half-open id range of each split.
    pub splits: BTreeMap<String, [usize; 2]>,
    /// Diseased entries carry their lesion box; only annotated ones may use it
    /// for training.
    pub entries: Vec<ManifestEntry>,
}

fn split_ranges(images: &[LabeledImage]) -> BTreeMap<String, [usize; 2]> {
    Split::ALL
        .iter()
        .map(|&s| {
            let ids: Vec<usize> = images.iter().filter(|i| i.split == s).map(|i| i.id).collect();
            let range = match (ids.first(), ids.last()) {
                (Some(&a), Some(&b)) => [a, b + 1],
                _ => [0, 0],
            };
            (s.name().to_string(), range)
        })
        .collect()
}

/// Writes images and the manifest under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    let spec_hash = ds.spec.hash();
    let comment = format!("kacl phantom spec={spec_hash} seed={} v={ARTIFACT_VERSION}", ds.spec.seed);
    let mut entries = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        let file = format!("images/{:05}.pgm", img.id);
        let bytes = img.image.to_pgm16(&comment);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            id: img.id,
            file,
            label: img.label,
            body_part: img.body_part,
            bbox: img.gt_box,
            annotated: img.annotated,
            split: img.split,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION,
        spec_hash,
        seed: ds.spec.seed,
        spec: ds.spec.clone(),
        hierarchy: ds.hierarchy.clone(),
        splits: split_ranges(&ds.images),
        entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Synthesizes the dataset described by `spec` and writes it to `dir`.
pub fn generate(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    write_dataset(&synthesize(spec)?, dir)
}

/// Resolves a dataset directory or a manifest path to the manifest path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a dataset, verifying every checksum before returning anything.
pub fn load(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(Error::MissingFile(mpath));
    }
    let root = mpath.parent().unwrap_or(Path::new("."));
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    if manifest.artifact_version != ARTIFACT_VERSION {
        return Err(Error::data(format!("unsupported dataset version {}", manifest.artifact_version)));
    }
    let (w, h) = (manifest.spec.width, manifest.spec.height);
    let mut images = Vec::with_capacity(manifest.entries.len());
    for (k, e) in manifest.entries.iter().enumerate() {
        if e.id != k {
            return Err(Error::data(format!("manifest entry {k} has id {}", e.id)));
        }
        let file = root.join(&e.file);
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        let bytes = fs::read(&file)?;
        let actual = sha256_hex(&bytes);
        if actual != e.sha256 {
            return Err(Error::Checksum { file, expected: e.sha256.clone(), actual });
        }
        let image = GrayImage::from_pgm16(&bytes)?;
        if (image.width(), image.height()) != (w, h) {
            return Err(Error::data(format!("{} is {}x{}, expected {w}x{h}", e.file, image.width(), image.height())));
        }
        check_entry(e, &manifest.hierarchy, w, h)?;
        images.push(LabeledImage {
            id: e.id,
            image,
            label: e.label,
            body_part: e.body_part,
            gt_box: e.bbox,
            annotated: e.annotated,
            split: e.split,
        });
    }
    if split_ranges(&images) != manifest.splits {
        return Err(Error::data("manifest split ranges disagree with its entries"));
    }
    Ok(Dataset { spec: manifest.spec, hierarchy: manifest.hierarchy, images })
}

fn check_entry(e: &ManifestEntry, h: &DiseaseHierarchy, w: usize, ht: usize) -> Result<()> {
    let bad = |m: &str| Err(Error::data(format!("entry {}: {m}", e.id)));
    match e.label {
        Label::Normal if e.bbox.is_some() || e.annotated => return bad("normal image with a box or annotation"),
        Label::Disease(d) if d >= h.num_diseases() => return bad("disease index out of range"),
        Label::Disease(d) if e.body_part != Some(h.part_of(d)) => return bad("body part disagrees with hierarchy"),
        _ => {}
    }
    if e.annotated != matches!(e.split, Split::AnnotatedTrain | Split::AnnotatedTest) {
        return bad("annotation flag disagrees with split");
    }
    if e.annotated && e.bbox.is_none() {
        return bad("annotated image without a box");
    }
    if let Some(b) = e.bbox {
        b.validate(w, ht)?;
    }
    Ok(())
}
