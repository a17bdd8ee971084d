//! Gray-level texture matrices and their summary statistics.

use serde::{Deserialize, Serialize};

use super::quantize::QuantizedRoi;
use crate::error::{Error, Result};

/// 0°, 45°, 90°, 135° at distance 1, as `(dx, dy)`.
pub const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (1, 1), (0, 1), (-1, 1)];

const NEIGHBORS_8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Coarseness reported for a texture without any tone difference.
pub const MAX_COARSENESS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureKind {
    Glcm,
    Glrlm,
    Glszm,
    Ngtdm,
    Gldm,
}

impl TextureKind {
    pub const ALL: [TextureKind; 5] =
        [TextureKind::Glcm, TextureKind::Glrlm, TextureKind::Glszm, TextureKind::Ngtdm, TextureKind::Gldm];

    /// Smallest ROI side length the matrix is defined for.
    fn min_side(self) -> usize {
        match self {
            TextureKind::Glcm | TextureKind::Ngtdm | TextureKind::Gldm => 2,
            TextureKind::Glrlm | TextureKind::Glszm => 1,
        }
    }
}

/// Counts indexed by (gray level, size) where size starts at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMatrix {
    pub gray_levels: usize,
    pub max_size: usize,
    /// `counts[(level - 1) * max_size + (size - 1)]`
    pub counts: Vec<f64>,
    pub pixels: usize,
}

impl CountMatrix {
    fn new(gray_levels: usize, max_size: usize, pixels: usize) -> Self {
        CountMatrix { gray_levels, max_size, counts: vec![0.0; gray_levels * max_size], pixels }
    }

    pub fn get(&self, level: usize, size: usize) -> f64 {
        self.counts[(level - 1) * self.max_size + size - 1]
    }

    fn bump(&mut self, level: usize, size: usize) {
        self.counts[(level - 1) * self.max_size + size - 1] += 1.0;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(move |(k, &c)| (k / self.max_size + 1, k % self.max_size + 1, c))
    }

    /// Σ_i (Σ_j c_ij)^2 when `by_level`, Σ_j (Σ_i c_ij)^2 otherwise.
    fn nonuniformity(&self, by_level: bool) -> f64 {
        let mut sums = vec![0.0; if by_level { self.gray_levels } else { self.max_size }];
        for (i, j, c) in self.cells() {
            sums[if by_level { i - 1 } else { j - 1 }] += c;
        }
        sums.iter().map(|s| s * s).sum()
    }

    /// (Σ c/j², Σ c·j²) normalized by the total count.
    fn size_emphasis(&self) -> (f64, f64) {
        let total = self.total();
        let (small, large) = self.cells().fold((0.0, 0.0), |(s, l), (_, j, c)| {
            let j2 = (j * j) as f64;
            (s + c / j2, l + c * j2)
        });
        (small / total, large / total)
    }
}

/// Neighbouring gray-tone difference vectors, indexed by level - 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Ngtdm {
    pub s: Vec<f64>,
    pub n: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextureMatrix {
    /// Normalized symmetric co-occurrence probabilities, `p[(i-1)*G + (j-1)]`.
    Glcm { gray_levels: usize, p: Vec<f64> },
    Glrlm(CountMatrix),
    Glszm(CountMatrix),
    Ngtdm(Ngtdm),
    Gldm(CountMatrix),
}

impl TextureMatrix {
    pub fn kind(&self) -> TextureKind {
        match self {
            TextureMatrix::Glcm { .. } => TextureKind::Glcm,
            TextureMatrix::Glrlm(_) => TextureKind::Glrlm,
            TextureMatrix::Glszm(_) => TextureKind::Glszm,
            TextureMatrix::Ngtdm(_) => TextureKind::Ngtdm,
            TextureMatrix::Gldm(_) => TextureKind::Gldm,
        }
    }
}

pub fn texture_matrix(roi: &QuantizedRoi, kind: TextureKind) -> Result<TextureMatrix> {
    let side = kind.min_side();
    if roi.width() < side || roi.height() < side {
        return Err(Error::data(format!(
            "{kind:?} needs an ROI of at least {side}x{side}, got {}x{}",
            roi.width(),
            roi.height()
        )));
    }
    Ok(match kind {
        TextureKind::Glcm => {
            TextureMatrix::Glcm { gray_levels: roi.gray_levels(), p: glcm_for_offsets(roi, &DIRECTIONS) }
        }
        TextureKind::Glrlm => TextureMatrix::Glrlm(glrlm(roi)),
        TextureKind::Glszm => TextureMatrix::Glszm(glszm(roi)),
        TextureKind::Ngtdm => TextureMatrix::Ngtdm(ngtdm(roi)),
        TextureKind::Gldm => TextureMatrix::Gldm(gldm(roi)),
    })
}

/// Symmetrized co-occurrence matrix per offset, normalized to sum 1, then
/// averaged over the offsets that have at least one pair.
pub fn glcm_for_offsets(roi: &QuantizedRoi, offsets: &[(isize, isize)]) -> Vec<f64> {
    let g = roi.gray_levels();
    let mut avg = vec![0.0; g * g];
    let mut used = 0usize;
    for &(dx, dy) in offsets {
        let mut counts = vec![0.0; g * g];
        for y in 0..roi.height() as isize {
            for x in 0..roi.width() as isize {
                if let Some(j) = roi.get(x + dx, y + dy) {
                    let i = roi.get(x, y).unwrap();
                    counts[(i - 1) * g + (j - 1)] += 1.0;
                    counts[(j - 1) * g + (i - 1)] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            used += 1;
            avg.iter_mut().zip(&counts).for_each(|(a, c)| *a += c / total);
        }
    }
    if used > 0 {
        avg.iter_mut().for_each(|a| *a /= used as f64);
    }
    avg
}

fn glrlm(roi: &QuantizedRoi) -> CountMatrix {
    let mut m = CountMatrix::new(roi.gray_levels(), roi.width().max(roi.height()), roi.len());
    for &(dx, dy) in &DIRECTIONS {
        for y in 0..roi.height() as isize {
            for x in 0..roi.width() as isize {
                let level = roi.get(x, y).unwrap();
                if roi.get(x - dx, y - dy) == Some(level) {
                    continue;
                }
                let mut len = 1;
                while roi.get(x + dx * len as isize, y + dy * len as isize) == Some(level) {
                    len += 1;
                }
                m.bump(level, len);
            }
        }
    }
    m
}

fn glszm(roi: &QuantizedRoi) -> CountMatrix {
    let mut m = CountMatrix::new(roi.gray_levels(), roi.len(), roi.len());
    let mut seen = vec![false; roi.len()];
    let mut stack = Vec::new();
    for start in 0..roi.len() {
        if seen[start] {
            continue;
        }
        let level = roi.levels()[start];
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = ((p % roi.width()) as isize, (p / roi.width()) as isize);
            for &(dx, dy) in &NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if roi.get(nx, ny) == Some(level) {
                    let q = ny as usize * roi.width() + nx as usize;
                    if !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        m.bump(level, size);
    }
    m
}

/// Neighbourhood means use only the 8-neighbours that fall inside the ROI.
fn ngtdm(roi: &QuantizedRoi) -> Ngtdm {
    let g = roi.gray_levels();
    let (mut s, mut n) = (vec![0.0; g], vec![0.0; g]);
    for y in 0..roi.height() as isize {
        for x in 0..roi.width() as isize {
            let (sum, count) = NEIGHBORS_8
                .iter()
                .filter_map(|&(dx, dy)| roi.get(x + dx, y + dy))
                .fold((0.0, 0usize), |(s, c), l| (s + l as f64, c + 1));
            if count == 0 {
                continue;
            }
            let level = roi.get(x, y).unwrap();
            s[level - 1] += (level as f64 - sum / count as f64).abs();
            n[level - 1] += 1.0;
        }
    }
    Ngtdm { s, n }
}

/// Dependence size = 1 + number of in-ROI 8-neighbours with the same level.
fn gldm(roi: &QuantizedRoi) -> CountMatrix {
    let mut m = CountMatrix::new(roi.gray_levels(), NEIGHBORS_8.len() + 1, roi.len());
    for y in 0..roi.height() as isize {
        for x in 0..roi.width() as isize {
            let level = roi.get(x, y).unwrap();
            let dependent = NEIGHBORS_8.iter().filter(|&&(dx, dy)| roi.get(x + dx, y + dy) == Some(level)).count();
            m.bump(level, dependent + 1);
        }
    }
    m
}

/// Feature values for a matrix, in registry order for its family.
pub fn texture_features(matrix: &TextureMatrix) -> Vec<f64> {
    match matrix {
        TextureMatrix::Glcm { gray_levels, p } => glcm_features(*gray_levels, p).to_vec(),
        TextureMatrix::Glrlm(m) => {
            let runs = m.total();
            let (sre, lre) = m.size_emphasis();
            vec![sre, lre, m.nonuniformity(true) / runs, runs / (m.pixels * DIRECTIONS.len()) as f64]
        }
        TextureMatrix::Glszm(m) => {
            let (sae, lae) = m.size_emphasis();
            vec![sae, lae, m.total() / m.pixels as f64]
        }
        TextureMatrix::Ngtdm(t) => ngtdm_features(t).to_vec(),
        TextureMatrix::Gldm(m) => {
            let (sde, lde) = m.size_emphasis();
            vec![sde, lde, m.nonuniformity(false) / m.total()]
        }
    }
}

/// contrast, correlation, joint energy, homogeneity, joint entropy, dissimilarity.
fn glcm_features(g: usize, p: &[f64]) -> [f64; 6] {
    let cells = || {
        p.iter().enumerate().filter(|(_, &v)| v > 0.0).map(move |(k, &v)| ((k / g + 1) as f64, (k % g + 1) as f64, v))
    };
    let (mut contrast, mut energy, mut homogeneity, mut entropy, mut dissimilarity) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut mu_x, mut mu_y) = (0.0, 0.0);
    for (i, j, v) in cells() {
        let d = (i - j).abs();
        contrast += d * d * v;
        dissimilarity += d * v;
        homogeneity += v / (1.0 + d);
        energy += v * v;
        entropy -= v * v.log2();
        mu_x += i * v;
        mu_y += j * v;
    }
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (i, j, v) in cells() {
        var_x += (i - mu_x).powi(2) * v;
        var_y += (j - mu_y).powi(2) * v;
        cov += (i - mu_x) * (j - mu_y) * v;
    }
    let sd = (var_x * var_y).sqrt();
    let correlation = if sd > 1e-12 { cov / sd } else { 1.0 };
    [contrast, correlation, energy, homogeneity, entropy, dissimilarity]
}

/// coarseness, contrast, busyness.
fn ngtdm_features(t: &Ngtdm) -> [f64; 3] {
    let nvp: f64 = t.n.iter().sum();
    let present: Vec<(f64, f64, f64)> = t
        .n
        .iter()
        .zip(&t.s)
        .enumerate()
        .filter(|(_, (&n, _))| n > 0.0)
        .map(|(k, (&n, &s))| ((k + 1) as f64, n / nvp, s))
        .collect();
    let weighted: f64 = present.iter().map(|&(_, p, s)| p * s).sum();
    let coarseness = if weighted > 0.0 { 1.0 / weighted } else { MAX_COARSENESS };
    let ng = present.len() as f64;
    let contrast = if present.len() > 1 {
        let spread: f64 = present
            .iter()
            .flat_map(|&(i, pi, _)| present.iter().map(move |&(j, pj, _)| pi * pj * (i - j) * (i - j)))
            .sum();
        spread / (ng * (ng - 1.0)) * t.s.iter().sum::<f64>() / nvp
    } else {
        0.0
    };
    let denom: f64 = present
        .iter()
        .flat_map(|&(i, pi, _)| present.iter().map(move |&(j, pj, _)| (i * pi - j * pj).abs()))
        .sum();
    let busyness = if denom > 0.0 { weighted / denom } else { 0.0 };
    [coarseness, contrast, busyness]
}
