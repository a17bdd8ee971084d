//! Grad-CAM heatmaps over the fourth encoder stage and box proposals from them.

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::models::{image_batch, ImageEncoder, Mlp};
use crate::tensor::{bilinear_resize, Graph, Tensor, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Class-activation map at input resolution, scaled so the maximum is 1
/// (or identically zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source_class: usize,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Grad-CAM from a single `[C, h, w]` stage-4 activation and an arbitrary
/// differentiable score. Runs on its own tape, so nothing outside is touched.
pub fn gradcam_with<F>(stage4: &Tensor, score: F, width: usize, height: usize, source_class: usize) -> Result<Heatmap>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let s = stage4.shape();
    if s.len() != 3 {
        return Err(Error::config(format!("stage-4 map must be [C, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g = Graph::new();
    let a = g.leaf(stage4.reshape(&[1, c, h, w])?.with_grad());
    let out = score(&mut g, a)?;
    g.backward(out)?;
    let grads = g.grad(a).expect("stage-4 leaf requires grad");

    let area = (h * w) as f64;
    let acts = stage4.data();
    let mut raw = vec![0.0; h * w];
    for ch in 0..c {
        let plane = ch * h * w..(ch + 1) * h * w;
        let weight = grads[plane.clone()].iter().sum::<f64>() / area;
        if weight == 0.0 {
            continue;
        }
        for (r, &v) in raw.iter_mut().zip(&acts[plane]) {
            *r += weight * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));

    let mut values = bilinear_resize(&raw, h, w, height, width);
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / peak).max(0.0));
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Heatmap { width, height, values, source_class })
}

/// Grad-CAM of the pre-sigmoid logit of `target_class`, given the stage-4
/// activation the encoder produced for a `width x height` image.
pub fn gradcam_from_stage4(
    head: &Mlp,
    stage4: &Tensor,
    target_class: usize,
    width: usize,
    height: usize,
) -> Result<Heatmap> {
    let k = head.output_dim();
    if target_class >= k {
        return Err(Error::config(format!("target class {target_class} out of range for {k} classes")));
    }
    gradcam_with(
        stage4,
        |g, a| {
            let y = ImageEncoder::pool(g, a)?;
            let bound = head.bind(g, false);
            let logits = head.forward(g, &bound, y)?;
            let mut onehot = vec![0.0; k];
            onehot[target_class] = 1.0;
            let sel = g.constant(Tensor::new(&[1, k], onehot)?);
            let picked = g.mul(logits, sel)?;
            Ok(g.sum(picked))
        },
        width,
        height,
        target_class,
    )
}

pub fn gradcam(encoder: &ImageEncoder, head: &Mlp, image: &GrayImage, target_class: usize) -> Result<Heatmap> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, false);
    let x = g.constant(image_batch(std::slice::from_ref(image))?);
    let feats = encoder.forward(&mut g, &bound, x)?;
    let s = g.value(feats.stage4);
    let stage4 = s.reshape(&s.shape()[1..])?;
    gradcam_from_stage4(head, &stage4, target_class, image.width(), image.height())
}

/// A 4-connected region of a binary mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    pub bbox: BoundingBox,
}

/// 4-connected components of `mask` (row-major, `width` wide), in the order
/// their first pixel is met by a raster scan.
pub fn components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    assert_eq!(mask.len(), width * height, "mask size mismatch");
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        out.push(Component { area, bbox: BoundingBox { x0, y0, x1, y1 } });
    }
    out
}

/// Tight box of the largest component of `{v > threshold}`; the earliest
/// component in scan order wins ties. Returns `fallback` when no pixel passes.
pub fn threshold_to_bbox(heatmap: &Heatmap, threshold: f64, fallback: BoundingBox) -> Result<BoundingBox> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("CAM threshold must lie in (0, 1), got {threshold}")));
    }
    let mask: Vec<bool> = heatmap.values.iter().map(|&v| v > threshold).collect();
    let best = components(&mask, heatmap.width, heatmap.height)
        .into_iter()
        .fold(None::<Component>, |best, c| match best {
            Some(b) if b.area >= c.area => Some(b),
            _ => Some(c),
        });
    Ok(best.map(|c| c.bbox).unwrap_or(fallback))
}
