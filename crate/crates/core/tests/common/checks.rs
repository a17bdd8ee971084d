//! Criterion checks shared by the focused integration tests and the
//! acceptance runner.

use std::fs;
use std::path::Path;
use std::time::Instant;

use kacl_core::bbox::{iou, BoundingBox};
use kacl_core::cam::gradcam_with;
use kacl_core::eval::{evaluate, EvalReport, DEFAULT_LOC_THRESHOLDS};
use kacl_core::image::GrayImage;
use kacl_core::losses::{focal_loss, kacl_loss, total_loss, LossConfig};
use kacl_core::models::{ImageEncoder, Mlp};
use kacl_core::radiomics::{raw_features, NormalizationStats, FEATURE_NAMES};
use kacl_core::sampling::{build_pairs, negative_candidates, DiseaseHierarchy, Label};
use kacl_core::synth::{synthesize, Dataset, DatasetSpec};
use kacl_core::tensor::{grad_check, Graph, Tensor, Var};
use kacl_core::train::{fit, FitOptions, TrainConfig};
use kacl_core::Result;
use rand::seq::SliceRandom;
use rand::Rng;

use super::radiomics_reference::{self as reference, Roi};
use super::{rng, Outcome};

// ---------------------------------------------------------------- autodiff

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for probing relu off its kink.
fn off_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(0.1..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values 0.05 apart, so no pooling window has a near tie.
fn spread(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    data.shuffle(r);
    Tensor::new(shape, data).unwrap()
}

/// Contracts any tensor to a scalar with fixed, uneven coefficients so every
/// output cell gets a distinct upstream gradient.
fn project(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let coef = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let c = g.constant(Tensor::new(&shape, coef)?);
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

struct GradTally {
    worst: Vec<(&'static str, f64)>,
    failures: Vec<String>,
}

impl GradTally {
    fn record<F>(&mut self, name: &'static str, seed: u64, x: &Tensor, f: F)
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        match grad_check(f, x, FD_STEP) {
            Ok(err) => {
                match self.worst.iter_mut().find(|(n, _)| *n == name) {
                    Some(w) => w.1 = w.1.max(err),
                    None => self.worst.push((name, err)),
                }
                if err >= GRAD_TOL {
                    self.failures.push(format!("{name} seed {seed}: {err:.2e}"));
                }
            }
            Err(e) => self.failures.push(format!("{name} seed {seed}: {e}")),
        }
    }
}

fn op_checks(t: &mut GradTally, seed: u64) {
    let r = &mut rng(seed);
    let input = uniform(r, &[2, 2, 5, 5], -1.0, 1.0);
    let kernel = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = uniform(r, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 0)] {
        let (k, b) = (kernel.clone(), bias.clone());
        t.record("conv2d/input", seed, &input, move |g, x| {
            let (k, b) = (g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, k, b, stride, pad)?;
            project(g, y)
        });
        let (i, b) = (input.clone(), bias.clone());
        t.record("conv2d/kernel", seed, &kernel, move |g, k| {
            let (i, b) = (g.constant(i.clone()), g.constant(b.clone()));
            let y = g.conv2d(i, k, b, stride, pad)?;
            project(g, y)
        });
        let (i, k) = (input.clone(), kernel.clone());
        t.record("conv2d/bias", seed, &bias, move |g, b| {
            let (i, k) = (g.constant(i.clone()), g.constant(k.clone()));
            let y = g.conv2d(i, k, b, stride, pad)?;
            project(g, y)
        });
    }

    t.record("relu", seed, &off_zero(r, &[3, 4]), |g, x| {
        let y = g.relu(x);
        project(g, y)
    });
    t.record("sigmoid", seed, &uniform(r, &[6], -3.0, 3.0), |g, x| {
        let y = g.sigmoid(x);
        project(g, y)
    });
    t.record("exp", seed, &uniform(r, &[6], -2.0, 2.0), |g, x| {
        let y = g.exp(x);
        project(g, y)
    });
    t.record("ln", seed, &uniform(r, &[6], 0.3, 3.0), |g, x| {
        let y = g.ln(x);
        project(g, y)
    });
    let c = r.gen_range(-3.0..3.0);
    t.record("scale", seed, &uniform(r, &[5], -1.0, 1.0), move |g, x| {
        let y = g.scale(x, c);
        project(g, y)
    });

    let (x, w, b) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0));
    let (w1, b1) = (w.clone(), b.clone());
    t.record("linear/x", seed, &x, move |g, x| {
        let (w, b) = (g.constant(w1.clone()), g.constant(b1.clone()));
        let y = g.linear(x, w, b)?;
        project(g, y)
    });
    let (x1, b1) = (x.clone(), b.clone());
    t.record("linear/w", seed, &w, move |g, w| {
        let (x, b) = (g.constant(x1.clone()), g.constant(b1.clone()));
        let y = g.linear(x, w, b)?;
        project(g, y)
    });
    let (x1, w1) = (x.clone(), w.clone());
    t.record("linear/b", seed, &b, move |g, b| {
        let (x, w) = (g.constant(x1.clone()), g.constant(w1.clone()));
        let y = g.linear(x, w, b)?;
        project(g, y)
    });
    let (w1, b1) = (w.clone(), b.clone());
    t.record("linear/vector", seed, &uniform(r, &[4], -1.0, 1.0), move |g, x| {
        let (w, b) = (g.constant(w1.clone()), g.constant(b1.clone()));
        let y = g.linear(x, w, b)?;
        project(g, y)
    });

    t.record("max_pool2d", seed, &spread(r, &[2, 6, 6]), |g, x| {
        let y = g.max_pool2d(x, 2, 2)?;
        project(g, y)
    });
    t.record("max_pool2d/overlap", seed, &spread(r, &[1, 5, 5]), |g, x| {
        let y = g.max_pool2d(x, 3, 1)?;
        project(g, y)
    });
    t.record("global_avg_pool", seed, &uniform(r, &[2, 3, 4, 4], -1.0, 1.0), |g, x| {
        let y = g.global_avg_pool(x)?;
        project(g, y)
    });
    t.record("mean", seed, &uniform(r, &[7], -1.0, 1.0), |g, x| {
        let m = g.mean(x);
        let e = g.exp(m);
        Ok(g.sum(e))
    });
    t.record("sum", seed, &uniform(r, &[2, 3], -1.0, 1.0), |g, x| {
        let s = g.sum(x);
        let e = g.sigmoid(s);
        Ok(g.sum(e))
    });

    let other = uniform(r, &[4], -1.0, 1.0);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        for first in [true, false] {
            let o = other.clone();
            t.record(name, seed, &uniform(r, &[4], -1.0, 1.0), move |g, x| {
                let o = g.constant(o.clone());
                let (a, b) = if first { (x, o) } else { (o, x) };
                let y = match which {
                    0 => g.add(a, b)?,
                    1 => g.sub(a, b)?,
                    _ => g.mul(a, b)?,
                };
                project(g, y)
            });
        }
    }
    t.record("row", seed, &uniform(r, &[4, 3], -1.0, 1.0), |g, x| {
        let y = g.row(x, 2)?;
        project(g, y)
    });
    let o = uniform(r, &[3], -1.0, 1.0);
    t.record("stack", seed, &uniform(r, &[3], -1.0, 1.0), move |g, x| {
        let o = g.constant(o.clone());
        let sq = g.mul(x, x)?;
        let y = g.stack(&[x, o, sq])?;
        project(g, y)
    });
    t.record("log_sum_exp", seed, &uniform(r, &[6], -3.0, 3.0), |g, x| g.log_sum_exp(x));
    let v = uniform(r, &[5], -1.0, 1.0);
    let v1 = v.clone();
    t.record("cosine/u", seed, &uniform(r, &[5], -1.0, 1.0), move |g, u| {
        let v = g.constant(v1.clone());
        g.cosine(u, v, 1e-12)
    });
    let u = uniform(r, &[5], -1.0, 1.0);
    t.record("cosine/v", seed, &v, move |g, v| {
        let u = g.constant(u.clone());
        g.cosine(u, v, 1e-12)
    });
    let targets: Vec<f64> = (0..12).map(|_| f64::from(u8::from(r.gen_bool(0.3)))).collect();
    let (alpha, gamma) = (r.gen_range(0.05..0.95), r.gen_range(0.0..3.0));
    t.record("focal", seed, &uniform(r, &[3, 4], 0.05, 0.95), move |g, p| g.focal(p, &targets, alpha, gamma, 1e-12));
}

/// Central differences are meaningless within a step of a relu or max-pool
/// kink, so composite probe points closer than this are redrawn.
const KINK_MARGIN: f64 = 1e-3;

/// Smallest distance of the encoder's forward pass from a kink: the least
/// |pre-activation| of any relu, and the least gap between the winner and
/// runner-up of any positive pooling window.
fn kink_distance(encoder: &ImageEncoder, images: &Tensor) -> f64 {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, false);
    let mut x = g.constant(images.clone());
    let mut nearest = f64::INFINITY;
    for layer in &bound {
        let z = g.conv2d(x, layer.weight, layer.bias, 1, 1).unwrap();
        nearest = g.value(z).data().iter().fold(nearest, |m, v| m.min(v.abs()));
        let a = g.relu(z);
        let s = g.value(a).shape().to_vec();
        let (h, w) = (s[2], s[3]);
        for plane in g.value(a).data().chunks(h * w) {
            for wy in 0..h / 2 {
                for wx in 0..w / 2 {
                    let mut v = [0.0; 4];
                    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        v[k] = plane[(2 * wy + dy) * w + 2 * wx + dx];
                    }
                    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if v[0] > 0.0 {
                        nearest = nearest.min(v[0] - v[1]);
                    }
                }
            }
        }
        x = g.max_pool2d(a, 2, 2).unwrap();
    }
    nearest
}

/// The whole image encoder, a linear head, a sigmoid and the focal loss,
/// differentiated with respect to the input image and every parameter.
fn composite_checks(t: &mut GradTally, seed: u64) {
    let r = &mut rng(seed ^ 0xC0FFEE);
    let (encoder, images) = loop {
        let encoder = ImageEncoder::new(r, [3, 3, 4, 4]);
        let images = uniform(r, &[2, 1, 16, 16], 0.0, 1.0);
        if kink_distance(&encoder, &images) > KINK_MARGIN {
            break (encoder, images);
        }
    };
    let head = Mlp::new(r, &[4, 3]);
    let targets: Vec<f64> = (0..6).map(|_| f64::from(u8::from(r.gen_bool(0.4)))).collect();
    let cfg = LossConfig::default();

    // `probe` names the tensor bound to the checked Var: None is the image
    // batch, Some((stage, false)) a conv weight, Some((stage, true)) a bias.
    let forward = |probe: Option<(usize, bool)>| {
        let (encoder, head, images, targets, cfg) = (&encoder, &head, &images, &targets, &cfg);
        move |g: &mut Graph, v: Var| -> Result<Var> {
            let mut bound = encoder.bind(g, false);
            let x = match probe {
                None => v,
                Some((k, false)) => {
                    bound[k].weight = v;
                    g.constant(images.clone())
                }
                Some((k, true)) => {
                    bound[k].bias = v;
                    g.constant(images.clone())
                }
            };
            let feats = encoder.forward(g, &bound, x)?;
            let hb = head.bind(g, false);
            let logits = head.forward(g, &hb, feats.representation)?;
            let p = g.sigmoid(logits);
            g.focal(p, targets, cfg.alpha, cfg.gamma, cfg.epsilon)
        }
    };
    t.record("encoder+focal/image", seed, &images, forward(None));
    for (k, layer) in encoder.stages.iter().enumerate() {
        t.record("encoder+focal/weight", seed, &layer.weight, forward(Some((k, false))));
        t.record("encoder+focal/bias", seed, &layer.bias, forward(Some((k, true))));
    }
}

pub fn autodiff(seeds: u64) -> Outcome {
    let start = Instant::now();
    let mut t = GradTally { worst: Vec::new(), failures: Vec::new() };
    for seed in 0..seeds {
        op_checks(&mut t, seed);
        composite_checks(&mut t, seed);
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = t.worst.iter().cloned().fold(("-", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = t.failures.is_empty() && secs < 60.0;
    let mut detail = format!(
        "{} op/input checks x {seeds} seeds, worst {:.2e} ({}) < {GRAD_TOL:e}, {secs:.1}s (< 60s)",
        t.worst.len(),
        worst.1,
        worst.0
    );
    if !t.failures.is_empty() {
        detail.push_str(&format!("; {} failures, first: {}", t.failures.len(), t.failures[0]));
    }
    Outcome::new(pass, detail)
}

// --------------------------------------------------------------- radiomics

pub const TEXTURE_FAMILIES: [&str; 5] = ["smooth+noise", "stripes", "blocky", "uniform-noise", "few-valued"];

/// A 32x32 image in the style of one texture family.
pub fn family_image(family: usize, r: &mut impl Rng) -> GrayImage {
    let (w, h) = (32, 32);
    let mut px = vec![0.0; w * h];
    match family {
        0 => {
            let (gx, gy) = (r.gen_range(-0.02..0.02), r.gen_range(-0.02..0.02));
            for y in 0..h {
                for x in 0..w {
                    px[y * w + x] = 0.5 + gx * x as f64 + gy * y as f64 + r.gen_range(-0.05..0.05);
                }
            }
        }
        1 => {
            let period = r.gen_range(2.0..8.0);
            let vertical = r.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let t = if vertical { x } else { y } as f64;
                    px[y * w + x] = 0.5 + 0.4 * (std::f64::consts::TAU * t / period).sin() + r.gen_range(-0.01..0.01);
                }
            }
        }
        2 => {
            let block = r.gen_range(2..7);
            let cols = w.div_ceil(block);
            let vals: Vec<f64> = (0..cols * h.div_ceil(block)).map(|_| r.gen_range(0.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    px[y * w + x] = vals[(y / block) * cols + x / block];
                }
            }
        }
        3 => px.iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0)),
        _ => {
            // lands pixels exactly on bin edges and yields flat ROIs
            let levels = r.gen_range(1..4);
            px.iter_mut().for_each(|v| *v = r.gen_range(0..levels) as f64 / 2.0);
        }
    }
    GrayImage::new(w, h, px).unwrap()
}

pub fn radiomics_oracle(per_family: usize) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "", "");
    let mut failures = Vec::new();
    for (f, family) in TEXTURE_FAMILIES.iter().enumerate() {
        let r = &mut rng(1000 + f as u64);
        for case in 0..per_family {
            let img = family_image(f, r);
            let (bw, bh) = (r.gen_range(2..=20), r.gen_range(2..=20));
            let (x0, y0) = (r.gen_range(0..=32 - bw), r.gen_range(0..=32 - bh));
            let g = r.gen_range(2..=12);
            let bbox = BoundingBox { x0, y0, x1: x0 + bw, y1: y0 + bh };
            let got = match raw_features(&img, &bbox, g) {
                Ok(v) => v,
                Err(e) => {
                    failures.push(format!("{family} case {case}: {e}"));
                    continue;
                }
            };
            let roi = Roi::crop(img.pixels(), 32, x0, y0, x0 + bw, y0 + bh, g);
            let want = reference::features(&roi, 32, 32);
            for (i, (a, b)) in got.iter().zip(&want).enumerate() {
                let dev = (a - b).abs() / b.abs().max(1.0);
                if !(dev <= 1e-9) {
                    failures.push(format!("{family} case {case} {}: {a} vs {b}", FEATURE_NAMES[i]));
                }
                if dev > worst.0 {
                    worst = (dev, FEATURE_NAMES[i], family);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!(
        "{} ROIs x 33 features, worst relative deviation {:.1e} ({} on {}) <= 1e-9, {secs:.1}s (< 120s)",
        per_family * TEXTURE_FAMILIES.len(),
        worst.0,
        worst.1,
        worst.2
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; {} mismatches, first: {}", failures.len(), failures[0]));
    }
    Outcome::new(failures.is_empty() && secs < 120.0, detail)
}

// --------------------------------------------------------------------- IoU

pub fn enumerated_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.y1.max(b.y1) {
        for x in 0..a.x1.max(b.x1) {
            let ia = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
            let ib = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

pub fn random_box(r: &mut impl Rng, side: usize) -> BoundingBox {
    let (x0, y0) = (r.gen_range(0..side), r.gen_range(0..side));
    BoundingBox { x0, y0, x1: r.gen_range(x0 + 1..=side), y1: r.gen_range(y0 + 1..=side) }
}

pub fn iou_oracle(pairs: usize) -> Outcome {
    let r = &mut rng(7);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let (a, b) = (random_box(r, 24), random_box(r, 24));
        worst = worst.max((iou(&a, &b) - enumerated_iou(&a, &b)).abs());
    }
    let a = BoundingBox { x0: 0, y0: 0, x1: 10, y1: 10 };
    let b = BoundingBox { x0: 5, y0: 5, x1: 15, y1: 15 };
    let worked = iou(&a, &b);
    let worked_err = (worked - 25.0 / 175.0).abs();
    Outcome::new(
        worst <= 1e-12 && worked_err <= 1e-12,
        format!("{pairs} random pairs, worst |diff| {worst:.1e}; (0,0,10,10)/(5,5,15,15) = {worked:.12} (25/175, err {worked_err:.1e})"),
    )
}

// ------------------------------------------------------------------ losses

pub fn loss_closed_forms(samples: usize) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // one pair, cosine 1 with the positive and 0 with the single negative
    let cfg = LossConfig { tau: 1.0, ..LossConfig::default() };
    let (zi, zr, neg) = ([0.6, 0.8, 0.0], [3.0, 4.0, 0.0], [0.0, 0.0, 2.0]);
    let single = kacl_loss(&zi, &zr, &[&neg], &cfg).unwrap_or(f64::NAN);
    let want = (1.0 + (-1.0f64).exp()).ln();
    let err = (single - want).abs();
    pass &= err <= 1e-9;
    notes.push(format!("single pair {single:.12} vs ln(1+e^-1) err {err:.1e}"));

    let r = &mut rng(11);
    let fl = LossConfig { alpha: 0.5, gamma: 0.0, ..LossConfig::default() };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let p: f64 = r.gen_range(1e-6..1.0 - 1e-6);
        let y = f64::from(u8::from(r.gen_bool(0.5)));
        let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        worst = worst.max((focal_loss(p, y, &fl) - 0.5 * bce).abs());
    }
    pass &= worst <= 1e-12;
    notes.push(format!("focal(0.5,0) vs BCE/2 worst {worst:.1e} over {samples}"));

    let mut exact = true;
    for _ in 0..samples {
        let (cl, f) = (r.gen_range(0.0..10.0), r.gen_range(0.0..10.0));
        let at = |lambda| total_loss(cl, f, &LossConfig { lambda, ..LossConfig::default() }).unwrap();
        exact &= at(0.0) == f && at(1.0) == cl;
    }
    pass &= exact;
    notes.push(format!("total_loss endpoints exact: {exact}"));
    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------- Grad-CAM

/// Bilinear resampling with half-pixel centers, written out per pixel.
pub fn bilinear_at(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, ox: usize, oy: usize) -> f64 {
    let sample = |o: usize, out: usize, inp: usize| {
        let p = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0).min((inp - 1) as f64);
        let i = p.floor() as usize;
        (i, (i + 1).min(inp - 1), p - i as f64)
    };
    let (x0, x1, fx) = sample(ox, out_w, w);
    let (y0, y1, fy) = sample(oy, out_h, h);
    let v = |x: usize, y: usize| src[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(x0, y0) + fx * v(x1, y0)) + fy * ((1.0 - fx) * v(x0, y1) + fx * v(x1, y1))
}

/// A score equal to the spatial mean of channel 0 makes the Grad-CAM map the
/// normalized channel-0 activation.
pub fn gradcam_analytic(cases: usize) -> Outcome {
    let r = &mut rng(21);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..cases {
        let (c, h, w) = (r.gen_range(1..5), r.gen_range(2..9), r.gen_range(2..9));
        let data: Vec<f64> = (0..c * h * w).map(|_| r.gen_range(-0.5..2.0f64).max(0.0)).collect();
        let stage4 = Tensor::new(&[c, h, w], data.clone()).unwrap();
        let upscale = r.gen_range(1..5);
        let (out_w, out_h) = (w * upscale, h * upscale);
        let heat = gradcam_with(
            &stage4,
            |g, x| {
                let first = g.row(x, 0)?;
                let plane = g.row(first, 0)?;
                Ok(g.mean(plane))
            },
            out_w,
            out_h,
            0,
        );
        let heat = match heat {
            Ok(h) => h,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let plane = &data[..h * w];
        let up: Vec<f64> =
            (0..out_h).flat_map(|y| (0..out_w).map(move |x| (x, y))).map(|(x, y)| bilinear_at(plane, h, w, out_h, out_w, x, y)).collect();
        let peak = up.iter().copied().fold(0.0, f64::max);
        for (i, u) in up.iter().enumerate() {
            let want = if peak > 0.0 { u / peak } else { 0.0 };
            worst = worst.max((heat.values[i] - want).abs());
        }
    }
    Outcome::new(
        failures.is_empty() && worst < 1e-6,
        format!("{cases} random stage-4 maps, worst |heatmap - normalized channel 0| {worst:.1e} (< 1e-6){}", failures.first().map_or(String::new(), |f| format!("; {f}"))),
    )
}

// ---------------------------------------------------------------- sampling

/// The negative rule restated from names: a normal image, or a different
/// disease of the anchor's body part.
fn oracle_negative(h: &DiseaseHierarchy, anchor: usize, other: Label) -> bool {
    match other {
        Label::Normal => true,
        Label::Disease(o) => {
            let (a, b) = (&h.diseases()[anchor], &h.diseases()[o]);
            a.name != b.name && a.part == b.part
        }
    }
}

pub fn pneumonia_example() -> std::result::Result<(), String> {
    let h = DiseaseHierarchy::chest_xray();
    let d = |n: &str| Label::Disease(h.disease_index(n).unwrap());
    let labels = [d("Pneumonia"), d("Atelectasis"), d("Edema"), Label::Normal, d("Bone Fractures")];
    let got = negative_candidates(0, &labels, &h);
    if got == [1, 2, 3] {
        Ok(())
    } else {
        Err(format!("Pneumonia anchor negatives {got:?}, expected [1, 2, 3]"))
    }
}

pub fn sampling_rule(batches: usize) -> Outcome {
    let hierarchies = [DiseaseHierarchy::chest_xray(), DiseaseHierarchy::synthetic()];
    let stats = NormalizationStats::identity(8);
    let r = &mut rng(31);
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for b in 0..batches {
        let h = &hierarchies[b % 2];
        let n = r.gen_range(2..40);
        let k = h.num_diseases();
        let labels: Vec<Label> =
            (0..n).map(|_| if r.gen_bool(0.4) { Label::Normal } else { Label::Disease(r.gen_range(0..k)) }).collect();
        let cap = r.gen_range(0..6);
        let images: Vec<GrayImage> =
            (0..n).map(|_| GrayImage::new(16, 16, (0..256).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()).collect();
        let refs: Vec<&GrayImage> = images.iter().collect();
        let boxes: Vec<Option<BoundingBox>> =
            labels.iter().map(|l| (!l.is_normal()).then_some(BoundingBox { x0: 2, y0: 3, x1: 11, y1: 12 })).collect();
        let pairs = match build_pairs(&refs, &labels, &boxes, &stats, h, cap) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("batch {b}: {e}"));
                continue;
            }
        };
        let anchors: Vec<usize> = (0..n).filter(|&i| !labels[i].is_normal()).collect();
        if pairs.iter().map(|p| p.anchor).collect::<Vec<_>>() != anchors {
            failures.push(format!("batch {b}: anchors differ from the disease-positive members"));
        }
        for p in &pairs {
            let Label::Disease(a) = labels[p.anchor] else { unreachable!() };
            let eligible: Vec<usize> = (0..n).filter(|&j| j != p.anchor && oracle_negative(h, a, labels[j])).collect();
            for &j in &p.negatives {
                checked += 1;
                if !oracle_negative(h, a, labels[j]) || j == p.anchor {
                    failures.push(format!("batch {b}: {j} is not a valid negative for {}", p.anchor));
                }
            }
            // every eligible disease negative kept, normals kept up to the cap
            let mut normals = 0;
            let want: Vec<usize> = eligible
                .into_iter()
                .filter(|&j| {
                    normals += usize::from(labels[j].is_normal());
                    !labels[j].is_normal() || normals <= cap
                })
                .collect();
            if p.negatives != want {
                failures.push(format!("batch {b} anchor {}: negatives {:?}, expected {want:?}", p.anchor, p.negatives));
            }
        }
    }
    let example = pneumonia_example();
    let pass = failures.is_empty() && example.is_ok();
    let mut detail = format!(
        "{batches} random batches, {checked} negatives all satisfy the rule; Pneumonia example {}",
        if example.is_ok() { "-> [Atelectasis, Edema, Normal]" } else { "MISMATCH" }
    );
    if let Some(f) = failures.first().cloned().or(example.err()) {
        detail.push_str(&format!("; {} problems, first: {f}", failures.len()));
    }
    Outcome::new(pass, detail)
}

// ------------------------------------------------------------ localization

/// Accuracy never rises with the IoU threshold, per class and on the mean.
/// Rows are re-checked here rather than trusting `is_monotone` alone.
pub fn monotone(reports: &[&EvalReport]) -> Outcome {
    let mut rows = 0;
    let mut bad = Vec::new();
    for r in reports {
        let t = &r.localization;
        let ascending = t.thresholds.windows(2).all(|w| w[0] < w[1]);
        let mut ok = ascending && t.is_monotone();
        for row in t.per_class.iter().chain(std::iter::once(&t.mean)) {
            rows += 1;
            let v: Vec<f64> = row.iter().flatten().copied().collect();
            ok &= v.windows(2).all(|w| w[1] <= w[0]);
        }
        if !ok {
            bad.push(r.meta.checkpoint_id.clone());
        }
    }
    let tail = if bad.is_empty() { String::new() } else { format!("; violated by {bad:?}") };
    Outcome::new(bad.is_empty(), format!("{} eval reports, {rows} rows non-increasing in T(IoU){tail}", reports.len()))
}

// ------------------------------------------------------------- determinism

pub fn small_dataset() -> Dataset {
    synthesize(&DatasetSpec { n_images: 240, annotated_fraction: 0.1, seed: 5, ..DatasetSpec::default() }).unwrap()
}

pub fn small_config() -> TrainConfig {
    TrainConfig { epochs: 3, warmup_epochs: 1, decay_period: 2, seed: 3, ..TrainConfig::default() }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Two identical fits, the second inside a 3-thread pool, must write the same
/// bytes and yield the same report. Returns the reports for further checks.
pub fn determinism() -> (Outcome, Vec<EvalReport>) {
    let ds = small_dataset();
    let cfg = small_config();
    let run = |dir: &Path| -> Result<(Vec<(String, Vec<u8>)>, EvalReport, Vec<u8>)> {
        let out = fit(&ds, &cfg, &FitOptions { out_dir: Some(dir.to_path_buf()), config_hash: "determinism".into() })?;
        let report = evaluate(&out.best.inference_only(), &ds, &DEFAULT_LOC_THRESHOLDS)?;
        let json = serde_json::to_vec_pretty(&report).unwrap();
        Ok((dir_bytes(dir), report, json))
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(d1.path());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let second = pool.install(|| run(d2.path()));
    match (first, second) {
        (Ok((f1, r1, j1)), Ok((f2, _r2, j2))) => {
            let differing: Vec<&str> =
                f1.iter().zip(&f2).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
            let same_files = f1.len() == f2.len() && differing.is_empty();
            let pass = same_files && j1 == j2;
            let detail = format!(
                "2 runs, {} files byte-identical: {same_files}{}; report JSON identical: {}",
                f1.len(),
                if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") },
                j1 == j2
            );
            (Outcome::new(pass, detail), vec![r1])
        }
        (a, b) => {
            let e = a.err().or(b.err()).map(|e| e.to_string()).unwrap_or_default();
            (Outcome::new(false, format!("fit failed: {e}")), Vec::new())
        }
    }
}
