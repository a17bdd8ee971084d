//! Image encoder, radiomic encoder, the two projectors and the classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::radiomics::{RadiomicVector, FEATURE_COUNT, FEATURE_NAMES};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest image side for which the fourth stage still has a 2x2 map.
/// Initial sigmoid output of every class. Starting near the rare-positive
/// rate keeps the flood of easy negatives from dominating the first updates.
pub const HEAD_PRIOR: f64 = 0.01;

pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the four convolutional stages; the last one is the
    /// representation width.
    pub channels: [usize; 4],
    pub radiomic_dim: usize,
    pub radiomic_hidden: [usize; 2],
    pub projection_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [8, 16, 32, 64],
            radiomic_dim: FEATURE_COUNT,
            radiomic_hidden: [64, 64],
            projection_dim: 32,
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn representation_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().chain(&self.radiomic_hidden).any(|&c| c == 0)
            || self.projection_dim == 0
            || self.num_classes == 0
            || self.radiomic_dim == 0
        {
            return Err(Error::config(format!("all model widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Weight and bias of one affine or convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

impl Layer {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    fn glorot<R: Rng>(rng: &mut R, weight_shape: &[usize], fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Layer {
            weight: Tensor::new(weight_shape, data).expect("shape product matches"),
            bias: Tensor::zeros(&weight_shape[..1]),
        }
    }

    /// He-uniform: ±sqrt(6 / fan_in), suited to the relu that follows every conv.
    fn conv<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let fan_in = in_ch * k * k;
        let limit = (6.0 / fan_in as f64).sqrt();
        let shape = [out_ch, in_ch, k, k];
        let data = (0..out_ch * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
        Layer { weight: Tensor::new(&shape, data).expect("shape product matches"), bias: Tensor::zeros(&[out_ch]) }
    }

    fn dense<R: Rng>(rng: &mut R, inp: usize, out: usize) -> Self {
        Layer::glorot(rng, &[out, inp], inp, out)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLayer {
        let mut w = self.weight.clone();
        let mut b = self.bias.clone();
        w.set_requires_grad(trainable);
        b.set_requires_grad(trainable);
        BoundLayer { weight: g.leaf(w), bias: g.leaf(b) }
    }

    fn pull_grads(&mut self, g: &Graph, bound: &BoundLayer) {
        if let Some(d) = g.grad(bound.weight) {
            self.weight.accumulate_grad(d);
        }
        if let Some(d) = g.grad(bound.bias) {
            self.bias.accumulate_grad(d);
        }
    }
}

fn bind_all(layers: &[Layer], g: &mut Graph, trainable: bool) -> Vec<BoundLayer> {
    layers.iter().map(|l| l.bind(g, trainable)).collect()
}

fn pull_all(layers: &mut [Layer], g: &Graph, bound: &[BoundLayer]) {
    layers.iter_mut().zip(bound).for_each(|(l, b)| l.pull_grads(g, b));
}

/// Vars produced by the image encoder for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `[N, D]` pooled representation.
    pub representation: Var,
    /// `[N, C4, h, w]` fourth-stage activation before its pooling, the map
    /// Grad-CAM differentiates against.
    pub stage4: Var,
}

/// Four conv(3x3, pad 1) → relu → max-pool(2) stages and global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub stages: Vec<Layer>,
}

impl ImageEncoder {
    pub fn new<R: Rng>(rng: &mut R, channels: [usize; 4]) -> Self {
        let mut in_ch = 1;
        let stages = channels
            .iter()
            .map(|&c| {
                let l = Layer::conv(rng, in_ch, c, 3);
                in_ch = c;
                l
            })
            .collect();
        ImageEncoder { stages }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundLayer> {
        bind_all(&self.stages, g, trainable)
    }

    pub fn pull_grads(&mut self, g: &Graph, bound: &[BoundLayer]) {
        pull_all(&mut self.stages, g, bound)
    }

    /// `images` is `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, bound: &[BoundLayer], images: Var) -> Result<ImageFeatures> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::config(format!("image batch must be [N, 1, H, W], got {shape:?}")));
        }
        if shape[2] < MIN_IMAGE_SIDE || shape[3] < MIN_IMAGE_SIDE {
            return Err(Error::config(format!(
                "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {}x{}",
                shape[3], shape[2]
            )));
        }
        let mut x = images;
        for (k, layer) in bound.iter().enumerate() {
            let c = g.conv2d(x, layer.weight, layer.bias, 1, 1)?;
            let a = g.relu(c);
            if k == bound.len() - 1 {
                let representation = Self::pool(g, a)?;
                return Ok(ImageFeatures { representation, stage4: a });
            }
            x = g.max_pool2d(a, 2, 2)?;
        }
        unreachable!("encoder has four stages")
    }

    /// Stage-4 activation → representation: max-pool(2) then global average.
    pub fn pool(g: &mut Graph, stage4: Var) -> Result<Var> {
        let p = g.max_pool2d(stage4, 2, 2)?;
        g.global_avg_pool(p)
    }

    /// Single-image inference: returns `(y [D], stage4 [C4, h, w])`.
    pub fn encode(&self, image: &GrayImage) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(image_batch(std::slice::from_ref(image))?);
        let out = self.forward(&mut g, &bound, x)?;
        let y = g.value(out.representation);
        let s = g.value(out.stage4);
        Ok((y.reshape(&y.shape()[1..])?, s.reshape(&s.shape()[1..])?))
    }
}

/// Stack of affine layers with relu between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new<R: Rng>(rng: &mut R, widths: &[usize]) -> Self {
        Mlp { layers: widths.windows(2).map(|w| Layer::dense(rng, w[0], w[1])).collect() }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundLayer> {
        bind_all(&self.layers, g, trainable)
    }

    pub fn pull_grads(&mut self, g: &Graph, bound: &[BoundLayer]) {
        pull_all(&mut self.layers, g, bound)
    }

    pub fn forward(&self, g: &mut Graph, bound: &[BoundLayer], x: Var) -> Result<Var> {
        let mut h = x;
        for (k, l) in bound.iter().enumerate() {
            h = g.linear(h, l.weight, l.bias)?;
            if k + 1 < bound.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[0]).unwrap_or(0)
    }

    /// Plain evaluation of a vector outside any recording.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let v = g.constant(Tensor::vector(x.to_vec()));
        let out = self.forward(&mut g, &bound, v)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Which projector to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Image,
    Radiomic,
}

/// All trainable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct KaclModel {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    /// Three affine layers, radiomic_dim → hidden → hidden → D.
    pub radiomic_encoder: Mlp,
    /// Two affine layers, D → D → P.
    pub image_projector: Mlp,
    pub radiomic_projector: Mlp,
    /// Single affine layer D → K; probabilities are independent sigmoids.
    pub head: Mlp,
}

impl KaclModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.representation_dim();
        let p = config.projection_dim;
        let image_encoder = ImageEncoder::new(rng, config.channels);
        let radiomic_encoder =
            Mlp::new(rng, &[config.radiomic_dim, config.radiomic_hidden[0], config.radiomic_hidden[1], d]);
        let image_projector = Mlp::new(rng, &[d, d, p]);
        let radiomic_projector = Mlp::new(rng, &[d, d, p]);
        let mut head = Mlp::new(rng, &[d, config.num_classes]);
        let b = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln();
        head.layers[0].bias = Tensor::full(&[config.num_classes], b);
        Ok(KaclModel { config, image_encoder, radiomic_encoder, image_projector, radiomic_projector, head })
    }

    /// Parameters in checkpoint order with their stored names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_named(&mut out, "fi.stage", &self.image_encoder.stages);
        push_named(&mut out, "fr.l", &self.radiomic_encoder.layers);
        push_named(&mut out, "gi.l", &self.image_projector.layers);
        push_named(&mut out, "gr.l", &self.radiomic_projector.layers);
        out.push(("head.w".into(), &self.head.layers[0].weight));
        out.push(("head.b".into(), &self.head.layers[0].bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .image_encoder
            .stages
            .iter_mut()
            .chain(&mut self.radiomic_encoder.layers)
            .chain(&mut self.image_projector.layers)
            .chain(&mut self.radiomic_projector.layers)
            .chain(&mut self.head.layers)
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Resets every gradient to an explicit zero buffer.
    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            let n = p.numel();
            p.zero_grad();
            p.accumulate_grad(&vec![0.0; n]);
        }
    }

    /// Rebuilds a model from named tensors; every parameter must be present
    /// with the expected shape.
    pub fn from_named(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = KaclModel::new(config, &mut rng)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            *slot = lookup(tensors, name, slot.shape())?;
        }
        Ok(model)
    }

    pub fn encode_radiomics(&self, r: &RadiomicVector) -> Result<Tensor> {
        check_radiomic_input(r, self.config.radiomic_dim)?;
        Ok(Tensor::vector(self.radiomic_encoder.apply(r.values())?))
    }

    pub fn project(&self, y: &Tensor, view: View) -> Result<Tensor> {
        let proj = match view {
            View::Image => &self.image_projector,
            View::Radiomic => &self.radiomic_projector,
        };
        Ok(Tensor::vector(proj.apply(y.data())?))
    }

    pub fn classify(&self, y: &Tensor) -> Result<Tensor> {
        classify_with(&self.head, y)
    }
}

fn push_named<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, layers: &'a [Layer]) {
    for (k, l) in layers.iter().enumerate() {
        out.push((format!("{prefix}{}.w", k + 1), &l.weight));
        out.push((format!("{prefix}{}.b", k + 1), &l.bias));
    }
}

fn lookup(tensors: &[(String, Tensor)], name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::data(format!("checkpoint lacks tensor `{name}`")))?;
    if t.shape() != shape {
        return Err(Error::data(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

/// Rejects radiomic inputs of the wrong width or with NaN/inf entries.
pub fn check_radiomic_input(r: &RadiomicVector, expected: usize) -> Result<()> {
    if r.values().len() != expected {
        return Err(Error::config(format!("radiomic vector has {} features, expected {expected}", r.values().len())));
    }
    if let Some(i) = r.values().iter().position(|v| !v.is_finite()) {
        let name = FEATURE_NAMES.get(i).copied().unwrap_or("?");
        return Err(Error::data(format!("radiomic feature {i} (`{name}`) is not finite")));
    }
    Ok(())
}

fn classify_with(head: &Mlp, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = head.bind(&mut g, false);
    let v = g.constant(y.clone());
    let logits = head.forward(&mut g, &bound, v)?;
    let p = g.sigmoid(logits);
    Ok(g.value(p).clone())
}

/// The networks kept at test time: image encoder and classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub head: Mlp,
}

impl InferenceModel {
    pub const PREFIXES: [&'static str; 2] = ["fi.", "head."];

    pub fn from_named(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (k, &c) in config.channels.iter().enumerate() {
            stages.push(Layer {
                weight: lookup(tensors, &format!("fi.stage{}.w", k + 1), &[c, in_ch, 3, 3])?,
                bias: lookup(tensors, &format!("fi.stage{}.b", k + 1), &[c])?,
            });
            in_ch = c;
        }
        let d = config.representation_dim();
        let head = Mlp {
            layers: vec![Layer {
                weight: lookup(tensors, "head.w", &[config.num_classes, d])?,
                bias: lookup(tensors, "head.b", &[config.num_classes])?,
            }],
        };
        Ok(InferenceModel { config, image_encoder: ImageEncoder { stages }, head })
    }

    pub fn classify(&self, y: &Tensor) -> Result<Tensor> {
        classify_with(&self.head, y)
    }
}

impl From<&KaclModel> for InferenceModel {
    fn from(m: &KaclModel) -> Self {
        InferenceModel { config: m.config.clone(), image_encoder: m.image_encoder.clone(), head: m.head.clone() }
    }
}

/// Packs same-sized images into a `[N, 1, H, W]` tensor, each standardized to
/// zero mean and unit variance (flat images are only centred).
pub fn image_batch(images: &[GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::config("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::config("images in a batch must share dimensions"));
        }
        data.extend(standardize(img.pixels()));
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

fn standardize(px: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    px.iter().map(move |v| (v - mean) * scale)
}
