//! Joint training loop: classification, Grad-CAM boxes, radiomic positives
//! and the contrastive objective, plus the four-variant ablation harness.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::ARTIFACT_VERSION;
use crate::bbox::BoundingBox;
use crate::cam::{gradcam_from_stage4, threshold_to_bbox, DEFAULT_THRESHOLD};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::eval::{eval_auc, evaluate, localize, predict, EvalReport, DEFAULT_LOC_THRESHOLDS};
use crate::losses::{focal_loss_graph, kacl_loss_graph, LossConfig};
use crate::models::{image_batch, InferenceModel, KaclModel, ModelConfig};
use crate::radiomics::{registry_hash, NormalizationStats, DEFAULT_GRAY_LEVELS, FEATURE_COUNT};
use crate::sampling::{build_pairs, DiseaseHierarchy, Label, DEFAULT_NORMAL_CAP};
use crate::synth::{Dataset, LabeledImage, Split};
use crate::tensor::{Graph, Tensor, Var};

/// Training ROIs used to fit the radiomic z-score parameters, besides the
/// annotated boxes.
const NORMALIZATION_SAMPLE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    /// Epochs during which the contrastive weight is forced to zero.
    pub warmup_epochs: usize,
    /// Also ramp the learning rate linearly over the warmup epochs.
    pub lr_warmup: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub cam_threshold: f64,
    pub normal_cap: usize,
    pub gray_levels: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr0: 1e-3,
            lr_decay: 0.1,
            decay_period: 3,
            warmup_epochs: 4,
            lr_warmup: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            cam_threshold: DEFAULT_THRESHOLD,
            normal_cap: DEFAULT_NORMAL_CAP,
            gray_levels: DEFAULT_GRAY_LEVELS,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        let fail = |m: String| Err(Error::config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.decay_period == 0 {
            return fail("epochs, batch_size and decay_period must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("bad learning-rate schedule: lr0 {}, decay {}", self.lr0, self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.cam_threshold > 0.0 && self.cam_threshold < 1.0) {
            return fail(format!("cam_threshold must lie in (0, 1), got {}", self.cam_threshold));
        }
        if self.gray_levels < 2 {
            return fail("gray_levels must be at least 2".into());
        }
        Ok(())
    }

    /// `lr0 · decay^floor(epoch / period)`, times the warmup ramp when enabled.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let lr = self.lr0 * self.lr_decay.powi((epoch / self.decay_period) as i32);
        if self.lr_warmup && epoch < self.warmup_epochs {
            lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            lr
        }
    }

    /// Contrastive weight in effect during `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            self.loss.lambda
        }
    }
}

/// Adaptive-moment optimizer over the model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &mut KaclModel, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.numel()).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update; parameters without a gradient count as zero.
    pub fn step(&mut self, model: &mut KaclModel, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in model.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub focal: f64,
    /// 0 when the contrastive branch was off or no pair had negatives.
    pub contrastive: f64,
    pub total: f64,
    pub pairs: usize,
}

/// Model, optimizer and the frozen context a training run needs.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: KaclModel,
    pub adam: Adam,
    pub stats: NormalizationStats,
    pub hierarchy: DiseaseHierarchy,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, hierarchy: DiseaseHierarchy, stats: NormalizationStats) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = ModelConfig { num_classes: hierarchy.num_diseases(), ..cfg.model.clone() };
        let mut model = KaclModel::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let adam = Adam::new(&mut model, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer { cfg, model, adam, stats, hierarchy })
    }

    /// Boxes for the contrastive positives: ground truth for annotated
    /// images, thresholded Grad-CAM of the labeled class otherwise.
    fn boxes(&self, batch: &[&LabeledImage], stage4: &Tensor) -> Result<Vec<Option<BoundingBox>>> {
        let s = stage4.shape();
        let plane = s[1] * s[2] * s[3];
        batch
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let Some(class) = img.label.disease() else { return Ok(None) };
                if img.annotated {
                    if let Some(b) = img.gt_box {
                        return Ok(Some(b));
                    }
                }
                let a = Tensor::new(&s[1..], stage4.data()[i * plane..(i + 1) * plane].to_vec())?;
                let (w, h) = (img.image.width(), img.image.height());
                let heat = gradcam_from_stage4(&self.model.head, &a, class, w, h)?;
                threshold_to_bbox(&heat, self.cfg.cam_threshold, BoundingBox::centered_quarter(w, h)).map(Some)
            })
            .collect()
    }

    /// Forward, loss, backward and one optimizer update with weight `lambda`
    /// on the contrastive term.
    pub fn train_step(&mut self, batch: &[&LabeledImage], lr: f64, lambda: f64) -> Result<StepMetrics> {
        let k = self.model.config.num_classes;
        let mut g = Graph::new();
        let fi = self.model.image_encoder.bind(&mut g, true);
        let head = self.model.head.bind(&mut g, true);
        let gi = self.model.image_projector.bind(&mut g, true);
        let fr = self.model.radiomic_encoder.bind(&mut g, true);
        let gr = self.model.radiomic_projector.bind(&mut g, true);

        let images: Vec<_> = batch.iter().map(|b| b.image.clone()).collect();
        let x = g.constant(image_batch(&images)?);
        let feats = self.model.image_encoder.forward(&mut g, &fi, x)?;
        let logits = self.model.head.forward(&mut g, &head, feats.representation)?;
        let probs = g.sigmoid(logits);
        let labels: Vec<Label> = batch.iter().map(|b| b.label).collect();
        let targets: Vec<f64> = labels.iter().flat_map(|l| l.targets(k)).collect();
        let focal = focal_loss_graph(&mut g, probs, &targets, &self.cfg.loss)?;

        let mut contrastive = None;
        let mut n_pairs = 0;
        if lambda > 0.0 && labels.iter().any(|l| !l.is_normal()) {
            let boxes = self.boxes(batch, g.value(feats.stage4))?;
            let refs: Vec<_> = batch.iter().map(|b| &b.image).collect();
            let pairs = build_pairs(&refs, &labels, &boxes, &self.stats, &self.hierarchy, self.cfg.normal_cap)?;
            // anchors without an eligible negative contribute nothing
            let pairs: Vec<_> = pairs.into_iter().filter(|p| !p.negatives.is_empty()).collect();
            if !pairs.is_empty() {
                let zi = self.model.image_projector.forward(&mut g, &gi, feats.representation)?;
                let rad: Vec<f64> = pairs.iter().flat_map(|p| p.radiomic.values().to_vec()).collect();
                let r = g.constant(Tensor::new(&[pairs.len(), FEATURE_COUNT], rad)?);
                let yr = self.model.radiomic_encoder.forward(&mut g, &fr, r)?;
                let zr = self.model.radiomic_projector.forward(&mut g, &gr, yr)?;
                let mut losses = Vec::with_capacity(pairs.len());
                for (m, p) in pairs.iter().enumerate() {
                    let anchor = g.row(zi, p.anchor)?;
                    let positive = g.row(zr, m)?;
                    let negs: Vec<Var> = p.negatives.iter().map(|&j| g.row(zi, j)).collect::<Result<_>>()?;
                    if let Some(l) = kacl_loss_graph(&mut g, anchor, positive, &negs, &self.cfg.loss)? {
                        losses.push(l);
                    }
                }
                if !losses.is_empty() {
                    n_pairs = losses.len();
                    let stacked = g.stack(&losses)?;
                    contrastive = Some(g.mean(stacked));
                }
            }
        }

        let total = match contrastive {
            Some(c) if lambda > 0.0 => {
                let a = g.scale(c, lambda);
                let b = g.scale(focal, 1.0 - lambda);
                g.add(a, b)?
            }
            _ if lambda == 0.0 => focal,
            _ => g.scale(focal, 1.0 - lambda),
        };
        let metrics = StepMetrics {
            focal: g.value(focal).item(),
            contrastive: contrastive.map_or(0.0, |c| g.value(c).item()),
            total: g.value(total).item(),
            pairs: n_pairs,
        };
        if !metrics.total.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss (focal {}, contrastive {})",
                metrics.focal, metrics.contrastive
            )));
        }
        g.backward(total)?;
        self.model.zero_grads();
        self.model.image_encoder.pull_grads(&g, &fi);
        self.model.head.pull_grads(&g, &head);
        self.model.image_projector.pull_grads(&g, &gi);
        self.model.radiomic_encoder.pull_grads(&g, &fr);
        self.model.radiomic_projector.pull_grads(&g, &gr);
        if let Some(bad) = self.model.params_mut().iter().find_map(|p| p.grad().filter(|d| d.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::numerical(format!("non-finite gradient ({} entries)", bad.len())));
        }
        self.adam.step(&mut self.model, lr);
        Ok(metrics)
    }
}

/// z-score parameters from annotated training boxes plus the centered
/// quarter box of the first training images.
pub fn fit_normalization(dataset: &Dataset, gray_levels: usize) -> Result<NormalizationStats> {
    let training = dataset.training();
    let annotated = training.iter().filter(|i| i.annotated).filter_map(|i| Some((&i.image, i.gt_box?)));
    let quarter = training
        .iter()
        .take(NORMALIZATION_SAMPLE)
        .map(|i| (&i.image, BoundingBox::centered_quarter(i.image.width(), i.image.height())));
    NormalizationStats::fit(annotated.chain(quarter), gray_levels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub focal_loss: f64,
    pub contrastive_loss: f64,
    pub lr: f64,
    pub lambda: f64,
    pub val_mean_auc: Option<f64>,
    /// Localization accuracy at IoU > 0.5 on the annotated training images.
    pub train_loc_acc: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,focal_loss,contrastive_loss,lr,lambda,val_mean_auc,train_loc_acc_iou0.5";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        format!(
            "{},{:.8},{:.8},{:e},{},{},{}",
            self.epoch,
            self.focal_loss,
            self.contrastive_loss,
            self.lr,
            self.lambda,
            opt(self.val_mean_auc),
            opt(self.train_loc_acc)
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where per-epoch checkpoints, `best.ckpt` and `train_log.csv` go.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

fn meta(cfg: &TrainConfig, model: &KaclModel, ds: &Dataset, hash: &str, epoch: usize, stats: &NormalizationStats) -> CheckpointMeta {
    CheckpointMeta {
        artifact_version: ARTIFACT_VERSION,
        config_hash: hash.to_string(),
        seed: cfg.seed,
        registry_hash: registry_hash(),
        epoch: Some(epoch),
        model: model.config.clone(),
        class_names: ds.hierarchy.diseases().iter().map(|d| d.name.clone()).collect(),
        cam_threshold: cfg.cam_threshold,
        normalization: Some(stats.clone()),
    }
}

/// Trains on the training splits, validating on the validation split after
/// every epoch. Keeps the checkpoint with the best mean validation AUC.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    let stats = fit_normalization(dataset, cfg.gray_levels)?;
    let mut trainer = Trainer::new(cfg.clone(), dataset.hierarchy.clone(), stats.clone())?;
    let train = dataset.training();
    if train.is_empty() {
        return Err(Error::data("dataset has no training images"));
    }
    let val = dataset.split(Split::Val);
    let val_labels: Vec<Label> = val.iter().map(|i| i.label).collect();
    let loc_probe = dataset.split(Split::AnnotatedTrain);
    let k = dataset.num_classes();

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("train_log.csv"))?;
            writeln!(f, "# artifact_version={ARTIFACT_VERSION} config_hash={} seed={}", opts.config_hash, cfg.seed)?;
            writeln!(f, "{}", LogRow::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let lambda = cfg.lambda_at(epoch);
        order.shuffle(&mut rng);
        let (mut focal, mut contrastive, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| train[i]).collect();
            let m = trainer.train_step(&batch, lr, lambda).map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!(
                    "epoch {epoch}: {msg}; last good checkpoint is {}",
                    if epoch == 0 { "none".into() } else { format!("epoch_{:02}.ckpt", epoch - 1) }
                )),
                other => other,
            })?;
            focal += m.focal;
            contrastive += m.contrastive;
            steps += 1;
        }

        let inference = InferenceModel::from(&trainer.model);
        let val_auc = if val.is_empty() { None } else { eval_auc(&predict(&inference, &val)?, &val_labels, k).mean };
        let train_loc_acc = if loc_probe.is_empty() {
            None
        } else {
            let recs = localize(&inference, &loc_probe, cfg.cam_threshold)?;
            (!recs.is_empty()).then(|| recs.iter().filter(|r| r.iou > 0.5).count() as f64 / recs.len() as f64)
        };
        let row = LogRow {
            epoch,
            focal_loss: focal / steps as f64,
            contrastive_loss: contrastive / steps as f64,
            lr,
            lambda,
            val_mean_auc: val_auc,
            train_loc_acc,
        };
        log::info!("{}", row.to_csv());
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        log.push(row);

        let ckpt = Checkpoint::from_model(
            &trainer.model,
            meta(cfg, &trainer.model, dataset, &opts.config_hash, epoch, &stats),
        );
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(format!("epoch_{epoch:02}.ckpt")))?;
        }
        let score = val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            if let Some(dir) = &opts.out_dir {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            best = Some((score, epoch, ckpt.clone()));
        }
        last = Some(ckpt);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FitOutcome { best, last: last.expect("at least one epoch"), best_epoch, log })
}

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Base,
    WithFocal,
    WithByop,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::WithFocal, Variant::WithByop, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::WithFocal => "w. FL",
            Variant::WithByop => "w. BYOP",
            Variant::Full => "Full",
        }
    }

    /// Cross-entropy is the focal loss at α = 0.5, γ = 0 (scaled by one half).
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        let focal = matches!(self, Variant::WithFocal | Variant::Full);
        let contrastive = matches!(self, Variant::WithByop | Variant::Full);
        if !focal {
            c.loss.alpha = 0.5;
            c.loss.gamma = 0.0;
        }
        if !contrastive {
            c.loss.lambda = 0.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// One row per variant and seed: per-class AUC, mean AUC, localization at 0.5.
    pub fn render_text(&self) -> String {
        let names = self.rows.first().map(|r| r.report.class_names.clone()).unwrap_or_default();
        let mut s = format!("{:8} {:>6}", "variant", "seed");
        for n in &names {
            s.push_str(&format!(" {:>7.7}", n));
        }
        s.push_str("    mean  loc@0.5\n");
        let f = |v: Option<f64>| v.map_or_else(|| "      -".to_string(), |x| format!("{x:7.3}"));
        for r in &self.rows {
            s.push_str(&format!("{:8} {:>6}", r.variant.name(), r.seed));
            for a in &r.report.auc.per_class {
                s.push_str(&format!(" {}", f(*a)));
            }
            s.push_str(&format!(" {} {}\n", f(r.report.auc.mean), f(r.report.localization.mean_at(0.5))));
        }
        s
    }
}

/// Trains and evaluates every variant for every seed on the same dataset.
pub fn ablate(dataset: &Dataset, cfg: &TrainConfig, seeds: &[u64], config_hash: &str, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in Variant::ALL {
            let c = TrainConfig { seed, ..v.apply(cfg) };
            let opts = FitOptions {
                out_dir: out_dir.map(|d| d.join(format!("seed{seed}_{}", v.name().replace(['.', ' '], "").to_lowercase()))),
                config_hash: config_hash.to_string(),
            };
            let outcome = fit(dataset, &c, &opts)?;
            let report = evaluate(&outcome.best.inference_only(), dataset, &DEFAULT_LOC_THRESHOLDS)?;
            log::info!("{} seed {seed}: mean AUC {:?}", v.name(), report.auc.mean);
            rows.push(AblationRow { variant: v, seed, report });
        }
    }
    Ok(AblationReport { config_hash: config_hash.to_string(), rows })
}
