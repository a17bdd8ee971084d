use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kacl_core::artifact::ARTIFACT_VERSION;
use kacl_core::bbox::{iou, BoundingBox};
use kacl_core::cam::{gradcam, threshold_to_bbox, Heatmap};
use kacl_core::checkpoint::Checkpoint;
use kacl_core::eval::{evaluate, EvalReport, DEFAULT_LOC_THRESHOLDS};
use kacl_core::image::GrayImage;
use kacl_core::radiomics::{raw_features, registry_hash, FEATURE_NAMES};
use kacl_core::synth;
use kacl_core::train::{ablate, fit, fit_normalization, FitOptions};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_spec, RunConfig};
use crate::{Cli, Command, Global, Inspect, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate { spec, out } => generate(g, spec.as_deref(), out),
        Command::Train { config, cam_threshold } => train(g, config, *cam_threshold),
        Command::Ablate { config, cam_threshold, seeds } => run_ablation(g, config, *cam_threshold, *seeds),
        Command::Eval { checkpoint, dataset, loc_thresholds, out } => {
            let t = loc_thresholds.as_ref().map_or(DEFAULT_LOC_THRESHOLDS.to_vec(), |t| t.0.clone());
            eval(g, checkpoint, dataset, &t, out.as_deref())
        }
        Command::ExtractRadiomics { manifest, out, gray_levels } => extract(g, manifest, out, *gray_levels),
        Command::Inspect { what: Inspect::Cam { checkpoint, dataset, image, class, threshold, out } } => {
            inspect_cam(g, checkpoint, dataset, *image, class, *threshold, out)
        }
    }
}

/// Prints `value` as JSON under `--json`, otherwise `text` unless quiet.
fn emit<T: Serialize>(g: &Global, text: &str, value: &T) -> Result<()> {
    if g.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else if !g.quiet {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn no_seed(g: &Global, command: &str) -> Result<()> {
    match g.seed {
        Some(_) => Err(UsageError(format!("--seed has no effect on `{command}`; the checkpoint fixes it")).into()),
        None => Ok(()),
    }
}

fn generate(g: &Global, spec: Option<&Path>, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(p) => load_spec(p)?,
        None => Default::default(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let manifest = synth::generate(&spec, out)?;
    let normals = manifest.entries.iter().filter(|e| e.label.is_normal()).count();
    let annotated = manifest.entries.iter().filter(|e| e.annotated).count();
    let text = format!(
        "wrote {} images ({normals} normal, {annotated} annotated) to {}\nspec hash {} seed {}\n",
        manifest.entries.len(),
        out.display(),
        manifest.spec_hash,
        manifest.seed
    );
    emit(
        g,
        &text,
        &json!({
            "dir": out,
            "images": manifest.entries.len(),
            "normal": normals,
            "annotated": annotated,
            "spec_hash": manifest.spec_hash,
            "seed": manifest.seed,
            "splits": manifest.splits,
        }),
    )
}

fn load_run(g: &Global, path: &Path, cam_threshold: Option<f64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = cam_threshold {
        cfg.train.cam_threshold = t;
        cfg.train.validate().map_err(|e| UsageError(format!("--cam-threshold: {e}")))?;
    }
    Ok(cfg)
}

fn train(g: &Global, config: &Path, cam_threshold: Option<f64>) -> Result<()> {
    let cfg = load_run(g, config, cam_threshold)?;
    let hash = cfg.hash();
    let dataset = cfg.load_dataset()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("run_config.json"),
        &json!({ "artifact_version": ARTIFACT_VERSION, "config_hash": hash, "seed": cfg.train.seed, "config": cfg }),
    )?;
    let outcome = fit(&dataset, &cfg.train, &FitOptions { out_dir: Some(out.clone()), config_hash: hash })?;
    let report = evaluate(&outcome.best.inference_only(), &dataset, &cfg.eval.loc_thresholds)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), report.render_text())?;
    let text = format!("best epoch {}\n{}", outcome.best_epoch, report.render_text());
    emit(g, &text, &report)
}

fn run_ablation(g: &Global, config: &Path, cam_threshold: Option<f64>, n: u64) -> Result<()> {
    let cfg = load_run(g, config, cam_threshold)?;
    let hash = cfg.hash();
    let dataset = cfg.load_dataset()?;
    let seeds: Vec<u64> = (0..n).map(|i| cfg.train.seed + i).collect();
    let report = ablate(&dataset, &cfg.train, &seeds, &hash, Some(&cfg.output_dir))?;
    write_json(&cfg.output_dir.join("ablation.json"), &report)?;
    fs::write(cfg.output_dir.join("ablation.txt"), report.render_text())?;
    emit(g, &report.render_text(), &report)
}

fn eval(g: &Global, checkpoint: &Path, dataset: &Path, thresholds: &[f64], out: Option<&Path>) -> Result<()> {
    no_seed(g, "eval")?;
    // both inputs are fully validated before anything is written
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = synth::load(dataset)?;
    let report: EvalReport = evaluate(&ckpt.inference_only(), &ds, thresholds)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("eval_report.json"),
    };
    write_json(&path, &report)?;
    emit(g, &report.render_text(), &report)
}

#[derive(Serialize)]
struct FeatureRecord {
    image_id: usize,
    label: String,
    split: &'static str,
    annotated: bool,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

fn extract(g: &Global, manifest: &Path, out: &Path, gray_levels: usize) -> Result<()> {
    no_seed(g, "extract-radiomics")?;
    let ds = synth::load(manifest)?;
    let stats = fit_normalization(&ds, gray_levels)?;
    let records: Vec<FeatureRecord> = ds
        .images
        .par_iter()
        .filter_map(|img| Some((img, img.gt_box?)))
        .map(|(img, bbox)| {
            let raw = raw_features(&img.image, &bbox, gray_levels)?;
            Ok(FeatureRecord {
                image_id: img.id,
                label: ds.hierarchy.label_name(img.label).to_string(),
                split: img.split.name(),
                annotated: img.annotated,
                bbox,
                raw: raw.to_vec(),
                normalized: stats.normalize(&raw).values().to_vec(),
            })
        })
        .collect::<kacl_core::Result<_>>()?;
    let as_json = out.extension().is_some_and(|e| e == "json");
    if as_json {
        let doc = json!({
            "artifact_version": ARTIFACT_VERSION,
            "config_hash": ds.spec.hash(),
            "seed": ds.spec.seed,
            "registry_hash": registry_hash(),
            "feature_names": FEATURE_NAMES.as_slice(),
            "normalization": stats,
            "records": records,
        });
        write_json(out, &doc)?;
    } else {
        write_feature_csv(out, &records, &ds.spec.hash(), ds.spec.seed)?;
    }
    let text = format!("{} feature vectors of {} features written to {}\n", records.len(), FEATURE_NAMES.len(), out.display());
    emit(g, &text, &json!({ "out": out, "records": records.len(), "registry_hash": registry_hash() }))
}

/// Raw features, one row per box, columns in registry order. The leading
/// comment line carries the provenance triple.
fn write_feature_csv(path: &Path, records: &[FeatureRecord], config_hash: &str, seed: u64) -> Result<()> {
    let mut s = format!(
        "# artifact_version={ARTIFACT_VERSION} config_hash={config_hash} seed={seed} registry_hash={}\n",
        registry_hash()
    );
    s.push_str("image_id,label,split,annotated,x0,y0,x1,y1");
    for name in FEATURE_NAMES {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for r in records {
        let b = &r.bbox;
        s.push_str(&format!("{},{},{},{},{},{},{},{}", r.image_id, r.label, r.split, r.annotated, b.x0, b.y0, b.x1, b.y1));
        for v in &r.raw {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn resolve_class(ckpt: &Checkpoint, class: &str) -> Result<usize> {
    let names = &ckpt.meta.class_names;
    let k = class.parse::<usize>().ok().or_else(|| names.iter().position(|n| n == class));
    match k {
        Some(k) if k < names.len() => Ok(k),
        _ => Err(UsageError(format!("unknown class {class:?}; expected 0..{} or one of {names:?}", names.len())).into()),
    }
}

/// Image rescaled to [0, 1], averaged with the heatmap, box outline at full
/// intensity.
fn overlay(image: &GrayImage, heat: &Heatmap, bbox: &BoundingBox) -> GrayImage {
    let px = image.pixels();
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (image.width(), image.height());
    let mut out = GrayImage::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = 0.5 * (image.get(x, y) - lo) / span + 0.5 * heat.get(x, y);
            let on_edge = bbox.contains(x, y)
                && (x == bbox.x0 || y == bbox.y0 || x + 1 == bbox.x1 || y + 1 == bbox.y1);
            out.set(x, y, if on_edge { 1.0 } else { v });
        }
    }
    out
}

fn inspect_cam(
    g: &Global,
    checkpoint: &Path,
    dataset: &Path,
    image_id: usize,
    class: &str,
    threshold: Option<f64>,
    out: &Path,
) -> Result<()> {
    no_seed(g, "inspect cam")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = synth::load(dataset)?;
    let img = ds.get(image_id).ok_or_else(|| kacl_core::Error::data(format!("no image with id {image_id}")))?;
    let class = resolve_class(&ckpt, class)?;
    let threshold = threshold.unwrap_or(ckpt.meta.cam_threshold);
    let model = ckpt.inference_model()?;
    let (w, h) = (img.image.width(), img.image.height());
    let heat = gradcam(&model.image_encoder, &model.head, &img.image, class)?;
    let bbox = threshold_to_bbox(&heat, threshold, BoundingBox::centered_quarter(w, h))?;

    let stem = format!("cam_{image_id:05}_c{class}");
    let comment = format!(
        "kacl cam image={image_id} class={class} config={} seed={} v={ARTIFACT_VERSION}",
        ckpt.meta.config_hash, ckpt.meta.seed
    );
    fs::create_dir_all(out)?;
    let pgm: PathBuf = out.join(format!("{stem}.pgm"));
    fs::write(&pgm, overlay(&img.image, &heat, &bbox).to_pgm16(&comment))?;
    let record = json!({
        "image_id": image_id,
        "class": class,
        "class_name": ckpt.meta.class_names[class],
        "box": bbox,
        "threshold": threshold,
        "gt_box": img.gt_box,
        "iou": img.gt_box.map(|t| iou(&bbox, &t)),
        "split": img.split.name(),
        "checkpoint_id": ckpt.id(),
        "artifact_version": ARTIFACT_VERSION,
        "config_hash": ckpt.meta.config_hash,
        "seed": ckpt.meta.seed,
    });
    write_json(&out.join(format!("{stem}.json")), &record)?;
    let text = format!(
        "image {image_id} class {} box ({}, {})-({}, {}) threshold {threshold}\noverlay {}\n",
        ckpt.meta.class_names[class],
        bbox.x0,
        bbox.y0,
        bbox.x1,
        bbox.y1,
        pgm.display()
    );
    emit(g, &text, &record)
}
