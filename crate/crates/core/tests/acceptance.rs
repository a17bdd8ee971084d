//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The ablation criterion trains 12 models (4 variants x 3 seeds) on a
//! 2000-image phantom set and takes roughly a quarter of an hour on one core.
//! Its failure is reported but does not fail the process unless
//! `KACL_ACCEPTANCE_STRICT=1`; every other failure does.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::checks;
use common::Outcome;
use kacl_core::eval::EvalReport;
use kacl_core::synth::{synthesize, DatasetSpec};
use kacl_core::train::{ablate, AblationReport, TrainConfig, Variant};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(name: &str, o: &Outcome) {
    println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation() -> (Outcome, Option<AblationReport>) {
    let start = Instant::now();
    let spec = DatasetSpec { annotated_fraction: 0.1, seed: 1, ..DatasetSpec::default() };
    let ds = match synthesize(&spec) {
        Ok(d) => d,
        Err(e) => return (Outcome::new(false, format!("dataset: {e}")), None),
    };
    let rep = match ablate(&ds, &TrainConfig::default(), &SEEDS, "acceptance", None) {
        Ok(r) => r,
        Err(e) => return (Outcome::new(false, format!("ablation: {e}")), None),
    };
    let secs = start.elapsed().as_secs_f64();

    let auc = |v: Variant, s: u64| rep.row(v, s).and_then(|r| r.report.auc.mean).unwrap_or(f64::NAN);
    let loc = |v: Variant, s: u64| rep.row(v, s).and_then(|r| r.report.localization.mean_at(0.5)).unwrap_or(f64::NAN);
    let ordered: Vec<bool> = SEEDS
        .iter()
        .map(|&s| {
            auc(Variant::Full, s) > auc(Variant::WithByop, s)
                && auc(Variant::WithByop, s) > auc(Variant::WithFocal, s)
                && auc(Variant::WithFocal, s) > auc(Variant::Base, s)
        })
        .collect();
    let n_ordered = ordered.iter().filter(|&&o| o).count();
    let full_auc = mean(&SEEDS.map(|s| auc(Variant::Full, s)));
    let loc_gain = mean(&SEEDS.map(|s| loc(Variant::Full, s) - loc(Variant::Base, s)));

    let parts = [
        (n_ordered >= 2, format!("ordering Full > w.BYOP > w.FL > Base in {n_ordered}/3 seeds (need 2)")),
        (full_auc >= 0.85, format!("Full mean AUC {full_auc:.4} (need >= 0.85)")),
        (loc_gain >= 0.05, format!("Full - Base loc@0.5 {:+.1} pp (need >= +5)", 100.0 * loc_gain)),
        (secs < 3600.0, format!("{secs:.0}s (need < 3600s)")),
    ];
    let pass = parts.iter().all(|p| p.0);
    let detail = parts.iter().map(|(ok, d)| format!("{d} {}", if *ok { "ok" } else { "MISSED" })).collect::<Vec<_>>().join("; ");
    (Outcome::new(pass, detail), Some(rep))
}

fn main() -> ExitCode {
    let strict = std::env::var("KACL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut hard_failures = 0;
    let mut check = |name: &str, o: Outcome| {
        report(name, &o);
        hard_failures += usize::from(!o.pass);
    };

    check("autodiff gradients", checks::autodiff(100));
    check("radiomics oracle", checks::radiomics_oracle(200));
    check("IoU oracle", checks::iou_oracle(100));
    check("loss closed forms", checks::loss_closed_forms(1000));
    check("Grad-CAM analytic case", checks::gradcam_analytic(200));
    check("sampling rule", checks::sampling_rule(1000));
    let (det, mut reports) = checks::determinism();
    check("determinism", det);

    let (abl, rep) = ablation();
    report("ablation direction", &abl);
    if let Some(rep) = &rep {
        for line in rep.render_text().lines() {
            println!("    {line}");
        }
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation.json");
        if std::fs::write(&path, serde_json::to_string_pretty(rep).unwrap_or_default()).is_ok() {
            println!("    full report: {}", path.display());
        }
        reports.extend(rep.rows.iter().map(|r| r.report.clone()));
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    check("localization monotonicity", checks::monotone(&refs));

    let ablation_fail = usize::from(!abl.pass && strict);
    if hard_failures + ablation_fail > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
