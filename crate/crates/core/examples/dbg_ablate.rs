use procres::data::manifest::load_dataset;
use procres::data::synth::{generate_dataset, SynthConfig};
use procres::data::DefectKind;
use procres::harness::config::RunConfig;
use procres::harness::evaluate::robustness_sweep;
use procres::harness::run_ablation;
use procres::model::AblationVariant;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("procres-dbg-train");
    let _ = std::fs::remove_dir_all(&dir);
    generate_dataset(&SynthConfig::default(), &dir).unwrap();
    let train_ds = load_dataset(&dir.join("train/manifest.txt")).unwrap();
    let val_ds = load_dataset(&dir.join("val/manifest.txt")).unwrap();
    let test_ds = load_dataset(&dir.join("test/manifest.txt")).unwrap();
    let cfg = RunConfig::default();

    let mut full_ckpt = None;
    for variant in [
        AblationVariant::Full,
        AblationVariant::ReverseMapping,
        AblationVariant::ModalityImage,
        AblationVariant::SymmetricFusion,
    ] {
        let t = Instant::now();
        let out = run_ablation(variant, &cfg, &train_ds, Some(&val_ds), &test_ds).unwrap();
        println!(
            "{:<18} {:5.1}s auroc {:.4} ph {:.4} surf {:.4}",
            variant.tag(),
            t.elapsed().as_secs_f64(),
            out.report.auroc,
            out.report.kind_auroc(DefectKind::ProcessHidden).unwrap_or(f64::NAN),
            out.report.kind_auroc(DefectKind::Surface).unwrap_or(f64::NAN),
        );
        if variant == AblationVariant::Full {
            full_ckpt = Some(out.trained.best_state);
        }
    }

    let state = full_ckpt.unwrap();
    let sweep = robustness_sweep(&state, &test_ds, &[0.0, 0.1, 0.2, 0.3], 42).unwrap();
    for (sigma, report) in &sweep {
        println!("sigma {sigma}: auroc {:.4}", report.auroc);
    }
}
