use procres::data::manifest::load_dataset;
use procres::data::synth::{generate_dataset, SynthConfig};
use procres::harness::config::RunConfig;
use procres::harness::evaluate::evaluate;
use procres::harness::train::train;
use procres::model::AblationVariant;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("procres-dbg-train");
    let _ = std::fs::remove_dir_all(&dir);
    let cfg = RunConfig::default();
    let gen = generate_dataset(&SynthConfig::default(), &dir).unwrap();
    println!("gen: {:.1}s", t0.elapsed().as_secs_f64());

    let train_ds = load_dataset(&gen.train_manifest).unwrap();
    let val_ds = load_dataset(&gen.val_manifest).unwrap();
    let test_ds = load_dataset(&gen.test_manifest).unwrap();

    let t1 = Instant::now();
    let trained = train(&cfg, AblationVariant::Full, &train_ds, Some(&val_ds)).unwrap();
    println!("train: {:.1}s (best epoch {})", t1.elapsed().as_secs_f64(), trained.best_epoch);
    for row in trained.trace.iter().step_by(10) {
        println!("  epoch {:3} lr {:.2e} train {:.5} val {:?}", row.epoch, row.lr, row.train_loss, row.val_loss);
    }
    let last = trained.trace.last().unwrap();
    println!("  epoch {:3} train {:.5} val {:?}", last.epoch, last.train_loss, last.val_loss);

    let t2 = Instant::now();
    let report = evaluate(&trained.best_state, &test_ds).unwrap();
    println!("eval: {:.1}s", t2.elapsed().as_secs_f64());
    println!("AUROC {:.4}  AP {:.4}  F1max {:.4}", report.auroc, report.ap, report.f1_max);
    for (k, v) in &report.per_kind_auroc {
        println!("  {:?}: {:.4}", k, v);
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
