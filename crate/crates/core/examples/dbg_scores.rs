use procres::autodiff::Exec;
use procres::data::manifest::load_dataset;
use procres::data::DefectKind;
use procres::harness::config::RunConfig;
use procres::harness::train::train;
use procres::model::{bind_sample, bind_state, build_pipeline, AblationVariant, ModelState, PassMode, DataShapes, PipelineConfig};
use std::collections::BTreeMap;

fn norms(v: &[f32]) -> f64 { (v.iter().map(|&x| (x as f64)*(x as f64)).sum::<f64>()).sqrt() }

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x,&y)| x as f64*y as f64).sum();
    dot / (norms(a)*norms(b))
}

fn stats(state: &ModelState, ds: &procres::data::manifest::Dataset, tag: &str) {
    let pl = build_pipeline(&state.cfg, 1).unwrap();
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, state).unwrap();
    let mut per_kind: BTreeMap<DefectKind, Vec<(f64,f64,f64,f64,f64)>> = BTreeMap::new();
    let mut zrs: Vec<Vec<f32>> = Vec::new();
    for (e, rec) in ds.manifest.entries.iter().zip(&ds.samples) {
        bind_sample(&mut exec, &pl, state, 0, rec, PassMode::Eval).unwrap();
        exec.forward(&pl.graph).unwrap();
        let s = exec.scalar(pl.samples[0].score) as f64;
        let c = exec.scalar(pl.samples[0].cos_dist) as f64;
        let zr = exec.value(&pl.graph, pl.samples[0].z_r);
        let zh = exec.value(&pl.graph, pl.samples[0].zhat_r.unwrap());
        per_kind.entry(e.defect_kind).or_default().push(
            (s, c, s - c, norms(zr.data()), norms(zh.data())));
        if e.defect_kind == DefectKind::None && zrs.len() < 20 { zrs.push(zr.data().to_vec()); }
    }
    println!("--- {tag}");
    for (k, v) in &per_kind {
        let n = v.len() as f64;
        let m = |i: usize| v.iter().map(|t| match i {0=>t.0,1=>t.1,2=>t.2,3=>t.3,_=>t.4}).sum::<f64>() / n;
        let sd = |i: usize| { let mu = m(i); (v.iter().map(|t| { let x = match i {0=>t.0,1=>t.1,2=>t.2,3=>t.3,_=>t.4}; (x-mu)*(x-mu)}).sum::<f64>()/n).sqrt() };
        println!("{k:?}: n={n} score {:.4}+-{:.4} cos {:.4} topk {:.4} |zr| {:.3} |zh| {:.3}", m(0), sd(0), m(1), m(2), m(3), m(4));
    }
    let mut cs = Vec::new();
    for i in 0..zrs.len() { for j in (i+1)..zrs.len() { cs.push(cosine(&zrs[i], &zrs[j])); } }
    let mc = cs.iter().sum::<f64>() / cs.len() as f64;
    println!("mean pairwise cos among normal z_r: {mc:.5}");
}

fn main() {
    let dir = std::env::temp_dir().join("procres-dbg-train");
    let _ = std::fs::remove_dir_all(&dir);
    procres::data::synth::generate_dataset(&procres::data::synth::SynthConfig::default(), &dir).unwrap();
    let train_ds = load_dataset(&dir.join("train/manifest.txt")).unwrap();
    let test_ds = load_dataset(&dir.join("test/manifest.txt")).unwrap();

    // Untrained model first.
    let shapes = DataShapes::from_manifest(&train_ds.manifest);
    let cfg = RunConfig::default();
    let pcfg = PipelineConfig::new(shapes, cfg.model.clone(), cfg.loss.clone(), AblationVariant::Full).unwrap();
    let mut st = ModelState::new(pcfg, 42).unwrap();
    st.set_sensor_stats(&train_ds.samples).unwrap();
    st.set_text_anchor(train_ds.text_anchor.clone()).unwrap();
    stats(&st, &test_ds, "untrained");

    let trained = train(&cfg, AblationVariant::Full, &train_ds, None).unwrap();
    stats(&trained.final_state, &test_ds, "after 60 epochs");
}
