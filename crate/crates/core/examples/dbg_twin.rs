use procres::autodiff::Exec;
use procres::data::manifest::load_dataset;
use procres::data::synth::{inject_defect, SynthConfig, SynthWorld};
use procres::data::DefectKind;
use procres::harness::config::RunConfig;
use procres::harness::train::train;
use procres::model::{bind_sample, bind_state, build_pipeline, AblationVariant, DataShapes, ModelState, PassMode, PipelineConfig};

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

fn probe(state: &ModelState, world: &SynthWorld, tag: &str) {
    let pl = build_pipeline(&state.cfg, 1).unwrap();
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, state).unwrap();
    let mut dz = 0.0;
    let mut dzh = 0.0;
    let mut dscore = 0.0;
    let n = 16;
    for i in 0..n {
        let idx = 200 + i as u64;
        let normal = world.render_normal(idx);
        let dipped = inject_defect(world, idx, DefectKind::ProcessHidden, 0.85).unwrap();
        // Input-level diffs on the first pair.
        if i == 0 {
            println!("[{tag}] input diffs: video {:.4} audio {:.4} sensor_z {:.4} image {:.4}",
                l2(normal.feat_video.data(), dipped.feat_video.data()),
                l2(normal.feat_audio.data(), dipped.feat_audio.data()),
                l2(state.z_score_sensors(&normal.sensor_raw).unwrap().data(),
                   state.z_score_sensors(&dipped.sensor_raw).unwrap().data()),
                l2(normal.feat_image.data(), dipped.feat_image.data()));
        }
        let mut run = |rec| {
            bind_sample(&mut exec, &pl, state, 0, rec, PassMode::Eval).unwrap();
            exec.forward(&pl.graph).unwrap();
            (
                exec.value(&pl.graph, pl.samples[0].z_r),
                exec.value(&pl.graph, pl.samples[0].zhat_r.unwrap()),
                exec.scalar(pl.samples[0].score) as f64,
            )
        };
        let (zn, zhn, sn) = run(&normal);
        let (zd, zhd, sd) = run(&dipped);
        if i < 4 {
            let cosd = |a: &[f32], b: &[f32]| {
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            };
            println!("  pair {i}: score n {sn:.4} d {sd:.4} | cos(z,zh_n) {:.4} cos(z,zh_d) {:.4} cos(zh_n,zh_d) {:.4} |zh_n| {:.2} |zh_d| {:.2}",
                cosd(zn.data(), zhn.data()), cosd(zn.data(), zhd.data()), cosd(zhn.data(), zhd.data()),
                zhn.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt(),
                zhd.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt());
        }
        dz += l2(zn.data(), zd.data());
        dzh += l2(zhn.data(), zhd.data());
        dscore += sd - sn;
        let _ = (zhn, zd);
    }
    println!("[{tag}] mean |dZ_r| {:.4}  mean |dZhat_r| {:.4}  mean dScore {:+.4}",
        dz / n as f64, dzh / n as f64, dscore / n as f64);
}

fn main() {
    let dir = std::env::temp_dir().join("procres-dbg-train");
    let train_ds = load_dataset(&dir.join("train/manifest.txt")).unwrap();
    let world = SynthWorld::new(SynthConfig::default()).unwrap();

    let shapes = DataShapes::from_manifest(&train_ds.manifest);
    let cfg = RunConfig::default();
    let pcfg = PipelineConfig::new(shapes, cfg.model.clone(), cfg.loss.clone(), AblationVariant::Full).unwrap();
    let mut st = ModelState::new(pcfg, 42).unwrap();
    st.set_sensor_stats(&train_ds.samples).unwrap();
    st.set_text_anchor(train_ds.text_anchor.clone()).unwrap();
    probe(&st, &world, "untrained");

    let trained = train(&cfg, AblationVariant::Full, &train_ds, None).unwrap();
    probe(&trained.final_state, &world, "60 epochs");
}
