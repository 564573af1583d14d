use procres::autodiff::Exec;
use procres::data::synth::{SynthConfig, SynthWorld};
use procres::harness::config::RunConfig;
use procres::model::{bind_sample, bind_state, build_pipeline, AblationVariant, DataShapes, ModelState, PassMode, PipelineConfig};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let shapes = DataShapes::desk_default();
    let pcfg = PipelineConfig::new(shapes, cfg.model.clone(), cfg.loss.clone(), AblationVariant::Full).unwrap();
    let pl = build_pipeline(&pcfg, 1).unwrap();
    println!("graph nodes: {}", pl.graph.len());
    let world = SynthWorld::new(SynthConfig::default()).unwrap();
    let rec = world.render_normal(0);
    let mut state = ModelState::new(pcfg, 42).unwrap();
    state.set_sensor_stats(std::slice::from_ref(&rec)).unwrap();

    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, &state).unwrap();
    bind_sample(&mut exec, &pl, &state, 0, &rec, PassMode::Eval).unwrap();
    exec.forward(&pl.graph).unwrap();

    let n = 100;
    let t = Instant::now();
    for _ in 0..n { exec.forward(&pl.graph).unwrap(); }
    let fwd = t.elapsed().as_secs_f64() / n as f64;
    let t = Instant::now();
    for _ in 0..n {
        exec.forward(&pl.graph).unwrap();
        exec.backward(&pl.graph, pl.samples[0].total_loss).unwrap();
    }
    let both = t.elapsed().as_secs_f64() / n as f64;
    println!("forward {:.2} ms   fwd+bwd {:.2} ms   bwd {:.2} ms", fwd*1e3, both*1e3, (both-fwd)*1e3);
}
