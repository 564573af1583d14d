//! Seeded training loop: shuffled mini-batches, per-epoch cosine learning
//! rate, decoupled-weight-decay updates, best-checkpoint selection by
//! validation loss on normal samples.

use std::collections::BTreeMap;

use crate::autodiff::Exec;
use crate::data::manifest::Dataset;
use crate::data::DefectKind;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{
    bind_sample, bind_state, build_pipeline, AblationVariant, DataShapes, ModelState, PassMode,
    Pipeline, PipelineConfig,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// One row of the training-loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Evaluation-mode loss over the validation split (if one was given).
    pub val_loss: Option<f64>,
}

/// Training outcome: final state, best-by-validation state, and the trace.
pub struct Trained {
    pub final_state: ModelState,
    pub best_state: ModelState,
    pub best_epoch: usize,
    pub trace: Vec<EpochStats>,
}

fn mean_eval_loss(pl: &Pipeline, state: &ModelState, ds: &Dataset) -> Result<f64> {
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, pl, state)?;
    let mut total = 0.0f64;
    for rec in &ds.samples {
        bind_sample(&mut exec, pl, state, 0, rec, PassMode::Eval)?;
        exec.forward(&pl.graph)?;
        total += exec.scalar(pl.samples[0].total_loss) as f64;
    }
    Ok(total / ds.samples.len() as f64)
}

/// Trains `variant` on the given split. The validation split (all-normal)
/// selects the best checkpoint by evaluation-mode total loss.
pub fn train(
    cfg: &RunConfig,
    variant: AblationVariant,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
) -> Result<Trained> {
    cfg.train.validate()?;
    if train_ds
        .samples
        .iter()
        .any(|s| s.defect_kind != DefectKind::None)
    {
        return Err(Error::Train("training split must be all-normal".into()));
    }
    let shapes = DataShapes::from_manifest(&train_ds.manifest);
    let pcfg = PipelineConfig::new(shapes, cfg.model.clone(), cfg.loss.clone(), variant)?;
    let pl = build_pipeline(&pcfg, 1)?;

    let mut state = ModelState::new(pcfg, cfg.train.seed)?;
    state.set_sensor_stats(&train_ds.samples)?;
    state.set_text_anchor(train_ds.text_anchor.clone())?;

    let mut opt = AdamW::<f32>::new(AdamWConfig {
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let mut exec = Exec::<f32>::new(&pl.graph);
    let param_names = pl.graph.param_names();

    let mut trace = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut sample_pass = 0u64;

    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.lr, 0.0)?;
        let mut order: Vec<usize> = (0..train_ds.samples.len()).collect();
        Stream::derive(cfg.train.seed, "shuffle", epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.train.batch).enumerate() {
            bind_state(&mut exec, &pl, &state)?;
            let mut grad_acc: BTreeMap<String, Vec<f32>> = param_names
                .iter()
                .map(|n| (n.clone(), vec![0.0f32; state.params[n].numel()]))
                .collect();
            let mut batch_loss = 0.0f64;
            for &idx in batch {
                let seed = Stream::derive(cfg.train.seed, "pass", sample_pass).next_u64();
                sample_pass += 1;
                bind_sample(
                    &mut exec,
                    &pl,
                    &state,
                    0,
                    &train_ds.samples[idx],
                    PassMode::Train { seed },
                )?;
                exec.forward(&pl.graph).map_err(|e| {
                    Error::Train(format!(
                        "epoch {epoch} batch {batch_idx} sample {idx}: {e}"
                    ))
                })?;
                let loss = exec.scalar(pl.samples[0].total_loss);
                if !loss.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss at epoch {epoch} batch {batch_idx} sample {idx}"
                    )));
                }
                batch_loss += loss as f64;
                exec.backward(&pl.graph, pl.samples[0].total_loss)
                    .map_err(|e| {
                        Error::Train(format!(
                            "epoch {epoch} batch {batch_idx} sample {idx}: {e}"
                        ))
                    })?;
                for name in &param_names {
                    let id = pl.graph.leaf(name).expect("param leaf");
                    let g = exec.grad_slice(id);
                    let acc = grad_acc.get_mut(name).expect("accumulator");
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let grads: BTreeMap<String, Tensor<f32>> = grad_acc
                .into_iter()
                .map(|(name, mut v)| {
                    for g in v.iter_mut() {
                        *g *= scale;
                    }
                    let shape = state.params[&name].shape().to_vec();
                    (name, Tensor::new(shape, v).expect("grad shape"))
                })
                .collect();
            opt.step(&mut state.params, &grads, lr)?;
            epoch_loss += batch_loss / batch.len() as f64;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;

        let val_loss = match val_ds {
            Some(ds) => {
                let v = mean_eval_loss(&pl, &state, ds)?;
                let improved = best.as_ref().map(|(b, _, _)| v < *b).unwrap_or(true);
                if improved {
                    best = Some((v, epoch, state.clone()));
                }
                Some(v)
            }
            None => None,
        };
        trace.push(EpochStats { epoch, lr, train_loss, val_loss });
    }

    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (e, s),
        None => (cfg.train.epochs - 1, state.clone()),
    };
    Ok(Trained {
        final_state: state,
        best_state,
        best_epoch,
        trace,
    })
}

/// Renders the loss trace as a tab-separated text block.
pub fn render_trace(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\tval_loss\n");
    for row in trace {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            row.epoch,
            row.lr,
            row.train_loss,
            row.val_loss.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
        ));
    }
    s
}
