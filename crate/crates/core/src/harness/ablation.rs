//! Ablation runner: trains a topology variant and evaluates it on the test
//! split, optionally over replicate seeds.

use crate::data::manifest::Dataset;
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::harness::evaluate::{evaluate, EvalReport};
use crate::harness::train::{train, Trained};
use crate::model::AblationVariant;

/// One trained-and-evaluated variant.
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub trained: Trained,
    pub report: EvalReport,
}

/// Trains `variant` on the train split (best checkpoint by validation loss)
/// and evaluates the best state on the test split. `variant = full` is
/// exactly the train-then-evaluate pipeline.
pub fn run_ablation(
    variant: AblationVariant,
    cfg: &RunConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    test_ds: &Dataset,
) -> Result<AblationOutcome> {
    let trained = train(cfg, variant, train_ds, val_ds)?;
    let report = evaluate(&trained.best_state, test_ds)?;
    Ok(AblationOutcome { variant, trained, report })
}

/// Mean metrics over replicate runs with seeds `base_seed .. base_seed + n`.
#[derive(Debug, Clone)]
pub struct ReplicateSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub mean_auroc: f64,
    pub mean_ap: f64,
    pub mean_f1_max: f64,
}

/// Runs `n` replicate experiments of one variant, deriving seeds
/// `base .. base + n - 1`, and reports per-replicate plus mean metrics.
pub fn run_replicates(
    variant: AblationVariant,
    cfg: &RunConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    test_ds: &Dataset,
    replicates: usize,
) -> Result<ReplicateSummary> {
    let mut seeds = Vec::with_capacity(replicates);
    let mut reports = Vec::with_capacity(replicates);
    for r in 0..replicates.max(1) {
        let mut run = cfg.clone();
        run.train.seed = cfg.train.seed + r as u64;
        seeds.push(run.train.seed);
        let outcome = run_ablation(variant, &run, train_ds, val_ds, test_ds)?;
        reports.push(outcome.report);
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    Ok(ReplicateSummary {
        seeds,
        mean_auroc: mean(&|r| r.auroc),
        mean_ap: mean(&|r| r.ap),
        mean_f1_max: mean(&|r| r.f1_max),
        reports,
    })
}
