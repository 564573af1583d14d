//! Training, evaluation, ablations, robustness sweeps, benchmarks, and
//! checkpoint persistence.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use ablation::{run_ablation, run_replicates, AblationOutcome, ReplicateSummary};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{load_config, parse_config, render_config, RunConfig, TrainConfig};
pub use evaluate::{
    evaluate, latency_bench, render_sweep, robustness_sweep, EvalReport, LatencyStats, SampleScore,
};
pub use metrics::{auroc, average_precision, f1_max};
pub use train::{train, EpochStats, Trained};
