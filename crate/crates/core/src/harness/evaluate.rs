//! Scoring a trained model over a labeled split, plus the robustness sweep
//! and the latency benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Exec;
use crate::data::manifest::Dataset;
use crate::data::synth::{add_sensor_noise, SampleRecord};
use crate::data::{DefectKind, Label};
use crate::error::{Error, Result};
use crate::harness::metrics::{auroc, average_precision, f1_max};
use crate::model::{bind_sample, bind_state, build_pipeline, ModelState, PassMode, Pipeline};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub index: usize,
    pub label: Label,
    pub kind: DefectKind,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub ms_per_sample: f64,
    pub fps: f64,
}

/// Per-sample scores and threshold-free metrics for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub scores: Vec<SampleScore>,
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    /// AUROC of each defect kind against the normal samples.
    pub per_kind_auroc: BTreeMap<DefectKind, f64>,
    /// Filled by the benchmark path only; the plain evaluation path leaves it
    /// empty so reports stay byte-identical across reruns.
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    /// AUROC restricted to one defect kind versus the normal samples.
    pub fn kind_auroc(&self, kind: DefectKind) -> Option<f64> {
        self.per_kind_auroc.get(&kind).copied()
    }

    /// Renders the report as UTF-8 text with a machine-readable metrics
    /// block. Deterministic for identical reports.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# evaluation report");
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "samples = {}", self.scores.len());
        let _ = writeln!(s, "[metrics]");
        let _ = writeln!(s, "auroc = {}", self.auroc);
        let _ = writeln!(s, "ap = {}", self.ap);
        let _ = writeln!(s, "f1_max = {}", self.f1_max);
        for (kind, v) in &self.per_kind_auroc {
            let _ = writeln!(s, "auroc_{} = {v}", kind.as_str());
        }
        if let Some(lat) = &self.latency {
            let _ = writeln!(s, "latency_ms = {}", lat.ms_per_sample);
            let _ = writeln!(s, "throughput_sps = {}", lat.fps);
        }
        let _ = writeln!(s, "[scores]");
        for row in &self.scores {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                row.index,
                row.label.as_str(),
                row.kind.as_str(),
                row.score
            );
        }
        s
    }
}

/// Scores one sample in evaluation mode (identity bottleneck).
pub fn score_sample(
    exec: &mut Exec<f32>,
    pl: &Pipeline,
    state: &ModelState,
    record: &SampleRecord,
) -> Result<f64> {
    bind_sample(exec, pl, state, 0, record, PassMode::Eval)?;
    exec.forward(&pl.graph)?;
    Ok(exec.scalar(pl.samples[0].score) as f64)
}

fn report_from_scores(split: &str, rows: Vec<SampleScore>) -> Result<EvalReport> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == Label::Anomalous).collect();
    let overall = auroc(&scores, &labels)?;
    let ap = average_precision(&scores, &labels)?;
    let f1 = f1_max(&scores, &labels)?;

    let mut per_kind = BTreeMap::new();
    for kind in [DefectKind::Surface, DefectKind::ProcessHidden, DefectKind::Both] {
        let subset: Vec<&SampleScore> = rows
            .iter()
            .filter(|r| r.kind == kind || r.kind == DefectKind::None)
            .collect();
        if subset.iter().any(|r| r.kind == kind) {
            let s: Vec<f64> = subset.iter().map(|r| r.score).collect();
            let l: Vec<bool> = subset.iter().map(|r| r.kind == kind).collect();
            per_kind.insert(kind, auroc(&s, &l)?);
        }
    }

    for v in [overall, ap, f1].iter().chain(per_kind.values()) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::Eval(format!("metric out of range: {v}")));
        }
    }
    Ok(EvalReport {
        split: split.to_string(),
        scores: rows,
        auroc: overall,
        ap,
        f1_max: f1,
        per_kind_auroc: per_kind,
        latency: None,
    })
}

/// Evaluates a trained state over a labeled split, in manifest order.
pub fn evaluate(state: &ModelState, ds: &Dataset) -> Result<EvalReport> {
    let pl = build_pipeline(&state.cfg, 1)?;
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, state)?;
    let mut rows = Vec::with_capacity(ds.samples.len());
    for (entry, rec) in ds.manifest.entries.iter().zip(&ds.samples) {
        let score = score_sample(&mut exec, &pl, state, rec)?;
        rows.push(SampleScore {
            index: entry.index,
            label: entry.label,
            kind: entry.defect_kind,
            score,
        });
    }
    report_from_scores(&ds.manifest.split, rows)
}

/// Re-evaluates the split under increasing sensor corruption. `sigma = 0`
/// reproduces the baseline evaluation exactly.
pub fn robustness_sweep(
    state: &ModelState,
    ds: &Dataset,
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<(f64, EvalReport)>> {
    let pl = build_pipeline(&state.cfg, 1)?;
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, state)?;
    let mut out = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        let mut rows = Vec::with_capacity(ds.samples.len());
        for (i, (entry, rec)) in ds.manifest.entries.iter().zip(&ds.samples).enumerate() {
            let noise_seed = Stream::derive(seed, "robust", (si * ds.samples.len() + i) as u64)
                .next_u64();
            let corrupted = SampleRecord {
                sensor_raw: add_sensor_noise(&rec.sensor_raw, sigma, noise_seed)?,
                ..rec.clone()
            };
            let score = score_sample(&mut exec, &pl, state, &corrupted)?;
            rows.push(SampleScore {
                index: entry.index,
                label: entry.label,
                kind: entry.defect_kind,
                score,
            });
        }
        out.push((sigma, report_from_scores(&ds.manifest.split, rows)?));
    }
    Ok(out)
}

/// Renders a sweep as one text report with per-sigma metric lines.
pub fn render_sweep(sweep: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("# robustness sweep\n[sweep]\n");
    for (sigma, report) in sweep {
        let _ = writeln!(
            s,
            "sigma {} auroc {} ap {} f1_max {}",
            sigma, report.auroc, report.ap, report.f1_max
        );
    }
    s
}

/// Median end-to-end per-sample scoring latency, single-threaded, after
/// `warmup` unmeasured passes. Throughput is defined as `1000 / latency_ms`.
pub fn latency_bench(
    state: &ModelState,
    ds: &Dataset,
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    if iters < 10 {
        return Err(Error::Eval(format!("benchmark needs >= 10 iters, got {iters}")));
    }
    if ds.samples.is_empty() {
        return Err(Error::Eval("benchmark needs at least one sample".into()));
    }
    let pl = build_pipeline(&state.cfg, 1)?;
    let mut exec = Exec::<f32>::new(&pl.graph);
    bind_state(&mut exec, &pl, state)?;
    let pick = |i: usize| &ds.samples[i % ds.samples.len()];
    for i in 0..warmup {
        score_sample(&mut exec, &pl, state, pick(i))?;
    }
    let mut times = Vec::with_capacity(iters);
    for i in 0..iters {
        let rec = pick(i);
        let start = Instant::now();
        score_sample(&mut exec, &pl, state, rec)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let ms = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(LatencyStats { ms_per_sample: ms, fps: 1000.0 / ms })
}
