//! Thin command-line front end over the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use procres::data::manifest::{load_dataset, Dataset};
use procres::data::synth::generate_dataset;
use procres::error::{Error, Result};
use procres::harness::checkpoint::{load_checkpoint, save_checkpoint};
use procres::harness::config::{load_config, render_config, RunConfig};
use procres::harness::evaluate::{evaluate, latency_bench, render_sweep, robustness_sweep};
use procres::harness::gradcheck::{run_suite, GRAD_TOLERANCE};
use procres::harness::train::train;
use procres::harness::{run_ablation, run_replicates};
use procres::model::heatmap::{heatmap, write_pgm};
use procres::model::AblationVariant;

const USAGE: &str = "\
procres <command> [options]

commands:
  gen-data  --config <file> --out <dir>
  train     --config <file> --data <train-manifest> --out <ckpt-dir>
  eval      --ckpt <dir> --data <manifest> --report <file>
  ablate    --variant <tag> --config <file> --data <train-manifest> --out <dir>
            [--replicates <n>]
  robust    --ckpt <dir> --data <manifest> --sigmas 0,0.1,0.2,0.3
            --report <file> [--seed <n>]
  bench     --ckpt <dir> --data <manifest> [--warmup <n>] [--iters <n>]
  gradcheck [--module <primitives|modulation|encoders|decoder|scoring|pipeline>]
  heatmap   --ckpt <dir> --data <manifest> --sample <id> --out <dir> [--pgm]

variants: full, reverse-mapping, plain-decoder, no-text-loss, bidirectional,
          symmetric-fusion, image, image-video, image-video-audio";

struct Args {
    flags: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Self> {
        let mut flags = BTreeMap::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let a = &argv[i];
            if !a.starts_with("--") {
                return Err(Error::Config(format!("unexpected argument '{a}'")));
            }
            let key = a.trim_start_matches("--").to_string();
            if i + 1 < argv.len() && !argv[i + 1].starts_with("--") {
                flags.insert(key, argv[i + 1].clone());
                i += 2;
            } else {
                switches.push(key);
                i += 1;
            }
        }
        Ok(Args { flags, switches })
    }

    fn need(&self, key: &str) -> Result<&str> {
        self.flags
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Config(format!("missing required option --{key}")))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags.get(key).map(|s| s.as_str())
    }

    fn has(&self, key: &str) -> bool {
        self.switches.iter().any(|s| s == key)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("--{key}: cannot parse '{v}'"))),
        }
    }
}

fn load_config_arg(args: &Args) -> Result<RunConfig> {
    match args.get("config") {
        Some(path) => load_config(Path::new(path)),
        None => Ok(RunConfig::default()),
    }
}

/// Loads the train dataset plus the sibling splits its manifest points at.
fn load_train_with_siblings(manifest: &Path) -> Result<(Dataset, Option<Dataset>, Option<Dataset>)> {
    let train_ds = load_dataset(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let val = match &train_ds.manifest.val_manifest {
        Some(rel) => Some(load_dataset(&dir.join(rel))?),
        None => None,
    };
    let test = match &train_ds.manifest.test_manifest {
        Some(rel) => Some(load_dataset(&dir.join(rel))?),
        None => None,
    };
    Ok((train_ds, val, test))
}

fn cmd_gen_data(args: &Args) -> Result<()> {
    let cfg = load_config_arg(args)?;
    let out = PathBuf::from(args.need("out")?);
    let gen = generate_dataset(&cfg.synth, &out)?;
    println!("wrote train manifest: {}", gen.train_manifest.display());
    println!("wrote val manifest:   {}", gen.val_manifest.display());
    println!("wrote test manifest:  {}", gen.test_manifest.display());
    println!("wrote text anchor:    {}", gen.text_anchor.display());
    Ok(())
}

fn cmd_train(args: &Args) -> Result<()> {
    let cfg = load_config_arg(args)?;
    let variant = AblationVariant::parse(args.get("variant").unwrap_or("full"))?;
    let (train_ds, val_ds, _) = load_train_with_siblings(Path::new(args.need("data")?))?;
    let out = PathBuf::from(args.need("out")?);
    let trained = train(&cfg, variant, &train_ds, val_ds.as_ref())?;
    let snapshot = render_config(&cfg);
    save_checkpoint(
        &out.join("final"),
        &trained.final_state,
        Some(&snapshot),
        Some(&trained.trace),
    )?;
    save_checkpoint(
        &out.join("best"),
        &trained.best_state,
        Some(&snapshot),
        Some(&trained.trace),
    )?;
    let last = trained.trace.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final loss {}, best epoch {}); checkpoints in {}",
        trained.trace.len(),
        last.train_loss,
        trained.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let state = load_checkpoint(Path::new(args.need("ckpt")?))?;
    let ds = load_dataset(Path::new(args.need("data")?))?;
    let report = evaluate(&state, &ds)?;
    let path = PathBuf::from(args.need("report")?);
    std::fs::write(&path, report.render())?;
    println!(
        "auroc {} ap {} f1_max {} -> {}",
        report.auroc,
        report.ap,
        report.f1_max,
        path.display()
    );
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<()> {
    let cfg = load_config_arg(args)?;
    let variant = AblationVariant::parse(args.need("variant")?)?;
    let (train_ds, val_ds, test_ds) = load_train_with_siblings(Path::new(args.need("data")?))?;
    let test_ds = test_ds.ok_or_else(|| {
        Error::Config("train manifest has no test_manifest pointer".into())
    })?;
    let out = PathBuf::from(args.need("out")?);
    std::fs::create_dir_all(&out)?;
    let replicates: usize = args.parsed("replicates", 1)?;
    if replicates <= 1 {
        let outcome = run_ablation(variant, &cfg, &train_ds, val_ds.as_ref(), &test_ds)?;
        let snapshot = render_config(&cfg);
        save_checkpoint(
            &out.join("best"),
            &outcome.trained.best_state,
            Some(&snapshot),
            Some(&outcome.trained.trace),
        )?;
        let report_path = out.join("report.txt");
        std::fs::write(&report_path, outcome.report.render())?;
        println!(
            "{}: auroc {} ap {} f1_max {} -> {}",
            variant.tag(),
            outcome.report.auroc,
            outcome.report.ap,
            outcome.report.f1_max,
            report_path.display()
        );
    } else {
        let summary = run_replicates(
            variant,
            &cfg,
            &train_ds,
            val_ds.as_ref(),
            &test_ds,
            replicates,
        )?;
        for (seed, report) in summary.seeds.iter().zip(&summary.reports) {
            let path = out.join(format!("report_seed{seed}.txt"));
            std::fs::write(&path, report.render())?;
        }
        let mut text = String::from("# replicate summary\n[metrics]\n");
        text.push_str(&format!("replicates = {}\n", summary.reports.len()));
        text.push_str(&format!("mean_auroc = {}\n", summary.mean_auroc));
        text.push_str(&format!("mean_ap = {}\n", summary.mean_ap));
        text.push_str(&format!("mean_f1_max = {}\n", summary.mean_f1_max));
        std::fs::write(out.join("summary.txt"), &text)?;
        println!(
            "{} over {} replicates: mean auroc {} ap {} f1_max {}",
            variant.tag(),
            summary.reports.len(),
            summary.mean_auroc,
            summary.mean_ap,
            summary.mean_f1_max
        );
    }
    Ok(())
}

fn cmd_robust(args: &Args) -> Result<()> {
    let state = load_checkpoint(Path::new(args.need("ckpt")?))?;
    let ds = load_dataset(Path::new(args.need("data")?))?;
    let sigmas: Vec<f64> = args
        .need("sigmas")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad sigma '{s}'")))
        })
        .collect::<Result<_>>()?;
    let seed: u64 = args.parsed("seed", 42)?;
    let sweep = robustness_sweep(&state, &ds, &sigmas, seed)?;
    for (sigma, report) in &sweep {
        println!("sigma {sigma}: auroc {}", report.auroc);
    }
    if let Some(path) = args.get("report") {
        std::fs::write(path, render_sweep(&sweep))?;
    }
    Ok(())
}

fn cmd_bench(args: &Args) -> Result<()> {
    let state = load_checkpoint(Path::new(args.need("ckpt")?))?;
    let ds = load_dataset(Path::new(args.need("data")?))?;
    let warmup: usize = args.parsed("warmup", 10)?;
    let iters: usize = args.parsed("iters", 51)?;
    let stats = latency_bench(&state, &ds, warmup, iters)?;
    println!(
        "median latency {} ms/sample, throughput {} samples/s",
        stats.ms_per_sample, stats.fps
    );
    if let Some(path) = args.get("report") {
        let text = format!(
            "# latency benchmark\n[metrics]\nlatency_ms = {}\nthroughput_sps = {}\n",
            stats.ms_per_sample, stats.fps
        );
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<()> {
    let outcomes = run_suite(args.get("module"))?;
    let mut worst = 0.0f64;
    for o in &outcomes {
        let status = if o.max_rel_error < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("{status:4} {:<32} {:.3e}", o.name, o.max_rel_error);
        worst = worst.max(o.max_rel_error);
    }
    if worst >= GRAD_TOLERANCE {
        return Err(Error::GradCheck(format!(
            "worst relative error {worst:.3e} exceeds {GRAD_TOLERANCE:.0e}"
        )));
    }
    println!("all gradients within {GRAD_TOLERANCE:.0e}");
    Ok(())
}

fn cmd_heatmap(args: &Args) -> Result<()> {
    let state = load_checkpoint(Path::new(args.need("ckpt")?))?;
    let ds = load_dataset(Path::new(args.need("data")?))?;
    let sample: usize = args.parsed("sample", usize::MAX)?;
    let pos = ds
        .manifest
        .entries
        .iter()
        .position(|e| e.index == sample)
        .ok_or_else(|| Error::Config(format!("sample {sample} not in manifest")))?;
    let out = PathBuf::from(args.need("out")?);
    std::fs::create_dir_all(&out)?;
    let maps = heatmap(&state, &ds.samples[pos])?;
    for (m, map) in maps.iter().enumerate() {
        let base = out.join(format!("heatmap_angle{m}"));
        procres::data::tensor_file::write_tensor(&base.with_extension("phmt"), map)?;
        if args.has("pgm") {
            write_pgm(&base.with_extension("pgm"), map)?;
        }
    }
    println!("wrote {} angle maps to {}", maps.len(), out.display());
    Ok(())
}

fn run() -> Result<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        return Err(Error::Config(format!("no command given\n{USAGE}")));
    };
    let args = Args::parse(&argv[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(&args),
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "ablate" => cmd_ablate(&args),
        "robust" => cmd_robust(&args),
        "bench" => cmd_bench(&args),
        "gradcheck" => cmd_gradcheck(&args),
        "heatmap" => cmd_heatmap(&args),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
