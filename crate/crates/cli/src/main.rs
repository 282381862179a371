use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stacklab::eval::{default_bins, write_results, BinSpec};
use stacklab::experiment::{
    checkpoint_rows, eval_checkpoint, report_file, run_experiment, stability_audit, train_from_config,
    AuditInputs, ExperimentConfig, ExperimentError, StabilitySettings,
};
use stacklab::lang::{sample, write_dataset, DatasetHeader, SampleSpec, Task};
use stacklab::nn::StackRnn;
use stacklab::ptb;
use stacklab::seed::derive_seed;
use stacklab::stability::{FitOptions, LossCurve, ReportInputs, StabilityReport};
use stacklab::train::{DataRef, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "stacklab", version, about = "Stack-augmented RNN experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample task strings into a dataset file.
    Generate {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 40)]
        min: usize,
        #[arg(long, default_value_t = 80)]
        max: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every restart of one training config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "train-out")]
        out: PathBuf,
        /// Leading fraction of a word-level train split.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Score a checkpoint per length bin, or on a corpus for `--task ptb`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Comma-separated `label=lo-hi` or `lo-hi` bins.
        #[arg(long)]
        bins: Option<String>,
        #[arg(long, default_value_t = 200)]
        per_bin: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus directory for `--task ptb`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append rows to this results CSV.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        restart: usize,
    },
    /// Length-stability report for a checkpoint or a loss-curve CSV.
    Stability {
        #[arg(long, conflicts_with = "curve", required_unless_present = "curve")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        task: Option<String>,
        /// CSV with `length,loss,stderr,n` rows.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Comma-separated sweep lengths.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long, default_value_t = 50)]
        per_length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment matrix; completed cells are skipped on rerun.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        bins: Option<String>,
    },
    /// Markdown tables from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Bad user input; exits with status 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid<E: std::fmt::Display>(e: E) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

fn parse_task(s: &str) -> Result<Task> {
    Task::parse(s).map_err(invalid)
}

fn parse_bins(s: Option<&str>) -> Result<Vec<BinSpec>> {
    match s {
        Some(s) => BinSpec::parse_list(s).map_err(invalid),
        None => Ok(default_bins()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn generate(task: &str, min: usize, max: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    let task = parse_task(task)?;
    let spec = SampleSpec::new(min, max, count, seed);
    let strings = sample(task, &spec).map_err(invalid)?;
    write_dataset(out, &DatasetHeader::new(task, spec), &strings)?;
    println!("wrote {} strings to {}", strings.len(), out.display());
    Ok(())
}

fn train_cmd(config: &Path, seed: Option<u64>, workers: Option<usize>, out: &Path, fraction: Option<f64>) -> Result<()> {
    let mut cfg = TrainConfig::from_json_file(config)?;
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(f) = fraction {
        match &mut cfg.data {
            Some(DataRef::Ptb { fraction, .. }) => *fraction = f,
            _ => return Err(invalid("--fraction applies only to word-level data")),
        }
    }
    let res = train_from_config(&cfg, out)?;
    for r in &res.records {
        match &r.failed {
            Some(why) => println!("restart {}: failed ({why})", r.restart),
            None => println!("restart {}: best valid ppl {:.4}", r.restart, r.best_val_ppl),
        }
    }
    println!("best restart {} (valid ppl {:.4})", res.best.restart, res.best.best_val_ppl);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    task: &str,
    bins: Option<&str>,
    per_bin: usize,
    seed: u64,
    data: Option<&Path>,
    results: Option<&Path>,
    restart: usize,
) -> Result<()> {
    if task == "ptb" {
        let dir = data.ok_or_else(|| invalid("--task ptb needs --data <corpus dir>"))?;
        let corpus = ptb::load_ptb(dir)?;
        let (model, _) = StackRnn::<f32>::load_checkpoint(checkpoint)?;
        for (name, ids) in [("valid", &corpus.valid), ("test", &corpus.test)] {
            println!("{name} ppl {:.4}", ptb::eval_ppl(&model, ids, 10, 35)?);
        }
        return Ok(());
    }
    let task = parse_task(task)?;
    let bins = parse_bins(bins)?;
    let (meta, metrics) = eval_checkpoint(checkpoint, task, &bins, per_bin, seed)?;
    for m in &metrics {
        let acc = m.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{} [{}, {}]: acc {acc} ppl {:.4} ({} strings)", m.label, m.lo, m.hi, m.perplexity, m.n_seq);
    }
    if let Some(path) = results {
        write_results(path, &checkpoint_rows(task, &meta, restart, &metrics))?;
    }
    Ok(())
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| invalid(format!("bad length {p:?}"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn stability_cmd(
    checkpoint: Option<&Path>,
    task: Option<&str>,
    curve: Option<&Path>,
    lengths: Option<&str>,
    per_length: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let report = if let Some(path) = curve {
        let c = LossCurve::from_csv(path).map_err(invalid)?;
        let opts = FitOptions {
            seed,
            ..FitOptions::default()
        };
        StabilityReport::assess(&c, &opts, &ReportInputs::default()).map_err(invalid)?
    } else {
        let path = checkpoint.expect("clap requires a checkpoint without a curve");
        let task = parse_task(task.ok_or_else(|| invalid("--checkpoint needs --task"))?)?;
        let mut settings = StabilitySettings {
            per_length,
            ..StabilitySettings::default()
        };
        if let Some(l) = lengths {
            settings.lengths = parse_lengths(l)?;
        }
        let (model, meta) = StackRnn::<f32>::load_checkpoint(path)?;
        let probe = sample(task, &SampleSpec::new(40, 100, 200, derive_seed(seed, "probe-strings", &[])))?;
        let a = AuditInputs {
            sweep_seed: derive_seed(seed, "sweep", &[]),
            reference_seed: meta.init_seed,
            probe_seed: derive_seed(seed, "probe", &[]),
            probe: &probe,
            bins: None,
        };
        let (report, curve) = stability_audit(&model, task, &settings, &a)?;
        for p in &curve.points {
            eprintln!("T={} loss {:.5} (se {:.5})", p.length, p.loss, p.stderr);
        }
        report
    };
    emit(out, &format!("{}\n", report.to_json()))
}

fn run_cmd(
    config: &Path,
    seed: Option<u64>,
    workers: usize,
    out: Option<&Path>,
    fraction: Option<f64>,
    bins: Option<&str>,
) -> Result<i32> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(f) = fraction {
        cfg.ptb.fraction = f;
    }
    if bins.is_some() {
        cfg.bins = parse_bins(bins)?;
    }
    cfg.validate()?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let summary = run_experiment(&cfg, &out, workers)?;
    for c in &summary.cells {
        let how = if c.resumed { " (already done)" } else { "" };
        match &c.failure {
            Some(why) => println!("{} [{}]: failed{how}: {why}", c.id, c.hash),
            None => println!("{} [{}]: done{how}", c.id, c.hash),
        }
    }
    println!("results in {}", out.join("results.csv").display());
    Ok(summary.exit_code())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Generate {
            task,
            min,
            max,
            count,
            seed,
            out,
        } => generate(&task, min, max, count, seed, &out)?,
        Cmd::Train {
            config,
            seed,
            workers,
            out,
            fraction,
        } => train_cmd(&config, seed, workers, &out, fraction)?,
        Cmd::Eval {
            checkpoint,
            task,
            bins,
            per_bin,
            seed,
            data,
            results,
            restart,
        } => eval_cmd(
            &checkpoint,
            &task,
            bins.as_deref(),
            per_bin,
            seed,
            data.as_deref(),
            results.as_deref(),
            restart,
        )?,
        Cmd::Stability {
            checkpoint,
            task,
            curve,
            lengths,
            per_length,
            seed,
            out,
        } => stability_cmd(
            checkpoint.as_deref(),
            task.as_deref(),
            curve.as_deref(),
            lengths.as_deref(),
            per_length,
            seed,
            out.as_deref(),
        )?,
        Cmd::Run {
            config,
            seed,
            workers,
            out,
            fraction,
            bins,
        } => return run_cmd(&config, seed, workers, out.as_deref(), fraction, bins.as_deref()),
        Cmd::Report { results, out } => {
            if !results.exists() {
                bail!(Invalid(format!("{} does not exist", results.display())));
            }
            let md = report_file(&results)?;
            emit(out.as_deref(), &md)?;
            if md.is_empty() {
                eprintln!("no rows in {}", results.display());
            }
        }
    }
    Ok(0)
}

fn is_invalid(e: &anyhow::Error) -> bool {
    e.downcast_ref::<Invalid>().is_some()
        || e.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_invalid_input)
        || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_invalid(&e) { 2 } else { 1 })
        }
    }
}
