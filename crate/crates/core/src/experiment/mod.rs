//! Experiment matrices: cells of (task or ptb, model, freeze mode) trained
//! over restarts, evaluated per bin, audited for length stability, and
//! written as an append-only results CSV plus per-cell artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! results.csv        one row per (cell, restart, bin), cells in config order
//! runs.jsonl         one RunRecord per restart
//! summary.csv        best restart per cell
//! ordering.json      freeze-mode loss ordering per (task, model)
//! manifest.json      seeds, statuses and content hashes
//! progress.jsonl     cells already appended to results.csv
//! cells/<hash>/      checkpoints, rows, stability report, done marker
//! ```

mod report;
mod single;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use report::{render_report, report_file};
pub use single::{checkpoint_rows, eval_checkpoint, train_from_config, BestRun, TrainOutput};

use crate::eval::{
    default_bins, evaluate_bins, evaluate_strings, read_results, sample_bin, write_results, BinMetrics, BinSpec,
    EvalError, ResultRow, RESULTS_HEADER,
};
use crate::lang::{sample, LangError, SampleSpec, Task};
use crate::nn::{FreezeMode, StackRnn};
use crate::ptb::synthetic::{write_corpus, SyntheticSpec};
use crate::ptb::{self, LmData, PtbError};
use crate::seed::derive_seed;
use crate::stability::{
    default_sweep, ordering_check, perturbation_robustness, stack_action_agreement, BinSummary, FitOptions,
    LossCurve, OrderingCheck, ReportInputs, StabilityError, StabilityReport, Verdict,
};
use crate::train::{select_best, train, ModelRef, RunRecord, SequenceData, TrainConfig, TrainError, TrainedRun};

pub const PTB_TASK: &str = "ptb";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Ptb(#[from] PtbError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Lang(#[from] LangError),
}

impl ExperimentError {
    /// Whether the error comes from the user's input rather than the run.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
            || matches!(self, ExperimentError::Train(TrainError::Config(_)))
            || matches!(self, ExperimentError::Eval(EvalError::BadBin(_)))
            || matches!(self, ExperimentError::Eval(EvalError::Results { .. }))
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// A task id or `ptb`.
    pub task: String,
    pub model: String,
    pub mode: FreezeMode,
    /// Overrides the shared hidden size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
}

impl CellSpec {
    pub fn id(&self) -> String {
        let h = self.hidden_size.map(|h| format!("-{h}")).unwrap_or_default();
        format!("{}/{}{h}/{}", self.task, self.model, self.mode.short())
    }

    fn lang_task(&self) -> Result<Option<Task>, ExperimentError> {
        if self.task == PTB_TASK {
            return Ok(None);
        }
        Task::parse(&self.task)
            .map(Some)
            .map_err(|e| ExperimentError::Config(format!("cell {}: {e}", self.id())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskData {
    pub train_range: [usize; 2],
    pub train_count: usize,
    pub valid_count: usize,
}

impl Default for TaskData {
    fn default() -> Self {
        Self {
            train_range: [40, 80],
            train_count: 10_000,
            valid_count: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtbSettings {
    /// Corpus directory; `PTB_DIR` or a generated stand-in when absent.
    pub dir: Option<PathBuf>,
    pub fraction: f64,
    pub bptt: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
}

impl Default for PtbSettings {
    fn default() -> Self {
        Self {
            dir: None,
            fraction: 1.0,
            bptt: 35,
            batch_size: 32,
            eval_batch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilitySettings {
    pub enabled: bool,
    pub lengths: Vec<usize>,
    pub per_length: usize,
    /// Symbol flips per string for the perturbation probe.
    pub flips: usize,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        Self {
            enabled: true,
            lengths: default_sweep(),
            per_length: 50,
            flips: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub cells: Vec<CellSpec>,
    /// Shared training settings; model, mode and seed are set per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_bins")]
    pub bins: Vec<BinSpec>,
    #[serde(default)]
    pub data: TaskData,
    #[serde(default = "default_eval_per_bin")]
    pub eval_per_bin: usize,
    #[serde(default)]
    pub ptb: PtbSettings,
    #[serde(default)]
    pub stability: StabilitySettings,
}

fn default_eval_per_bin() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.cells.is_empty() {
            return bad("no cells".into());
        }
        self.train.validate()?;
        if self.bins.is_empty() || self.eval_per_bin == 0 {
            return bad("need at least one bin and one string per bin".into());
        }
        let [lo, hi] = self.data.train_range;
        if lo > hi || self.data.train_count == 0 || self.data.valid_count == 0 {
            return bad(format!("bad task data settings {:?}", self.data));
        }
        let mut seen = std::collections::HashSet::new();
        for cell in &self.cells {
            if !seen.insert(cell.id()) {
                return bad(format!("duplicate cell {}", cell.id()));
            }
            let vocab = match cell.lang_task()? {
                Some(t) => t.vocab_size(),
                None => {
                    if !(self.ptb.fraction > 0.0 && self.ptb.fraction <= 1.0) {
                        return bad(format!("ptb fraction {} outside (0, 1]", self.ptb.fraction));
                    }
                    10
                }
            };
            self.model_ref(cell)
                .resolve(vocab)
                .map_err(|e| ExperimentError::Config(format!("cell {}: {e}", cell.id())))?;
        }
        if self.stability.enabled && self.stability.lengths.len() < 4 {
            return bad("stability sweep needs at least 4 lengths".into());
        }
        Ok(())
    }

    fn model_ref(&self, cell: &CellSpec) -> ModelRef {
        let hidden = cell.hidden_size.unwrap_or(self.train.model.hidden_size);
        ModelRef {
            name: cell.model.clone(),
            hidden_size: hidden,
            embedding: (cell.task == PTB_TASK).then(|| hidden.min(64)),
        }
    }

    /// Base seed of a cell; restart `i` uses `base + i`.
    pub fn cell_seed(&self, cell: &CellSpec) -> u64 {
        derive_seed(self.master_seed, &format!("cell:{}", cell.id()), &[])
    }

    /// Seed of a task's `train`, `valid` or `test` strings; shared by every
    /// cell on that task.
    pub fn split_seed(&self, task: Task, split: &str) -> u64 {
        derive_seed(self.master_seed, &format!("{split}:{}", task.id()), &[])
    }

    fn cell_train_config(&self, cell: &CellSpec) -> TrainConfig {
        TrainConfig {
            model: self.model_ref(cell),
            mode: cell.mode,
            base_seed: self.cell_seed(cell),
            data: None,
            workers: 0,
            ..self.train.clone()
        }
    }

    /// Content hash of everything that determines a cell's outputs.
    pub fn cell_hash(&self, cell: &CellSpec) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            version: &'a str,
            master_seed: u64,
            cell: &'a CellSpec,
            train: TrainConfig,
            bins: &'a [BinSpec],
            data: Option<&'a TaskData>,
            eval_per_bin: usize,
            ptb: Option<&'a PtbSettings>,
            stability: &'a StabilitySettings,
        }
        let is_ptb = cell.task == PTB_TASK;
        let key = Key {
            version: env!("CARGO_PKG_VERSION"),
            master_seed: self.master_seed,
            cell,
            train: self.cell_train_config(cell),
            bins: &self.bins,
            data: (!is_ptb).then_some(&self.data),
            eval_per_bin: self.eval_per_bin,
            ptb: is_ptb.then_some(&self.ptb),
            stability: &self.stability,
        };
        let json = serde_json::to_vec(&key).expect("key serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Done,
    Failed,
}

/// Written last in a cell directory; its presence marks the cell complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDone {
    pub id: String,
    pub hash: String,
    pub status: CellStatus,
    pub base_seed: u64,
    pub best_restart: Option<usize>,
    pub best_val_ppl: Option<f64>,
    pub failure: Option<String>,
    pub verdict: Option<Verdict>,
    /// Mean cross-entropy of the best restart on the first bin.
    pub short_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub id: String,
    pub hash: String,
    /// Completed in an earlier invocation.
    pub resumed: bool,
    pub status: CellStatus,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }

    /// 0 when every cell completed, 1 on partial failure.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed() > 0)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Strings for a stability sweep point: lengths in `[t, t + 6]`.
fn sweep_bins(lengths: &[usize]) -> Vec<BinSpec> {
    lengths.iter().map(|&t| BinSpec::new(&format!("T{t}"), t, t + 6)).collect()
}

fn rows_for(cell: &CellSpec, restart: usize, bins: &[BinMetrics]) -> Vec<ResultRow> {
    bins.iter()
        .map(|b| ResultRow {
            task: cell.task.clone(),
            model: cell.model.clone(),
            mode: cell.mode.short().to_string(),
            restart,
            bin: b.label.clone(),
            acc: b.accuracy,
            ppl: b.perplexity,
            n_seq: b.n_seq,
            n_det: b.n_det,
        })
        .collect()
}

struct CellResult {
    done: CellDone,
    rows: Vec<ResultRow>,
    records: Vec<RunRecord>,
    stability: Option<StabilityReport>,
    curve: Option<LossCurve>,
}

fn failed_result(cfg: &ExperimentConfig, cell: &CellSpec, hash: &str, records: Vec<RunRecord>, msg: String) -> CellResult {
    CellResult {
        done: CellDone {
            id: cell.id(),
            hash: hash.to_string(),
            status: CellStatus::Failed,
            base_seed: cfg.cell_seed(cell),
            best_restart: None,
            best_val_ppl: None,
            failure: Some(msg),
            verdict: None,
            short_loss: None,
        },
        rows: Vec::new(),
        records,
        stability: None,
        curve: None,
    }
}

fn run_lang_cell(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    task: Task,
    hash: &str,
    dir: &Path,
) -> Result<CellResult, ExperimentError> {
    let tc = cfg.cell_train_config(cell);
    let spec = tc.model.resolve(task.vocab_size()).map_err(TrainError::from)?;
    let [lo, hi] = cfg.data.train_range;
    let data_seed = |split: &str| cfg.split_seed(task, split);
    let train_set = sample(task, &SampleSpec::new(lo, hi, cfg.data.train_count, data_seed("train")))?;
    let valid_set = sample(task, &SampleSpec::new(lo, hi, cfg.data.valid_count, data_seed("valid")))?;
    let data = SequenceData::for_task(task, train_set, valid_set);
    let runs: Vec<TrainedRun> = train(&tc, &spec, &data, Some(dir))?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();

    let test_seed = data_seed("test");
    let mut rows = Vec::new();
    let mut metrics: Vec<Option<Vec<BinMetrics>>> = Vec::new();
    for run in &runs {
        if run.record.best_epoch.is_none() {
            metrics.push(None);
            continue;
        }
        let m = evaluate_bins(&run.model, task, &cfg.bins, cfg.eval_per_bin, test_seed)?;
        rows.extend(rows_for(cell, run.record.restart, &m));
        metrics.push(Some(m));
    }
    let best = match select_best(&records) {
        Ok(b) => b.restart,
        Err(e) => return Ok(failed_result(cfg, cell, hash, records, e.to_string())),
    };
    let best_model = &runs[best].model;
    let best_bins = metrics[best].as_ref().expect("best restart was evaluated");

    let (stability, curve) = if cfg.stability.enabled {
        let (report, curve) = stability_for(cfg, cell, task, best_model, tc.base_seed, best_bins, test_seed)?;
        (Some(report), Some(curve))
    } else {
        (None, None)
    };
    Ok(CellResult {
        done: CellDone {
            id: cell.id(),
            hash: hash.to_string(),
            status: CellStatus::Done,
            base_seed: tc.base_seed,
            best_restart: Some(best),
            best_val_ppl: Some(records[best].best_val_ppl),
            failure: None,
            verdict: stability.as_ref().map(|s| s.verdict),
            short_loss: best_bins.first().map(|b| b.mean_ce()),
        },
        rows,
        records,
        stability,
        curve,
    })
}

/// Seeds and strings for a stability audit.
#[derive(Debug, Clone)]
pub struct AuditInputs<'a> {
    /// Seeds the sweep strings.
    pub sweep_seed: u64,
    /// Initialises the untrained reference model.
    pub reference_seed: u64,
    /// Seeds perturbation flips, action tie-breaks and the fit bootstrap.
    pub probe_seed: u64,
    /// Strings for the perturbation and stack-action probes.
    pub probe: &'a [Vec<usize>],
    /// Evaluation bins for the degradation check; the sweep ends otherwise.
    pub bins: Option<&'a [BinMetrics]>,
}

/// Loss curve of `model` over the sweep lengths and the stability report
/// built from it. The reference curve is an untrained model of the same
/// architecture on the same strings.
pub fn stability_audit(
    model: &StackRnn<f32>,
    task: Task,
    settings: &StabilitySettings,
    a: &AuditInputs,
) -> Result<(StabilityReport, LossCurve), ExperimentError> {
    let sweep = sweep_bins(&settings.lengths);
    let untrained = StackRnn::<f32>::new(model.spec().clone(), a.reference_seed).map_err(TrainError::from)?;
    let mut trained_m = Vec::with_capacity(sweep.len());
    let mut random_m = Vec::with_capacity(sweep.len());
    for (i, bin) in sweep.iter().enumerate() {
        let strings = sample_bin(task, bin, settings.per_length, a.sweep_seed, i)?;
        trained_m.push(evaluate_strings(model, task, bin, &strings)?);
        random_m.push(evaluate_strings(&untrained, task, bin, &strings)?);
    }
    let curve = LossCurve::from_bins(&trained_m)?;
    let reference = LossCurve::from_bins(&random_m)?;
    let perturbation = perturbation_robustness(model, task, a.probe, settings.flips, a.probe_seed).ok();
    let action_agreement = if model.has_stack() && task.reference_automaton().is_some() {
        stack_action_agreement(model, task, a.probe, a.probe_seed).ok()
    } else {
        None
    };
    let (short, long) = match a.bins {
        Some(b) => (b.first(), b.last()),
        None => (trained_m.first(), trained_m.last()),
    };
    let inputs = ReportInputs {
        short: short.map(BinSummary::from),
        long: long.map(BinSummary::from),
        reference: Some(reference),
        comparison: None,
        perturbation,
        action_agreement,
    };
    let opts = FitOptions {
        seed: a.probe_seed,
        ..FitOptions::default()
    };
    let report = StabilityReport::assess(&curve, &opts, &inputs)?;
    Ok((report, curve))
}

fn stability_for(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    task: Task,
    model: &StackRnn<f32>,
    init_seed: u64,
    bins: &[BinMetrics],
    test_seed: u64,
) -> Result<(StabilityReport, LossCurve), ExperimentError> {
    let probe = sample_bin(task, &cfg.bins[0], cfg.eval_per_bin, test_seed, 0)?;
    let a = AuditInputs {
        sweep_seed: cfg.split_seed(task, "sweep"),
        reference_seed: init_seed,
        probe_seed: derive_seed(cfg.master_seed, &format!("probe:{}", cell.id()), &[]),
        probe: &probe,
        bins: Some(bins),
    };
    stability_audit(model, task, &cfg.stability, &a)
}

/// Corpus directory for PTB cells: the configured one, `PTB_DIR`, or a
/// stand-in generated once under the output directory.
pub fn ptb_corpus_dir(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, ExperimentError> {
    if let Some(d) = &cfg.ptb.dir {
        return Ok(d.clone());
    }
    if let Some(d) = std::env::var_os("PTB_DIR") {
        return Ok(PathBuf::from(d));
    }
    let dir = out.join("ptb-synthetic");
    if !dir.join("ptb.test.txt").exists() {
        write_corpus(&dir, &SyntheticSpec::default())?;
    }
    Ok(dir)
}

fn run_ptb_cell(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    hash: &str,
    dir: &Path,
    corpus: &ptb::Corpus,
) -> Result<CellResult, ExperimentError> {
    let tc = cfg.cell_train_config(cell);
    let spec = tc.model.resolve(corpus.vocab.len()).map_err(TrainError::from)?;
    let data = LmData {
        vocab_size: corpus.vocab.len(),
        train: corpus.train.clone(),
        valid: corpus.valid.clone(),
        bptt: cfg.ptb.bptt,
        batch: cfg.ptb.batch_size,
        eval_batch: cfg.ptb.eval_batch,
    };
    let runs = ptb::train_lm(&tc, &spec, &data, Some(dir))?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let mut rows = Vec::new();
    for run in runs.iter().filter(|r| r.record.best_epoch.is_some()) {
        let test_ppl = ptb::eval_ppl(&run.model, &corpus.test, cfg.ptb.eval_batch, cfg.ptb.bptt)?;
        for (bin, ppl, n) in [
            ("valid", run.record.best_val_ppl, corpus.valid.len()),
            ("test", test_ppl, corpus.test.len()),
        ] {
            rows.push(ResultRow {
                task: cell.task.clone(),
                model: cell.model.clone(),
                mode: cell.mode.short().to_string(),
                restart: run.record.restart,
                bin: bin.to_string(),
                acc: None,
                ppl,
                n_seq: n,
                n_det: 0,
            });
        }
    }
    let best = match select_best(&records) {
        Ok(b) => b.restart,
        Err(e) => return Ok(failed_result(cfg, cell, hash, records, e.to_string())),
    };
    Ok(CellResult {
        done: CellDone {
            id: cell.id(),
            hash: hash.to_string(),
            status: CellStatus::Done,
            base_seed: tc.base_seed,
            best_restart: Some(best),
            best_val_ppl: Some(records[best].best_val_ppl),
            failure: None,
            verdict: None,
            short_loss: None,
        },
        rows,
        records,
        stability: None,
        curve: None,
    })
}

fn save_cell(dir: &Path, r: &CellResult) -> Result<(), ExperimentError> {
    let rows_path = dir.join("rows.csv");
    let _ = fs::remove_file(&rows_path);
    write_results(&rows_path, &r.rows)?;
    let mut runs = String::new();
    for rec in &r.records {
        runs.push_str(&serde_json::to_string(rec).expect("record serializes"));
        runs.push('\n');
    }
    write_file(&dir.join("runs.jsonl"), runs.as_bytes())?;
    if let Some(s) = &r.stability {
        write_file(&dir.join("stability.json"), s.to_json().as_bytes())?;
    }
    if let Some(c) = &r.curve {
        c.write_csv(&dir.join("curve.csv"))?;
    }
    let done = serde_json::to_string_pretty(&r.done).expect("marker serializes");
    write_file(&dir.join("done.json"), done.as_bytes())
}

fn read_done(dir: &Path) -> Option<CellDone> {
    serde_json::from_str(&fs::read_to_string(dir.join("done.json")).ok()?).ok()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    hash: String,
    results_len: u64,
    runs_len: u64,
}

fn file_len(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

/// Drops a torn tail left by an interrupted append.
fn repair(path: &Path, len: u64) -> Result<(), ExperimentError> {
    if file_len(path) > len {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(len).map_err(io_err(path))?;
    }
    Ok(())
}

fn load_progress(out: &Path) -> Result<Vec<Progress>, ExperimentError> {
    let path = out.join("progress.jsonl");
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(Vec::new());
    };
    // An unparsable last line is a torn write of the progress log itself.
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

fn append(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

/// Appends completed cells to the shared files in config order, skipping
/// those already recorded in the progress log.
fn append_cells(out: &Path, order: &[(String, PathBuf)]) -> Result<(), ExperimentError> {
    let results = out.join("results.csv");
    let runs = out.join("runs.jsonl");
    let progress = load_progress(out)?;
    match progress.last() {
        Some(p) => {
            repair(&results, p.results_len)?;
            repair(&runs, p.runs_len)?;
        }
        None => {
            if file_len(&results) > 0 {
                return Err(ExperimentError::Config(format!(
                    "{} exists without a progress log; use a fresh output directory",
                    results.display()
                )));
            }
            let _ = fs::remove_file(&runs);
        }
    }
    let appended: std::collections::HashSet<String> = progress.into_iter().map(|p| p.hash).collect();
    for (hash, dir) in order {
        if appended.contains(hash) || !dir.join("done.json").exists() {
            continue;
        }
        let text = fs::read_to_string(dir.join("rows.csv")).map_err(io_err(dir))?;
        let mut body: String = text.lines().skip(1).flat_map(|l| [l, "\n"]).collect();
        if file_len(&results) == 0 {
            body = format!("{}\n{body}", RESULTS_HEADER.join(","));
        }
        append(&results, body.as_bytes())?;
        let runs_text = fs::read(dir.join("runs.jsonl")).map_err(io_err(dir))?;
        append(&runs, &runs_text)?;
        let p = Progress {
            hash: hash.clone(),
            results_len: file_len(&results),
            runs_len: file_len(&runs),
        };
        let line = format!("{}\n", serde_json::to_string(&p).expect("progress serializes"));
        append(&out.join("progress.jsonl"), line.as_bytes())?;
    }
    if !results.exists() {
        write_file(&results, format!("{}\n", RESULTS_HEADER.join(",")).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub model: String,
    pub mode: String,
    pub status: CellStatus,
    pub best_restart: Option<usize>,
    pub best_val_ppl: Option<f64>,
    pub verdict: Option<Verdict>,
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "model", "mode", "status", "best_restart", "best_val_ppl", "verdict"])
        .expect("in-memory write");
    for r in rows {
        let status = match r.status {
            CellStatus::Done => "done",
            CellStatus::Failed => "failed",
        };
        let verdict = r.verdict.map(|v| match v {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Inconclusive => "inconclusive",
        });
        w.write_record([
            r.task.clone(),
            r.model.clone(),
            r.mode.clone(),
            status.to_string(),
            r.best_restart.map(|b| b.to_string()).unwrap_or_default(),
            r.best_val_ppl.map(|p| p.to_string()).unwrap_or_default(),
            verdict.unwrap_or("").to_string(),
        ])
        .expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_file(path, &bytes)
}

/// Reads `summary.csv` back.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |m: String| ExperimentError::Io {
            path: path.display().to_string(),
            msg: format!("line {}: {m}", i + 2),
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let opt = |k: usize| rec.get(k).filter(|s| !s.is_empty());
        out.push(SummaryRow {
            task: rec[0].to_string(),
            model: rec[1].to_string(),
            mode: rec[2].to_string(),
            status: if &rec[3] == "done" { CellStatus::Done } else { CellStatus::Failed },
            best_restart: opt(4).map(|s| s.parse().map_err(|_| bad(format!("best_restart {s:?}")))).transpose()?,
            best_val_ppl: opt(5).map(|s| s.parse().map_err(|_| bad(format!("best_val_ppl {s:?}")))).transpose()?,
            verdict: opt(6)
                .map(|s| serde_json::from_str(&format!("\"{s}\"")).map_err(|_| bad(format!("verdict {s:?}"))))
                .transpose()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeOrdering {
    pub task: String,
    pub model: String,
    pub check: OrderingCheck,
}

/// Freeze-mode loss ordering per (task, model) with a mode-none cell.
fn orderings(cells: &[(CellSpec, CellDone)]) -> Vec<ModeOrdering> {
    let mut out = Vec::new();
    for (cell, done) in cells {
        if cell.mode != FreezeMode::None || cell.task == PTB_TASK {
            continue;
        }
        let (Some(v), Some(full)) = (done.verdict, done.short_loss) else {
            continue;
        };
        let frozen: Vec<(String, f64)> = cells
            .iter()
            .filter(|(c, _)| c.task == cell.task && c.model == cell.model && c.hidden_size == cell.hidden_size)
            .filter(|(c, _)| c.mode != FreezeMode::None)
            .filter_map(|(c, d)| d.short_loss.map(|l| (c.mode.short().to_string(), l)))
            .collect();
        out.push(ModeOrdering {
            task: cell.task.clone(),
            model: cell.model.clone(),
            check: ordering_check(v, full, &frozen),
        });
    }
    out
}

#[derive(Debug, Serialize)]
struct ManifestCell<'a> {
    id: &'a str,
    hash: &'a str,
    base_seed: u64,
    status: CellStatus,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'a str,
    master_seed: u64,
    config_sha256: String,
    cells: Vec<ManifestCell<'a>>,
    files: BTreeMap<String, String>,
}

/// Runs every cell of `cfg` into `out`, skipping cells completed by an
/// earlier invocation. Cells run concurrently on `workers` threads (0 for
/// all cores); the shared files are written in config order afterwards.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out.join("cells")).map_err(io_err(out))?;
    let hashes: Vec<String> = cfg.cells.iter().map(|c| cfg.cell_hash(c)).collect();
    let dirs: Vec<PathBuf> = hashes.iter().map(|h| out.join("cells").join(h)).collect();

    let corpus = if cfg.cells.iter().any(|c| c.task == PTB_TASK) {
        let dir = ptb_corpus_dir(cfg, out)?;
        let c = ptb::load_ptb(&dir)?.with_train_fraction(cfg.ptb.fraction);
        c.vocab.write_json(&out.join("vocab.json"))?;
        Some(c)
    } else {
        None
    };

    let pending: Vec<usize> = (0..cfg.cells.len()).filter(|&i| read_done(&dirs[i]).is_none()).collect();
    let run_one = |i: usize| -> (usize, Result<CellResult, ExperimentError>) {
        let cell = &cfg.cells[i];
        let dir = &dirs[i];
        if let Err(e) = fs::create_dir_all(dir) {
            return (i, Err(io_err(dir)(e)));
        }
        log::info!("cell {} ({}) starting", cell.id(), hashes[i]);
        let r = match cell.lang_task() {
            Ok(Some(task)) => run_lang_cell(cfg, cell, task, &hashes[i], dir),
            Ok(None) => run_ptb_cell(cfg, cell, &hashes[i], dir, corpus.as_ref().expect("corpus loaded")),
            Err(e) => Err(e),
        };
        let r = r.and_then(|r| save_cell(dir, &r).map(|_| r));
        (i, r)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let results: Vec<(usize, Result<CellResult, ExperimentError>)> =
        pool.install(|| pending.par_iter().map(|&i| run_one(i)).collect());

    let mut errors: BTreeMap<usize, String> = BTreeMap::new();
    for (i, r) in results {
        if let Err(e) = r {
            log::error!("cell {} failed: {e}", cfg.cells[i].id());
            errors.insert(i, e.to_string());
        }
    }

    let order: Vec<(String, PathBuf)> = hashes.iter().cloned().zip(dirs.iter().cloned()).collect();
    append_cells(out, &order)?;

    let mut outcomes = Vec::new();
    let mut finished = Vec::new();
    let mut summary = Vec::new();
    for (i, cell) in cfg.cells.iter().enumerate() {
        let done = read_done(&dirs[i]);
        let (status, failure) = match (&done, errors.get(&i)) {
            (Some(d), _) => (d.status, d.failure.clone()),
            (None, e) => (CellStatus::Failed, Some(e.cloned().unwrap_or_else(|| "not run".into()))),
        };
        summary.push(SummaryRow {
            task: cell.task.clone(),
            model: cell.model.clone(),
            mode: cell.mode.short().to_string(),
            status,
            best_restart: done.as_ref().and_then(|d| d.best_restart),
            best_val_ppl: done.as_ref().and_then(|d| d.best_val_ppl),
            verdict: done.as_ref().and_then(|d| d.verdict),
        });
        outcomes.push(CellOutcome {
            id: cell.id(),
            hash: hashes[i].clone(),
            resumed: !pending.contains(&i),
            status,
            failure,
        });
        if let Some(d) = done {
            finished.push((cell.clone(), d));
        }
    }
    write_summary(&out.join("summary.csv"), &summary)?;
    let ord = orderings(&finished);
    write_file(
        &out.join("ordering.json"),
        serde_json::to_string_pretty(&ord).expect("ordering serializes").as_bytes(),
    )?;

    let mut files = BTreeMap::new();
    for name in ["results.csv", "summary.csv", "runs.jsonl", "ordering.json", "vocab.json"] {
        let p = out.join(name);
        if p.exists() {
            files.insert(name.to_string(), sha256_file(&p)?);
        }
    }
    for (h, d) in hashes.iter().zip(&dirs) {
        for name in ["rows.csv", "stability.json", "curve.csv"] {
            let p = d.join(name);
            if p.exists() {
                files.insert(format!("cells/{h}/{name}"), sha256_file(&p)?);
            }
        }
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        master_seed: cfg.master_seed,
        config_sha256: hex::encode(Sha256::digest(serde_json::to_vec(cfg).expect("config serializes"))),
        cells: cfg
            .cells
            .iter()
            .zip(&outcomes)
            .map(|(c, o)| ManifestCell {
                id: &o.id,
                hash: &o.hash,
                base_seed: cfg.cell_seed(c),
                status: o.status,
            })
            .collect(),
        files,
    };
    write_file(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        cells: outcomes,
    })
}

/// Results rows of the whole output directory.
pub fn read_run_results(out: &Path) -> Result<Vec<ResultRow>, ExperimentError> {
    Ok(read_results(&out.join("results.csv"))?)
}
