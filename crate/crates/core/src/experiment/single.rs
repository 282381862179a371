//! One training config or one checkpoint at a time, outside a matrix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_file, ExperimentError};
use crate::eval::{evaluate_bins, BinMetrics, BinSpec, ResultRow};
use crate::lang::{read_dataset, sample, SampleSpec, Task};
use crate::nn::{CheckpointMeta, StackRnn};
use crate::ptb::{self, LmData};
use crate::seed::derive_seed;
use crate::train::{select_best, train, DataRef, RunRecord, SequenceData, TrainConfig, TrainError};

/// Best restart of a standalone training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRun {
    pub restart: usize,
    pub seed: u64,
    pub best_val_ppl: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub records: Vec<RunRecord>,
    pub best: BestRun,
}

/// Trains every restart of `cfg` on its data section, writing
/// `restart<i>.stk`, `runs.jsonl` and `best.json` under `out`.
pub fn train_from_config(cfg: &TrainConfig, out: &Path) -> Result<TrainOutput, ExperimentError> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("training config has no data section".into()))?;
    fs::create_dir_all(out).map_err(super::io_err(out))?;
    let runs = match data {
        DataRef::Task {
            task,
            train_range: [lo, hi],
            train_count,
            valid_count,
            seed,
        } => {
            let tr = sample(*task, &SampleSpec::new(*lo, *hi, *train_count, derive_seed(*seed, "train", &[])))?;
            let va = sample(*task, &SampleSpec::new(*lo, *hi, *valid_count, derive_seed(*seed, "valid", &[])))?;
            let spec = cfg.model.resolve(task.vocab_size()).map_err(TrainError::from)?;
            train(cfg, &spec, &SequenceData::for_task(*task, tr, va), Some(out))?
        }
        DataRef::Files { train: tp, valid: vp } => {
            let (th, tr) = read_dataset(tp)?;
            let (vh, va) = read_dataset(vp)?;
            if th.task != vh.task {
                return Err(ExperimentError::Config(format!(
                    "train split is {} but valid split is {}",
                    th.task.id(),
                    vh.task.id()
                )));
            }
            let spec = cfg.model.resolve(th.task.vocab_size()).map_err(TrainError::from)?;
            train(cfg, &spec, &SequenceData::for_task(th.task, tr, va), Some(out))?
        }
        DataRef::Ptb {
            dir,
            fraction,
            bptt,
            batch_size,
        } => {
            if !(*fraction > 0.0 && *fraction <= 1.0) {
                return Err(ExperimentError::Config(format!("fraction {fraction} outside (0, 1]")));
            }
            let corpus = ptb::load_ptb(dir)?.with_train_fraction(*fraction);
            corpus.vocab.write_json(&out.join("vocab.json"))?;
            let mut model = cfg.model.clone();
            model.embedding.get_or_insert(model.hidden_size.min(64));
            let spec = model.resolve(corpus.vocab.len()).map_err(TrainError::from)?;
            let lm = LmData {
                vocab_size: corpus.vocab.len(),
                train: corpus.train,
                valid: corpus.valid,
                bptt: *bptt,
                batch: *batch_size,
                eval_batch: 10,
            };
            ptb::train_lm(cfg, &spec, &lm, Some(out))?
        }
    };
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    write_file(&out.join("runs.jsonl"), lines.as_bytes())?;
    let b = select_best(&records)?;
    let best = BestRun {
        restart: b.restart,
        seed: b.seed,
        best_val_ppl: b.best_val_ppl,
        checkpoint: b.checkpoint.clone(),
    };
    let json = serde_json::to_string_pretty(&best).expect("best serializes");
    write_file(&out.join("best.json"), json.as_bytes())?;
    Ok(TrainOutput { records, best })
}

/// Loads a checkpoint and evaluates it on fresh strings per bin.
pub fn eval_checkpoint(
    path: &Path,
    task: Task,
    bins: &[BinSpec],
    per_bin: usize,
    seed: u64,
) -> Result<(CheckpointMeta, Vec<BinMetrics>), ExperimentError> {
    let (model, meta) = StackRnn::<f32>::load_checkpoint(path).map_err(TrainError::from)?;
    let m = evaluate_bins(&model, task, bins, per_bin, seed)?;
    Ok((meta, m))
}

/// Result rows for bins scored by a checkpoint.
pub fn checkpoint_rows(task: Task, meta: &CheckpointMeta, restart: usize, bins: &[BinMetrics]) -> Vec<ResultRow> {
    bins.iter()
        .map(|b| ResultRow {
            task: task.id().to_string(),
            model: meta.spec.name.clone(),
            mode: meta.mode.short().to_string(),
            restart,
            bin: b.label.clone(),
            acc: b.accuracy,
            ppl: b.perplexity,
            n_seq: b.n_seq,
            n_det: b.n_det,
        })
        .collect()
}
