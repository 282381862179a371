//! Training with freeze masks, gradient clipping, early stopping and
//! independent restarts.

mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{GradBuffer, Optimizer, OptimizerConfig, OptimizerKind};

use crate::eval::mean_cross_entropy;
use crate::lang::Task;
use crate::nn::{
    apply_freeze, ClassifierPolicy, FreezeMode, InputEncoding, ModelError, ModelSpec, StackRnn,
    TrainMask,
};
use crate::tensor::Graph;

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("every restart failed: {}", .0.join("; "))]
    AllFailed(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

/// Model roster name plus sizes; resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    /// Embedding size; `None` means one-hot inputs.
    #[serde(default)]
    pub embedding: Option<usize>,
}

fn default_hidden() -> usize {
    32
}

impl ModelRef {
    pub fn new(name: &str, hidden_size: usize) -> Self {
        Self {
            name: name.to_string(),
            hidden_size,
            embedding: None,
        }
    }

    pub fn resolve(&self, vocab_size: usize) -> Result<ModelSpec, ModelError> {
        let input = match self.embedding {
            Some(e) => InputEncoding::Embedding(e),
            None => InputEncoding::OneHot,
        };
        ModelSpec::from_name(&self.name, self.hidden_size, vocab_size, input)
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataRef {
    /// Freshly sampled task strings.
    Task {
        task: Task,
        #[serde(default = "default_train_range")]
        train_range: [usize; 2],
        #[serde(default = "default_train_count")]
        train_count: usize,
        #[serde(default = "default_valid_count")]
        valid_count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Dataset files written by `generate`.
    Files { train: PathBuf, valid: PathBuf },
    /// Word-level corpus directory.
    Ptb {
        dir: PathBuf,
        #[serde(default = "default_fraction")]
        fraction: f64,
        #[serde(default = "default_bptt")]
        bptt: usize,
        #[serde(default = "default_lm_batch")]
        batch_size: usize,
    },
}

fn default_train_range() -> [usize; 2] {
    [40, 80]
}
fn default_train_count() -> usize {
    10_000
}
fn default_valid_count() -> usize {
    1_000
}
fn default_fraction() -> f64 {
    1.0
}
fn default_bptt() -> usize {
    35
}
fn default_lm_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
    /// Sequences per update; the loss is averaged per symbol.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub restarts: usize,
    /// Restart `i` initialises from `base_seed + i`.
    pub base_seed: u64,
    pub mode: FreezeMode,
    pub classifier: ClassifierPolicy,
    pub model: ModelRef,
    pub data: Option<DataRef>,
    /// Worker threads for restarts; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            clip_norm: 5.0,
            batch_size: 10,
            max_epochs: 100,
            patience: 10,
            restarts: 1,
            base_seed: 0,
            mode: FreezeMode::None,
            classifier: ClassifierPolicy::AlwaysTrain,
            model: ModelRef::new("lstm", default_hidden()),
            data: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub restart: usize,
    pub seed: u64,
    /// Mode actually applied (stackless models degenerate `m` and `c`).
    pub mode: FreezeMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_ppl: f64,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub failed: Option<String>,
}

impl PartialEq for RunRecord {
    /// Wall-clock time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.restart == other.restart
            && self.seed == other.seed
            && self.mode == other.mode
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_val_ppl.to_bits() == other.best_val_ppl.to_bits()
            && self.checkpoint == other.checkpoint
            && self.failed == other.failed
    }
}

impl RunRecord {
    pub fn is_failed(&self) -> bool {
        self.failed.is_some()
    }
}

/// A finished restart: its record and the best-validation parameters.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub model: StackRnn<f32>,
}

/// Training and validation strings.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub vocab_size: usize,
    pub eos: usize,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
}

impl SequenceData {
    pub fn for_task(task: Task, train: Vec<Vec<usize>>, valid: Vec<Vec<usize>>) -> Self {
        Self {
            vocab_size: task.vocab_size(),
            eos: task.eos(),
            train,
            valid,
        }
    }
}

/// `[eos] + s` as inputs and `s + [eos]` as targets.
pub fn lm_pair(s: &[usize], eos: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(s.len() + 1);
    inputs.push(eos);
    inputs.extend_from_slice(s);
    let mut targets = s.to_vec();
    targets.push(eos);
    (inputs, targets)
}

/// Freeze mask for a model, logging when the requested mode degenerates.
pub fn mask_for(model: &StackRnn<f32>, mode: FreezeMode, policy: ClassifierPolicy) -> TrainMask {
    let eff = mode.effective(model.has_stack());
    if eff != mode {
        log::warn!(
            "mode {mode} on stackless model {} runs as {eff}",
            model.spec().name
        );
    }
    apply_freeze(&model.partition(), eff, policy)
}

/// Adds the gradient of the summed loss of one sequence to `grads`;
/// returns the summed cross-entropy.
pub fn accumulate_sequence(
    model: &StackRnn<f32>,
    mask: &TrainMask,
    inputs: &[usize],
    targets: &[usize],
    grads: &mut GradBuffer,
) -> Result<f64, ModelError> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, Some(mask))?;
    let loss = model.sequence_loss(&mut g, &b, inputs, targets)?;
    let value = g.scalar_value(loss) as f64;
    let gr = g.backward(loss)?;
    for (i, acc) in &mut grads.slots {
        if let Some(gv) = gr.get(b.ids[*i]) {
            for (a, x) in acc.iter_mut().zip(gv) {
                *a += *x as f64;
            }
        }
    }
    Ok(value)
}

/// Trains one restart. Failures (non-finite loss or activations) are
/// reported in the record rather than as errors.
pub fn train_restart(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    data: &SequenceData,
    restart: usize,
    checkpoint: Option<&Path>,
) -> Result<TrainedRun, TrainError> {
    let start = Instant::now();
    let seed = cfg.base_seed.wrapping_add(restart as u64);
    let mut model = StackRnn::<f32>::new(spec.clone(), seed)?;
    let mask = mask_for(&model, cfg.mode, cfg.classifier);
    let mut grads = GradBuffer::new(model.params(), &mask);
    let mut opt = Optimizer::new(cfg.optimizer, &grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> =
        data.train.iter().map(|s| lm_pair(s, data.eos)).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    let mut record = RunRecord {
        restart,
        seed,
        mode: mask.mode,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_ppl: f64::INFINITY,
        checkpoint: checkpoint.map(Path::to_path_buf),
        wall_clock_secs: 0.0,
        failed: None,
    };
    let mut best = model.clone();
    let mut best_ce = f64::INFINITY;
    let mut stale = 0usize;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut symbols) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut batch_symbols = 0usize;
            for &k in chunk {
                let (inp, tgt) = &pairs[k];
                match accumulate_sequence(&model, &mask, inp, tgt, &mut grads) {
                    Ok(v) if v.is_finite() => total += v,
                    Ok(v) => {
                        record.failed = Some(format!("epoch {epoch}: loss {v}"));
                        break 'epochs;
                    }
                    Err(e @ ModelError::NonFinite { .. }) => {
                        record.failed = Some(format!("epoch {epoch}: {e}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e.into()),
                }
                batch_symbols += tgt.len();
            }
            symbols += batch_symbols;
            grads.scale(1.0 / batch_symbols as f64);
            if !grads.is_finite() {
                record.failed = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            grads.clip(cfg.clip_norm);
            opt.apply(model.params_mut(), &grads);
        }
        let train_ce = total / symbols.max(1) as f64;
        let val_ce = match mean_cross_entropy(&model, &data.valid, data.eos) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                record.failed = Some(format!("epoch {epoch}: validation loss {v}"));
                break;
            }
            Err(e @ ModelError::NonFinite { .. }) => {
                record.failed = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        log::debug!("restart {restart} epoch {epoch}: train {train_ce:.4} val {val_ce:.4}");
        record.epochs.push(EpochRecord {
            epoch,
            train_ce,
            val_ce,
        });
        if val_ce < best_ce {
            best_ce = val_ce;
            best = model.clone();
            record.best_epoch = Some(epoch);
            stale = 0;
            if let Some(path) = checkpoint {
                let meta = best.checkpoint_meta(mask.mode, seed, None);
                best.save_checkpoint(path, &meta)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    record.best_val_ppl = best_ce.exp();
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainedRun {
        record,
        model: best,
    })
}

/// Runs every restart, concurrently over a pool of `cfg.workers` threads.
/// Results are ordered by restart index.
pub fn train(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    data: &SequenceData,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TrainedRun>, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(TrainError::Data("empty train or validation set".into()));
    }
    if spec.vocab_size != data.vocab_size {
        return Err(TrainError::Config(format!(
            "model vocabulary {} does not match data vocabulary {}",
            spec.vocab_size, data.vocab_size
        )));
    }
    let run = |i: usize| {
        let ck = checkpoint_dir.map(|d| d.join(format!("restart{i}.stk")));
        train_restart(cfg, spec, data, i, ck.as_deref())
    };
    let go = || (0..cfg.restarts).into_par_iter().map(run).collect();
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?
            .install(go)
    } else {
        go()
    }
}

/// Lowest best-validation perplexity among successful restarts; ties go
/// to the lowest restart index.
pub fn select_best(records: &[RunRecord]) -> Result<&RunRecord, TrainError> {
    records
        .iter()
        .filter(|r| !r.is_failed() && r.best_val_ppl.is_finite())
        .min_by(|a, b| {
            a.best_val_ppl
                .total_cmp(&b.best_val_ppl)
                .then(a.restart.cmp(&b.restart))
        })
        .ok_or_else(|| {
            TrainError::AllFailed(
                records
                    .iter()
                    .map(|r| {
                        format!(
                            "restart {}: {}",
                            r.restart,
                            r.failed.as_deref().unwrap_or("no finite validation loss")
                        )
                    })
                    .collect(),
            )
        })
}

pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(restart: usize, ppl: f64, failed: bool) -> RunRecord {
        RunRecord {
            restart,
            seed: restart as u64,
            mode: FreezeMode::None,
            epochs: vec![],
            best_epoch: Some(0),
            best_val_ppl: ppl,
            checkpoint: None,
            wall_clock_secs: 0.0,
            failed: failed.then(|| "diverged".to_string()),
        }
    }

    #[test]
    fn select_best_examples() {
        let rs = vec![rec(0, 3.2, false), rec(1, 2.9, false), rec(2, 4.1, false)];
        assert_eq!(select_best(&rs).unwrap().restart, 1);
        let rs = vec![rec(0, 2.0, false), rec(1, 2.0, false)];
        assert_eq!(select_best(&rs).unwrap().restart, 0);
        let rs = vec![rec(0, 1.0, true), rec(1, 2.0, false)];
        assert_eq!(select_best(&rs).unwrap().restart, 1);
        let rs = vec![rec(0, 1.0, true)];
        assert!(matches!(select_best(&rs), Err(TrainError::AllFailed(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.restarts = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"model": {"name": "jm-hidden", "hidden_size": 8}, "mode": "m",
                "data": {"kind": "task", "task": "count3"}}"#,
        )
        .unwrap();
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.mode, FreezeMode::M);
        match c.data.unwrap() {
            DataRef::Task {
                train_range,
                train_count,
                ..
            } => {
                assert_eq!(train_range, [40, 80]);
                assert_eq!(train_count, 10_000);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lm_pair_shifts() {
        let (i, t) = lm_pair(&[0, 1, 2], 3);
        assert_eq!(i, vec![3, 0, 1, 2]);
        assert_eq!(t, vec![0, 1, 2, 3]);
    }
}
