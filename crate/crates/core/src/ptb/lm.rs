//! Truncated-BPTT language-model training. Each stream carries its
//! controller state across blocks; stacks restart empty every block.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::{batchify, Block};
use crate::nn::{CarriedState, ModelError, ModelSpec, StackRnn, TrainMask};
use crate::tensor::Graph;
use crate::train::{
    mask_for, EpochRecord, GradBuffer, Optimizer, RunRecord, TrainConfig, TrainError, TrainedRun,
};

/// Encoded splits plus the batching geometry.
#[derive(Debug, Clone)]
pub struct LmData {
    pub vocab_size: usize,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub bptt: usize,
    /// Parallel training streams.
    pub batch: usize,
    /// Parallel streams when scoring.
    pub eval_batch: usize,
}

struct StreamOut {
    loss: f64,
    grads: Vec<Option<Vec<f32>>>,
    carry: CarriedState,
}

fn stream_step(
    model: &StackRnn<f32>,
    mask: &TrainMask,
    slots: &[usize],
    carry: Option<&CarriedState>,
    inputs: &[usize],
    targets: &[usize],
) -> Result<StreamOut, ModelError> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, Some(mask))?;
    let (loss, state) = model.sequence_loss_from(&mut g, &b, carry, inputs, targets)?;
    let value = g.scalar_value(loss) as f64;
    let carry = model.carry(&g, &state);
    let mut gr = g.backward(loss)?;
    let grads = slots.iter().map(|&i| gr.take(b.ids[i])).collect();
    Ok(StreamOut {
        loss: value,
        grads,
        carry,
    })
}

/// Summed cross-entropy of one block across streams, gradients summed in
/// stream order into `grads`. Streams are evaluated `chunk` at a time so
/// that only that many full gradient copies are alive at once.
fn block_grads(
    model: &StackRnn<f32>,
    mask: &TrainMask,
    block: &Block,
    carries: &mut [Option<CarriedState>],
    grads: &mut GradBuffer,
) -> Result<f64, ModelError> {
    let slots: Vec<usize> = grads.slots.iter().map(|s| s.0).collect();
    let chunk = rayon::current_num_threads().max(1);
    let mut total = 0.0;
    let streams = block.inputs.len();
    for start in (0..streams).step_by(chunk) {
        let end = (start + chunk).min(streams);
        let outs: Vec<StreamOut> = (start..end)
            .into_par_iter()
            .map(|s| {
                stream_step(
                    model,
                    mask,
                    &slots,
                    carries[s].as_ref(),
                    &block.inputs[s],
                    &block.targets[s],
                )
            })
            .collect::<Result<_, _>>()?;
        for (s, out) in (start..end).zip(outs) {
            total += out.loss;
            for ((_, acc), gv) in grads.slots.iter_mut().zip(&out.grads) {
                if let Some(gv) = gv {
                    for (a, x) in acc.iter_mut().zip(gv) {
                        *a += *x as f64;
                    }
                }
            }
            carries[s] = Some(out.carry);
        }
    }
    Ok(total)
}

fn stream_ce(model: &StackRnn<f32>, blocks: &[Block], s: usize) -> Result<(f64, usize), ModelError> {
    let mut carry: Option<CarriedState> = None;
    let (mut total, mut n) = (0.0, 0);
    for block in blocks {
        let mut g = Graph::<f32>::new();
        let b = model.bind(&mut g, None)?;
        let (loss, state) =
            model.sequence_loss_from(&mut g, &b, carry.as_ref(), &block.inputs[s], &block.targets[s])?;
        total += g.scalar_value(loss) as f64;
        n += block.targets[s].len();
        carry = Some(model.carry(&g, &state));
    }
    Ok((total, n))
}

/// Mean per-token cross-entropy over the full blocks of `ids`, with state
/// carried along each of `streams` streams.
pub fn eval_ce(model: &StackRnn<f32>, ids: &[usize], streams: usize, bptt: usize) -> Result<f64, TrainError> {
    let blocks = batchify(ids, streams, bptt).map_err(|e| TrainError::Data(e.to_string()))?;
    let parts: Vec<(f64, usize)> = (0..streams)
        .into_par_iter()
        .map(|s| stream_ce(model, &blocks, s))
        .collect::<Result<_, _>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    Ok(total / n as f64)
}

pub fn eval_ppl(model: &StackRnn<f32>, ids: &[usize], streams: usize, bptt: usize) -> Result<f64, TrainError> {
    Ok(eval_ce(model, ids, streams, bptt)?.exp())
}

fn non_finite(e: &TrainError) -> bool {
    matches!(e, TrainError::Model(ModelError::NonFinite { .. }))
}

/// Trains one restart; mirrors the sequence trainer's early stopping and
/// failure reporting, with perplexities over tokens.
pub fn train_lm_restart(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    data: &LmData,
    restart: usize,
    checkpoint: Option<&Path>,
) -> Result<TrainedRun, TrainError> {
    let start = Instant::now();
    let seed = cfg.base_seed.wrapping_add(restart as u64);
    let mut model = StackRnn::<f32>::new(spec.clone(), seed)?;
    let mask = mask_for(&model, cfg.mode, cfg.classifier);
    let mut grads = GradBuffer::new(model.params(), &mask);
    let mut opt = Optimizer::new(cfg.optimizer, &grads);
    let blocks = batchify(&data.train, data.batch, data.bptt).map_err(|e| TrainError::Data(e.to_string()))?;

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
        let mut carries: Vec<Option<CarriedState>> = vec![None; data.batch];
        let (mut total, mut tokens) = (0.0f64, 0usize);
        for block in &blocks {
            grads.zero();
            let n = (data.batch * data.bptt) as f64;
            match block_grads(&model, &mask, block, &mut carries, &mut grads) {
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
            tokens += data.batch * data.bptt;
            grads.scale(1.0 / n);
            if !grads.is_finite() {
                record.failed = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            grads.clip(cfg.clip_norm);
            opt.apply(model.params_mut(), &grads);
        }
        let train_ce = total / tokens.max(1) as f64;
        let val_ce = match eval_ce(&model, &data.valid, data.eval_batch, data.bptt) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                record.failed = Some(format!("epoch {epoch}: validation loss {v}"));
                break;
            }
            Err(e) if non_finite(&e) => {
                record.failed = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "restart {restart} epoch {epoch}: train ppl {:.2} valid ppl {:.2}",
            train_ce.exp(),
            val_ce.exp()
        );
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

/// Every restart in order. Restarts run one after another because each
/// already spreads its streams over the pool.
pub fn train_lm(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    data: &LmData,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TrainedRun>, TrainError> {
    cfg.validate()?;
    if spec.vocab_size != data.vocab_size {
        return Err(TrainError::Config(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            spec.vocab_size, data.vocab_size
        )));
    }
    let run = |i: usize| {
        let ck = checkpoint_dir.map(|d| d.join(format!("restart{i}.stk")));
        train_lm_restart(cfg, spec, data, i, ck.as_deref())
    };
    let go = || (0..cfg.restarts).map(run).collect();
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
