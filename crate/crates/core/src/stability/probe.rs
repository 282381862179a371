//! Diagnostics that need a model: perturbation robustness and agreement of
//! stack actions with a task's reference strategy.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StabilityError;
use crate::eval::{cross_entropy_of, SequenceScorer};
use crate::lang::{ProfileAction, Task};
use crate::nn::StackRnn;
use crate::seed::derive_seed;
use crate::tensor::Scalar;
use crate::train::lm_pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Mean of |perturbed - original| per-symbol cross-entropy.
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    /// Signed mean difference.
    pub mean_delta: f64,
    pub n_scored: usize,
    /// Strings too short to carry the requested flips.
    pub n_skipped: usize,
}

impl Perturbation {
    fn from_deltas(deltas: &[f64], skipped: usize) -> Self {
        let n = deltas.len().max(1) as f64;
        Self {
            mean_abs_delta: deltas.iter().map(|d| d.abs()).sum::<f64>() / n,
            max_abs_delta: deltas.iter().fold(0.0, |m, d| m.max(d.abs())),
            mean_delta: deltas.iter().sum::<f64>() / n,
            n_scored: deltas.len(),
            n_skipped: skipped,
        }
    }
}

/// Per-position cross-entropy of `s` followed by end-of-sequence.
pub fn positional_ce(scorer: &dyn SequenceScorer, task: Task, s: &[usize]) -> Result<Vec<f64>, StabilityError> {
    let (inputs, targets) = lm_pair(s, task.eos());
    let logits = scorer.score(&inputs)?;
    Ok(logits
        .iter()
        .zip(&targets)
        .map(|(row, &y)| cross_entropy_of(row, y))
        .collect())
}

fn mean_ce(scorer: &dyn SequenceScorer, task: Task, s: &[usize]) -> Result<f64, StabilityError> {
    let ce = positional_ce(scorer, task, s)?;
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

fn content_symbols(task: Task) -> Vec<usize> {
    (0..task.vocab_size())
        .filter(|&x| x != task.eos() && Some(x) != task.marker())
        .collect()
}

/// First-half positions holding a content symbol.
fn flippable(task: Task, s: &[usize]) -> Vec<usize> {
    (0..s.len() / 2)
        .filter(|&p| Some(s[p]) != task.marker())
        .collect()
}

/// Substitutes a uniformly chosen different content symbol at `k` distinct
/// uniformly chosen first-half positions and reports the change in mean
/// per-symbol cross-entropy. Perturbed strings are scored as they are.
pub fn perturbation_robustness(
    scorer: &dyn SequenceScorer,
    task: Task,
    strings: &[Vec<usize>],
    k: usize,
    seed: u64,
) -> Result<Perturbation, StabilityError> {
    let content = content_symbols(task);
    let results: Vec<Option<f64>> = strings
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if k == 0 {
                return Ok(Some(0.0));
            }
            let pos = flippable(task, s);
            if pos.len() < k || content.len() < 2 {
                return Ok(None);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "flip", &[i as u64]));
            let mut t = s.clone();
            for &p in pos.choose_multiple(&mut rng, k) {
                let others: Vec<usize> = content.iter().copied().filter(|&x| x != s[p]).collect();
                t[p] = others[rng.random_range(0..others.len())];
            }
            Ok(Some(mean_ce(scorer, task, &t)? - mean_ce(scorer, task, s)?))
        })
        .collect::<Result<_, StabilityError>>()?;
    let deltas: Vec<f64> = results.iter().flatten().copied().collect();
    Ok(Perturbation::from_deltas(&deltas, results.len() - deltas.len()))
}

/// Every single-flip variant of every string. Variants are averaged within
/// a string first, so the result is the exact expectation of
/// `perturbation_robustness` with `k = 1`.
pub fn exhaustive_single_flip(
    scorer: &dyn SequenceScorer,
    task: Task,
    strings: &[Vec<usize>],
) -> Result<Perturbation, StabilityError> {
    let content = content_symbols(task);
    let (mut sum, mut sum_abs, mut max, mut n, mut skipped) = (0.0, 0.0, 0f64, 0, 0);
    for s in strings {
        let pos = flippable(task, s);
        if pos.is_empty() || content.len() < 2 {
            skipped += 1;
            continue;
        }
        let base = mean_ce(scorer, task, s)?;
        let mut deltas = Vec::new();
        for p in pos {
            for &x in content.iter().filter(|&&x| x != s[p]) {
                let mut t = s.clone();
                t[p] = x;
                deltas.push(mean_ce(scorer, task, &t)? - base);
            }
        }
        let m = deltas.len() as f64;
        sum += deltas.iter().sum::<f64>() / m;
        sum_abs += deltas.iter().map(|d| d.abs()).sum::<f64>() / m;
        max = deltas.iter().fold(max, |a, d| a.max(d.abs()));
        n += 1;
    }
    let d = n.max(1) as f64;
    Ok(Perturbation {
        mean_abs_delta: sum_abs / d,
        max_abs_delta: max,
        mean_delta: sum / d,
        n_scored: n,
        n_skipped: skipped,
    })
}

/// Gaussian noise of scale `sigma` on the hidden state at every step.
pub fn hidden_noise_robustness<F: Scalar>(
    model: &StackRnn<F>,
    task: Task,
    strings: &[Vec<usize>],
    sigma: f64,
    seed: u64,
) -> Result<Perturbation, StabilityError> {
    let deltas: Vec<f64> = strings
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (inputs, targets) = lm_pair(s, task.eos());
            let mean = |rows: &[Vec<f64>]| {
                rows.iter()
                    .zip(&targets)
                    .map(|(r, &y)| cross_entropy_of(r, y))
                    .sum::<f64>()
                    / targets.len() as f64
            };
            let clean = model.trace(&inputs)?.logits;
            let noisy = model
                .trace_with_noise(&inputs, sigma, derive_seed(seed, "noise", &[i as u64]))?
                .logits;
            Ok(mean(&noisy) - mean(&clean))
        })
        .collect::<Result<_, StabilityError>>()?;
    Ok(Perturbation::from_deltas(&deltas, 0))
}

fn argmax_random_tie<R: Rng>(a: &[f64; 3], rng: &mut R) -> usize {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..3).filter(|&i| a[i] == max).collect();
    ties[rng.random_range(0..ties.len())]
}

/// Matches and constrained positions for one stack. `actions[i + 1]` is the
/// distribution produced after reading symbol `i`, compared with
/// `profile[i]`; unconstrained positions are skipped.
pub fn action_agreement<R: Rng>(actions: &[[f64; 3]], profile: &[ProfileAction], rng: &mut R) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for (i, want) in profile.iter().enumerate() {
        let want = match want {
            ProfileAction::Push => 0,
            ProfileAction::Pop => 1,
            ProfileAction::Noop => 2,
            ProfileAction::Unconstrained => continue,
        };
        let Some(a) = actions.get(i + 1) else { break };
        total += 1;
        if argmax_random_tie(a, rng) == want {
            hit += 1;
        }
    }
    (hit, total)
}

/// Fraction of constrained positions where the model's most likely action
/// matches the reference strategy, taking the best-agreeing stack.
pub fn stack_action_agreement<F: Scalar>(
    model: &StackRnn<F>,
    task: Task,
    strings: &[Vec<usize>],
    seed: u64,
) -> Result<f64, StabilityError> {
    if !model.has_stack() {
        return Err(StabilityError::NoStack);
    }
    if task.reference_automaton().is_none() {
        return Err(StabilityError::NoProfile(task.id().to_string()));
    }
    let k = model.num_stacks();
    let per: Vec<(Vec<usize>, usize)> = strings
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (profile, _) = task.reference_profile(s);
            let (inputs, _) = lm_pair(s, task.eos());
            let trace = model.trace(&inputs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "agree", &[i as u64]));
            let mut hits = Vec::with_capacity(k);
            let mut total = 0;
            for stack in 0..k {
                let acts: Vec<[f64; 3]> = trace.actions.iter().map(|a| a[stack]).collect();
                let (h, t) = action_agreement(&acts, &profile, &mut rng);
                hits.push(h);
                total = t;
            }
            Ok((hits, total))
        })
        .collect::<Result<_, StabilityError>>()?;
    let total: usize = per.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(StabilityError::NoConstrainedPositions);
    }
    let best = (0..k)
        .map(|j| per.iter().map(|p| p.0[j]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / total as f64)
}
