//! Length-binned accuracy and perplexity.
//!
//! Accuracy counts only determined positions (exactly one admissible next
//! symbol) inside the string; perplexity covers every position including
//! end-of-sequence.

mod results;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use results::{read_results, write_results, ResultRow, RESULTS_HEADER};

use crate::lang::{sample, LangError, SampleSpec, Task};
use crate::nn::{ModelError, StackRnn};
use crate::seed::derive_seed;
use crate::tensor::Scalar;
use crate::train::lm_pair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bin {0} has no sequences")]
    EmptyBin(String),
    #[error("scorer vocabulary {scorer} does not match task vocabulary {task}")]
    VocabMismatch { scorer: usize, task: usize },
    #[error("invalid bin spec: {0}")]
    BadBin(String),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("results file {path}: {msg}")]
    Results { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub label: String,
    pub lo: usize,
    pub hi: usize,
}

impl BinSpec {
    pub fn new(label: &str, lo: usize, hi: usize) -> Self {
        Self {
            label: label.to_string(),
            lo,
            hi,
        }
    }

    /// Parses `lo-hi` or `label=lo-hi`; unlabeled bins are numbered.
    pub fn parse_list(text: &str) -> Result<Vec<BinSpec>, EvalError> {
        text.split(',')
            .enumerate()
            .map(|(i, part)| {
                let (label, range) = match part.split_once('=') {
                    Some((l, r)) => (l.trim().to_string(), r),
                    None => (format!("bin{i}"), part),
                };
                let (lo, hi) = range
                    .split_once('-')
                    .ok_or_else(|| EvalError::BadBin(part.to_string()))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| EvalError::BadBin(part.to_string()))
                };
                let (lo, hi) = (parse(lo)?, parse(hi)?);
                if lo > hi {
                    return Err(EvalError::BadBin(part.to_string()));
                }
                Ok(BinSpec { label, lo, hi })
            })
            .collect()
    }
}

/// bin0 = [40, 100], bin1 = [101, 200], bin2 = [201, 400].
pub fn default_bins() -> Vec<BinSpec> {
    vec![
        BinSpec::new("bin0", 40, 100),
        BinSpec::new("bin1", 101, 200),
        BinSpec::new("bin2", 201, 400),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub label: String,
    pub lo: usize,
    pub hi: usize,
    /// `None` when the bin has no determined positions.
    pub accuracy: Option<f64>,
    pub perplexity: f64,
    pub n_seq: usize,
    pub n_det: usize,
    pub n_symbols: usize,
    pub correct: usize,
    /// Summed cross-entropy in nats.
    pub total_ce: f64,
    /// Standard error of per-sequence mean cross-entropy.
    pub ce_stderr: f64,
    /// Standard error of per-sequence accuracy.
    pub acc_stderr: Option<f64>,
}

impl BinMetrics {
    pub fn mean_ce(&self) -> f64 {
        self.total_ce / self.n_symbols as f64
    }
}

/// Anything that maps an input sequence to one logit row per position.
pub trait SequenceScorer: Sync {
    fn vocab_size(&self) -> usize;
    fn score(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>, ModelError>;
}

impl<F: Scalar> SequenceScorer for StackRnn<F> {
    fn vocab_size(&self) -> usize {
        self.spec().vocab_size
    }

    fn score(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.trace(inputs)?.logits)
    }
}

/// Puts all mass on the admissible next symbols of the task.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub task: Task,
}

impl SequenceScorer for OraclePredictor {
    fn vocab_size(&self) -> usize {
        self.task.vocab_size()
    }

    fn score(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        // inputs[0] is the start symbol; prefix for step t is inputs[1..=t]
        Ok((0..inputs.len())
            .map(|t| {
                let next = self.task.valid_next(&inputs[1..=t]);
                let mut row = vec![-30.0; self.vocab_size()];
                for x in next {
                    row[x] = 0.0;
                }
                row
            })
            .collect())
    }
}

/// Equal logits everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub vocab: usize,
}

impl SequenceScorer for UniformPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn score(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(vec![vec![0.0; self.vocab]; inputs.len()])
    }
}

/// Guesses uniformly among `symbols` with a random tie-break seeded from
/// the input sequence.
#[derive(Debug, Clone)]
pub struct CoinFlipPredictor {
    pub vocab: usize,
    pub symbols: Vec<usize>,
    pub seed: u64,
}

impl SequenceScorer for CoinFlipPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn score(&self, inputs: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        let key: Vec<u64> = inputs.iter().map(|&x| x as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "coin", &key));
        Ok((0..inputs.len())
            .map(|_| {
                let mut row = vec![-30.0; self.vocab];
                let pick = self.symbols[rng.random_range(0..self.symbols.len())];
                for &s in &self.symbols {
                    row[s] = if s == pick { 1e-6 } else { 0.0 };
                }
                row
            })
            .collect())
    }
}

/// `-log softmax(logits)[target]`, in f64.
pub fn cross_entropy_of(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-sequence scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqScore {
    pub ce: f64,
    pub n_symbols: usize,
    pub correct: usize,
    pub n_det: usize,
}

/// Determined positions that count toward accuracy. The final
/// end-of-sequence prediction is left out so that chance over the content
/// class is exactly `1/k`; it still counts toward perplexity.
pub fn accuracy_positions(task: Task, s: &[usize]) -> Vec<usize> {
    let mut det = task.determined_positions(s);
    det.retain(|&p| p < s.len());
    det
}

pub fn score_string(scorer: &dyn SequenceScorer, task: Task, s: &[usize]) -> Result<SeqScore, ModelError> {
    let (inputs, targets) = lm_pair(s, task.eos());
    let logits = scorer.score(&inputs)?;
    let det = accuracy_positions(task, s);
    let mut ce = 0.0;
    for (row, &y) in logits.iter().zip(&targets) {
        ce += cross_entropy_of(row, y);
    }
    let correct = det.iter().filter(|&&p| argmax(&logits[p]) == targets[p]).count();
    Ok(SeqScore {
        ce,
        n_symbols: targets.len(),
        correct,
        n_det: det.len(),
    })
}

fn stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Scores `strings` and merges by exact in-order summation, so the result
/// does not depend on the number of worker threads.
pub fn evaluate_strings(
    scorer: &dyn SequenceScorer,
    task: Task,
    bin: &BinSpec,
    strings: &[Vec<usize>],
) -> Result<BinMetrics, EvalError> {
    if strings.is_empty() {
        return Err(EvalError::EmptyBin(bin.label.clone()));
    }
    if scorer.vocab_size() != task.vocab_size() {
        return Err(EvalError::VocabMismatch {
            scorer: scorer.vocab_size(),
            task: task.vocab_size(),
        });
    }
    let scores: Vec<SeqScore> = strings
        .par_iter()
        .map(|s| score_string(scorer, task, s))
        .collect::<Result<_, _>>()?;
    let mut m = BinMetrics {
        label: bin.label.clone(),
        lo: bin.lo,
        hi: bin.hi,
        accuracy: None,
        perplexity: 0.0,
        n_seq: scores.len(),
        n_det: 0,
        n_symbols: 0,
        correct: 0,
        total_ce: 0.0,
        ce_stderr: 0.0,
        acc_stderr: None,
    };
    for s in &scores {
        m.total_ce += s.ce;
        m.n_symbols += s.n_symbols;
        m.correct += s.correct;
        m.n_det += s.n_det;
    }
    m.perplexity = (m.total_ce / m.n_symbols as f64).exp();
    let per_ce: Vec<f64> = scores.iter().map(|s| s.ce / s.n_symbols as f64).collect();
    m.ce_stderr = stderr(&per_ce);
    if m.n_det > 0 {
        m.accuracy = Some(m.correct as f64 / m.n_det as f64);
        let per_acc: Vec<f64> = scores
            .iter()
            .filter(|s| s.n_det > 0)
            .map(|s| s.correct as f64 / s.n_det as f64)
            .collect();
        m.acc_stderr = Some(stderr(&per_acc));
    }
    Ok(m)
}

/// Test strings for one bin; bin `i` uses a seed derived from `seed`.
pub fn sample_bin(task: Task, bin: &BinSpec, count: usize, seed: u64, index: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let s = derive_seed(seed, "test-bin", &[index as u64]);
    Ok(sample(task, &SampleSpec::new(bin.lo, bin.hi, count, s))?)
}

/// Samples `per_bin` fresh strings for each bin and evaluates them.
pub fn evaluate_bins(
    scorer: &dyn SequenceScorer,
    task: Task,
    bins: &[BinSpec],
    per_bin: usize,
    seed: u64,
) -> Result<Vec<BinMetrics>, EvalError> {
    bins.iter()
        .enumerate()
        .map(|(i, bin)| {
            let strings = sample_bin(task, bin, per_bin, seed, i)?;
            evaluate_strings(scorer, task, bin, &strings)
        })
        .collect()
}

/// Mean per-symbol cross-entropy of a model over strings (end-of-sequence
/// included).
pub fn mean_cross_entropy<F: Scalar>(model: &StackRnn<F>, strings: &[Vec<usize>], eos: usize) -> Result<f64, ModelError> {
    let per: Vec<(f64, usize)> = strings
        .par_iter()
        .map(|s| {
            let (inputs, targets) = lm_pair(s, eos);
            let logits = model.trace(&inputs)?.logits;
            let ce: f64 = logits
                .iter()
                .zip(&targets)
                .map(|(row, &y)| cross_entropy_of(row, y))
                .sum();
            Ok((ce, targets.len()))
        })
        .collect::<Result<_, ModelError>>()?;
    let (ce, n) = per
        .iter()
        .fold((0.0, 0usize), |(a, b), (c, d)| (a + c, b + d));
    Ok(ce / n.max(1) as f64)
}

/// Accuracy of guessing uniformly among `k` classes.
pub fn chance_from_classes(k: usize) -> f64 {
    1.0 / k.max(1) as f64
}

/// Content class the determined positions of a copy-family task draw from.
pub fn forced_content_class(task: Task) -> Option<Vec<usize>> {
    match task {
        Task::Count3 => None,
        Task::UnmarkedCopyDiffAlphabets => Some(vec![2, 3]),
        _ => Some(vec![0, 1]),
    }
}

/// Accuracy of a content-marginal predictor on the bin.
///
/// Copy-family tasks: `1/k` over the forced content class. count3: the
/// expected accuracy of a predictor that samples from the empirical
/// distribution of forced symbols, estimated on 1000 strings.
pub fn chance_baseline(task: Task, bin: &BinSpec) -> f64 {
    if let Some(class) = forced_content_class(task) {
        return chance_from_classes(class.len());
    }
    let seed = derive_seed(0, "chance", &[bin.lo as u64, bin.hi as u64]);
    let Ok(strings) = sample(task, &SampleSpec::new(bin.lo, bin.hi, 1000, seed)) else {
        return chance_from_classes(task.vocab_size());
    };
    let mut counts = vec![0f64; task.vocab_size()];
    let mut total = 0.0;
    for s in &strings {
        for p in accuracy_positions(task, s) {
            counts[s[p]] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return chance_from_classes(task.vocab_size());
    }
    counts.iter().map(|c| (c / total).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bins_are_disjoint() {
        let b = default_bins();
        for w in b.windows(2) {
            assert!(w[0].hi < w[1].lo);
        }
        assert_eq!((b[0].lo, b[2].hi), (40, 400));
    }

    #[test]
    fn bin_list_parsing() {
        let b = BinSpec::parse_list("40-100,short=5-9").unwrap();
        assert_eq!(b[0], BinSpec::new("bin0", 40, 100));
        assert_eq!(b[1], BinSpec::new("short", 5, 9));
        assert!(BinSpec::parse_list("9-5").is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        assert!((cross_entropy_of(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn chance_values() {
        let bin = BinSpec::new("b", 40, 100);
        assert_eq!(chance_baseline(Task::MarkedCopy, &bin), 0.5);
        assert_eq!(chance_baseline(Task::UnmarkedCopyDiffAlphabets, &bin), 0.5);
        assert_eq!(chance_from_classes(1), 1.0);
        let c = chance_baseline(Task::Count3, &bin);
        assert!(c > 0.45 && c < 0.55, "{c}");
    }

    #[test]
    fn oracle_scores_perfectly() {
        let o = OraclePredictor { task: Task::Count3 };
        let m = evaluate_bins(&o, Task::Count3, &default_bins(), 20, 1).unwrap();
        for b in m {
            assert_eq!(b.accuracy, Some(1.0));
        }
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let u = UniformPredictor { vocab: 4 };
        let m = evaluate_bins(&u, Task::MarkedCopy, &default_bins()[..1], 30, 2).unwrap();
        assert!((m[0].perplexity - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empty_bin_rejected() {
        let u = UniformPredictor { vocab: 4 };
        let r = evaluate_strings(&u, Task::MarkedCopy, &BinSpec::new("x", 1, 2), &[]);
        assert!(matches!(r, Err(EvalError::EmptyBin(_))));
    }
}
