//! The seven formal-language tasks: samplers, membership deciders,
//! next-symbol oracles, determined positions and reference stack profiles.
//!
//! Strings are slices of symbol indices. The end-of-sequence symbol is the
//! last index of each alphabet and never appears inside a string.

mod automaton;
mod dataset;
mod sample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use automaton::{PdaOp, ProfileAction, ReferenceAutomaton, Transition};
pub use dataset::{read_dataset, write_dataset, DatasetHeader};
pub use sample::{sample, SampleSpec};

#[derive(Debug, Error)]
pub enum LangError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("no attainable length in [{min}, {max}] for {task}; nearest: {below:?} below, {above:?} above")]
    NoAttainableLength {
        task: Task,
        min: usize,
        max: usize,
        below: Option<usize>,
        above: Option<usize>,
    },
    #[error("invalid sample spec: {0}")]
    InvalidSpec(String),
    #[error("symbol {symbol:?} not in the {task} alphabet")]
    UnknownSymbol { task: Task, symbol: String },
    #[error("dataset {path}: {msg}")]
    Dataset { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// a^n b^n c^n, n >= 0
    Count3,
    /// w # w^R # w
    MarkedReverseAndCopy,
    /// w #^|w| w
    CountAndCopy,
    /// w # w
    MarkedCopy,
    /// w phi(w) with phi(0) = 2, phi(1) = 3
    UnmarkedCopyDiffAlphabets,
    /// w w^R w
    UnmarkedReverseAndCopy,
    /// w w
    UnmarkedCopy,
}

const COUNT3_SYMBOLS: &[&str] = &["a", "b", "c", "<eos>"];
const MARKED_SYMBOLS: &[&str] = &["0", "1", "#", "<eos>"];
const DIFF_SYMBOLS: &[&str] = &["0", "1", "2", "3", "<eos>"];
const BINARY_SYMBOLS: &[&str] = &["0", "1", "<eos>"];

const MARK: usize = 2;

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Count3,
        Task::MarkedReverseAndCopy,
        Task::CountAndCopy,
        Task::MarkedCopy,
        Task::UnmarkedCopyDiffAlphabets,
        Task::UnmarkedReverseAndCopy,
        Task::UnmarkedCopy,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Task::Count3 => "count3",
            Task::MarkedReverseAndCopy => "marked_reverse_and_copy",
            Task::CountAndCopy => "count_and_copy",
            Task::MarkedCopy => "marked_copy",
            Task::UnmarkedCopyDiffAlphabets => "unmarked_copy_diff_alphabets",
            Task::UnmarkedReverseAndCopy => "unmarked_reverse_and_copy",
            Task::UnmarkedCopy => "unmarked_copy",
        }
    }

    /// Accepts the task id, hyphenated spellings and `count-3`.
    pub fn parse(s: &str) -> Result<Task, LangError> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = match norm.as_str() {
            "count_3" => "count3".to_string(),
            "unmarked_copy_different_alphabets" => "unmarked_copy_diff_alphabets".to_string(),
            _ => norm,
        };
        Task::ALL
            .into_iter()
            .find(|t| t.id() == norm)
            .ok_or_else(|| LangError::UnknownTask(s.to_string()))
    }

    /// Symbol names, end-of-sequence last.
    pub fn symbols(self) -> &'static [&'static str] {
        match self {
            Task::Count3 => COUNT3_SYMBOLS,
            Task::MarkedReverseAndCopy | Task::CountAndCopy | Task::MarkedCopy => MARKED_SYMBOLS,
            Task::UnmarkedCopyDiffAlphabets => DIFF_SYMBOLS,
            Task::UnmarkedReverseAndCopy | Task::UnmarkedCopy => BINARY_SYMBOLS,
        }
    }

    /// Alphabet size including end-of-sequence.
    pub fn vocab_size(self) -> usize {
        self.symbols().len()
    }

    pub fn eos(self) -> usize {
        self.vocab_size() - 1
    }

    pub fn marker(self) -> Option<usize> {
        match self {
            Task::MarkedReverseAndCopy | Task::CountAndCopy | Task::MarkedCopy => Some(MARK),
            _ => None,
        }
    }

    pub fn symbol_index(self, name: &str) -> Option<usize> {
        self.symbols()[..self.eos()].iter().position(|&s| s == name)
    }

    pub fn render(self, s: &[usize]) -> String {
        s.iter()
            .map(|&x| self.symbols().get(x).copied().unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses a space-separated or (for single-character symbols) packed
    /// string such as `"01#01"`.
    pub fn parse_string(self, text: &str) -> Result<Vec<usize>, LangError> {
        let tokens: Vec<String> = if text.contains(' ') {
            text.split_whitespace().map(str::to_string).collect()
        } else {
            text.chars().map(|c| c.to_string()).collect()
        };
        tokens
            .iter()
            .map(|t| {
                self.symbol_index(t).ok_or_else(|| LangError::UnknownSymbol {
                    task: self,
                    symbol: t.clone(),
                })
            })
            .collect()
    }

    /// Total length of the member with free parameter `k` (`n` for count3,
    /// `|w|` otherwise).
    pub fn length_of(self, k: usize) -> usize {
        match self {
            Task::Count3 => 3 * k,
            Task::MarkedCopy => 2 * k + 1,
            Task::MarkedReverseAndCopy => 3 * k + 2,
            Task::CountAndCopy => 3 * k,
            Task::UnmarkedCopyDiffAlphabets | Task::UnmarkedCopy => 2 * k,
            Task::UnmarkedReverseAndCopy => 3 * k,
        }
    }

    fn min_param(self) -> usize {
        match self {
            Task::Count3 => 0,
            _ => 1,
        }
    }

    /// Free parameter for an attainable length.
    pub fn param_for_length(self, len: usize) -> Option<usize> {
        let (num, div) = match self {
            Task::Count3 | Task::CountAndCopy | Task::UnmarkedReverseAndCopy => (Some(len), 3),
            Task::MarkedCopy => (len.checked_sub(1), 2),
            Task::MarkedReverseAndCopy => (len.checked_sub(2), 3),
            Task::UnmarkedCopyDiffAlphabets | Task::UnmarkedCopy => (Some(len), 2),
        };
        let num = num?;
        let k = num / div;
        (num % div == 0 && k >= self.min_param()).then_some(k)
    }

    pub fn attainable_lengths(self, min: usize, max: usize) -> Vec<usize> {
        (min..=max).filter(|&l| self.param_for_length(l).is_some()).collect()
    }

    /// Number of members of length `len`.
    pub fn count_at_length(self, len: usize) -> f64 {
        match (self, self.param_for_length(len)) {
            (_, None) => 0.0,
            (Task::Count3, Some(_)) => 1.0,
            (_, Some(k)) => 2f64.powi(k as i32),
        }
    }

    /// Member for free parameter `k`; `w` supplies the binary content and
    /// must have length `k` (ignored for count3).
    pub fn build(self, k: usize, w: &[usize]) -> Vec<usize> {
        let rev = || w.iter().rev().copied();
        let mut s = Vec::with_capacity(self.length_of(k));
        match self {
            Task::Count3 => {
                for sym in 0..3 {
                    s.extend(std::iter::repeat_n(sym, k));
                }
            }
            Task::MarkedCopy => {
                s.extend_from_slice(w);
                s.push(MARK);
                s.extend_from_slice(w);
            }
            Task::MarkedReverseAndCopy => {
                s.extend_from_slice(w);
                s.push(MARK);
                s.extend(rev());
                s.push(MARK);
                s.extend_from_slice(w);
            }
            Task::CountAndCopy => {
                s.extend_from_slice(w);
                s.extend(std::iter::repeat_n(MARK, w.len()));
                s.extend_from_slice(w);
            }
            Task::UnmarkedCopyDiffAlphabets => {
                s.extend_from_slice(w);
                s.extend(w.iter().map(|&x| x + 2));
            }
            Task::UnmarkedReverseAndCopy => {
                s.extend_from_slice(w);
                s.extend(rev());
                s.extend_from_slice(w);
            }
            Task::UnmarkedCopy => {
                s.extend_from_slice(w);
                s.extend_from_slice(w);
            }
        }
        s
    }

    /// Whether `s` belongs to the language. Foreign symbols give `false`.
    pub fn membership(self, s: &[usize]) -> bool {
        let Some(k) = self.param_for_length(s.len()) else {
            return false;
        };
        let binary = |xs: &[usize]| xs.iter().all(|&x| x < 2);
        match self {
            Task::Count3 => {
                s[..k].iter().all(|&x| x == 0)
                    && s[k..2 * k].iter().all(|&x| x == 1)
                    && s[2 * k..].iter().all(|&x| x == 2)
            }
            Task::MarkedCopy => {
                let (w, rest) = s.split_at(k);
                binary(w) && rest[0] == MARK && &rest[1..] == w
            }
            Task::MarkedReverseAndCopy => {
                let w = &s[..k];
                let r = &s[k + 1..2 * k + 1];
                binary(w)
                    && s[k] == MARK
                    && s[2 * k + 1] == MARK
                    && r.iter().eq(w.iter().rev())
                    && &s[2 * k + 2..] == w
            }
            Task::CountAndCopy => {
                let w = &s[..k];
                binary(w) && s[k..2 * k].iter().all(|&x| x == MARK) && &s[2 * k..] == w
            }
            Task::UnmarkedCopyDiffAlphabets => {
                let w = &s[..k];
                binary(w) && s[k..].iter().zip(w).all(|(&y, &x)| y == x + 2)
            }
            Task::UnmarkedReverseAndCopy => {
                let w = &s[..k];
                binary(w) && s[k..2 * k].iter().eq(w.iter().rev()) && &s[2 * k..] == w
            }
            Task::UnmarkedCopy => {
                let w = &s[..k];
                binary(w) && &s[k..] == w
            }
        }
    }

    /// Symbols `x` (end-of-sequence included) such that some member of the
    /// language starts with `prefix · x`. Sorted ascending; empty when the
    /// prefix is dead.
    pub fn valid_next(self, prefix: &[usize]) -> Vec<usize> {
        let eos = self.eos();
        let out = match self {
            Task::Count3 => count3_next(prefix),
            Task::MarkedCopy => marked_copy_next(prefix),
            Task::MarkedReverseAndCopy => marked_rev_next(prefix),
            Task::CountAndCopy => count_copy_next(prefix),
            Task::UnmarkedCopyDiffAlphabets => diff_alpha_next(prefix),
            Task::UnmarkedReverseAndCopy | Task::UnmarkedCopy => {
                if prefix.iter().all(|&x| x < 2) {
                    let mut v = vec![0, 1];
                    if self.membership(prefix) {
                        v.push(eos);
                    }
                    v
                } else {
                    Vec::new()
                }
            }
        };
        let out: Vec<usize> = out
            .into_iter()
            .map(|x| if x == usize::MAX { eos } else { x })
            .collect();
        if out.is_empty() {
            log::debug!("dead prefix for {}: {}", self.id(), self.render(prefix));
        }
        out
    }

    /// Prediction targets with exactly one admissible symbol. Target `p`
    /// predicts `s[p]` from `s[..p]`; target `s.len()` is end-of-sequence.
    pub fn determined_positions(self, s: &[usize]) -> Vec<usize> {
        (0..=s.len())
            .filter(|&p| self.valid_next(&s[..p]).len() == 1)
            .collect()
    }

    /// Canonical one-stack automaton, for tasks that have one.
    pub fn reference_automaton(self) -> Option<ReferenceAutomaton> {
        ReferenceAutomaton::for_task(self)
    }

    /// Expected stack action per input position and whether the task has a
    /// canonical strategy. Markers are always no-ops.
    pub fn reference_profile(self, s: &[usize]) -> (Vec<ProfileAction>, bool) {
        let fallback = || -> Vec<ProfileAction> {
            s.iter()
                .map(|&x| {
                    if Some(x) == self.marker() {
                        ProfileAction::Noop
                    } else {
                        ProfileAction::Unconstrained
                    }
                })
                .collect()
        };
        match self.reference_automaton() {
            Some(pda) => match pda.profile(s) {
                Some(p) => (p, true),
                None => {
                    log::warn!("{} string rejected by reference automaton", self.id());
                    (fallback(), false)
                }
            },
            None => {
                log::warn!("{} has no canonical stack strategy", self.id());
                (fallback(), false)
            }
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Task {
    type Err = LangError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::parse(s)
    }
}

// usize::MAX stands for end-of-sequence inside the per-task helpers.
const END: usize = usize::MAX;

fn count3_next(p: &[usize]) -> Vec<usize> {
    let i = p.iter().take_while(|&&x| x == 0).count();
    let j = p[i..].iter().take_while(|&&x| x == 1).count();
    let k = p[i + j..].iter().take_while(|&&x| x == 2).count();
    if i + j + k != p.len() || j > i || k > i || (k > 0 && j < i) {
        return vec![];
    }
    match (j, k) {
        (0, 0) if i == 0 => vec![0, END],
        (0, 0) => vec![0, 1],
        (j, 0) if j < i => vec![1],
        (_, 0) => vec![2],
        (_, k) if k < i => vec![2],
        _ => vec![END],
    }
}

fn split_marks(p: &[usize]) -> Vec<&[usize]> {
    p.split(|&x| x == MARK).collect()
}

fn open_content(p: &[usize]) -> Vec<usize> {
    if p.is_empty() {
        vec![0, 1]
    } else {
        vec![0, 1, MARK]
    }
}

/// Next symbol when `t` must be a prefix of `target`, followed by `then`.
fn follow(t: &[usize], target: impl Iterator<Item = usize> + Clone, then: usize) -> Vec<usize> {
    let n = target.clone().count();
    if t.len() > n || !t.iter().copied().eq(target.clone().take(t.len())) {
        return vec![];
    }
    match target.clone().nth(t.len()) {
        Some(x) => vec![x],
        None => vec![then],
    }
}

fn marked_copy_next(p: &[usize]) -> Vec<usize> {
    match split_marks(p)[..] {
        [w] => open_content(w),
        [w, t] if !w.is_empty() => follow(t, w.iter().copied(), END),
        _ => vec![],
    }
}

fn marked_rev_next(p: &[usize]) -> Vec<usize> {
    match split_marks(p)[..] {
        [w] => open_content(w),
        [w, r] if !w.is_empty() => follow(r, w.iter().rev().copied(), MARK),
        [w, r, t] if !w.is_empty() && r.iter().eq(w.iter().rev()) => {
            follow(t, w.iter().copied(), END)
        }
        _ => vec![],
    }
}

fn count_copy_next(p: &[usize]) -> Vec<usize> {
    let m = p.iter().take_while(|&&x| x != MARK).count();
    let w = &p[..m];
    if m == p.len() {
        return open_content(w);
    }
    if m == 0 {
        return vec![];
    }
    let r = p[m..].iter().take_while(|&&x| x == MARK).count();
    let t = &p[m + r..];
    if r > m {
        return vec![];
    }
    if t.is_empty() {
        return if r < m { vec![MARK] } else { vec![w[0]] };
    }
    if r < m {
        return vec![];
    }
    follow(t, w.iter().copied(), END)
}

fn diff_alpha_next(p: &[usize]) -> Vec<usize> {
    let m = p.iter().take_while(|&&x| x < 2).count();
    let (u, v) = p.split_at(m);
    if v.iter().any(|&x| x < 2) {
        return vec![];
    }
    if v.is_empty() {
        return match u.first() {
            Some(&x) => vec![0, 1, x + 2],
            None => vec![0, 1],
        };
    }
    follow(v, u.iter().map(|&x| x + 2), END)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(task: Task, text: &str) -> Vec<usize> {
        task.parse_string(text).unwrap()
    }

    #[test]
    fn build_examples() {
        assert_eq!(Task::Count3.render(&Task::Count3.build(2, &[])), "a a b b c c");
        let w = s(Task::MarkedCopy, "01");
        assert_eq!(Task::MarkedCopy.build(2, &w), s(Task::MarkedCopy, "01#01"));
        assert_eq!(
            Task::MarkedReverseAndCopy.build(2, &w),
            s(Task::MarkedReverseAndCopy, "01#10#01")
        );
        assert_eq!(Task::CountAndCopy.build(2, &w), s(Task::CountAndCopy, "01##01"));
        assert_eq!(
            Task::UnmarkedCopyDiffAlphabets.build(2, &w),
            s(Task::UnmarkedCopyDiffAlphabets, "0123")
        );
    }

    #[test]
    fn membership_examples() {
        assert!(Task::Count3.membership(&s(Task::Count3, "aabbcc")));
        assert!(!Task::Count3.membership(&s(Task::Count3, "aabbc")));
        assert!(Task::Count3.membership(&[]));
        assert!(!Task::MarkedCopy.membership(&s(Task::MarkedCopy, "#")));
        assert!(!Task::UnmarkedCopy.membership(&[]));
        assert!(!Task::MarkedCopy.membership(&[0, 7, 0]));
    }

    #[test]
    fn valid_next_examples() {
        assert_eq!(Task::Count3.valid_next(&s(Task::Count3, "aab")), vec![1]);
        assert_eq!(Task::MarkedCopy.valid_next(&s(Task::MarkedCopy, "01#0")), vec![1]);
        assert_eq!(Task::MarkedCopy.valid_next(&[]), vec![0, 1]);
        assert_eq!(Task::Count3.valid_next(&[]), vec![0, 3]);
        assert!(Task::Count3.valid_next(&s(Task::Count3, "abb")).is_empty());
    }

    #[test]
    fn determined_positions_examples() {
        let t = Task::MarkedCopy;
        assert_eq!(t.determined_positions(&s(t, "01#01")), vec![3, 4, 5]);
        let t = Task::Count3;
        assert_eq!(t.determined_positions(&s(t, "aabbcc")), vec![3, 4, 5, 6]);
        for t in [Task::UnmarkedCopy, Task::UnmarkedReverseAndCopy, Task::MarkedCopy] {
            assert!(!t.determined_positions(&t.build(1, &[0])).contains(&0));
        }
    }

    #[test]
    fn attainable_lengths() {
        assert_eq!(Task::MarkedCopy.attainable_lengths(4, 9), vec![5, 7, 9]);
        assert_eq!(Task::MarkedReverseAndCopy.attainable_lengths(0, 9), vec![5, 8]);
        assert_eq!(Task::Count3.attainable_lengths(0, 6), vec![0, 3, 6]);
        assert_eq!(Task::CountAndCopy.attainable_lengths(0, 6), vec![3, 6]);
    }

    #[test]
    fn task_ids_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.id()).unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.id()));
        }
        assert_eq!(Task::parse("count-3").unwrap(), Task::Count3);
        assert!(Task::parse("dyck").is_err());
    }
}
