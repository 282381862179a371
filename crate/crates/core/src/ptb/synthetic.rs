//! Stand-in corpus in the three-file layout when no real one is at hand.
//!
//! A hidden class chain steps to one of a few successor classes uniformly
//! and emits a word of that class; a word of rank `r` is drawn with weight
//! `1 / (r + 1)` within its class. The most frequent ranks are spread over
//! a set of small function classes, the rest over a set of large content
//! classes, so frequent words carry most of the sequential structure.
//! Lines end with a fixed probability after every word. The exact
//! generating probabilities are available for an oracle perplexity.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PtbError, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Distinct words, `<unk>` included and `<eos>` not.
    pub vocab: usize,
    /// Leading ranks that go to function classes.
    pub function_words: usize,
    pub function_classes: usize,
    pub content_classes: usize,
    pub successors: usize,
    /// Mean words per line.
    pub mean_len: f64,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab: 9_999,
            function_words: 100,
            function_classes: 20,
            content_classes: 20,
            successors: 2,
            mean_len: 21.0,
            train_tokens: 900_000,
            valid_tokens: 70_000,
            test_tokens: 80_000,
            seed: 0,
        }
    }
}

/// Frequency rank given to `<unk>`.
const UNK_RANK: usize = 3;

/// The generating process.
#[derive(Debug, Clone)]
pub struct SyntheticLm {
    spec: SyntheticSpec,
    /// Words of each class by descending probability.
    members: Vec<Vec<usize>>,
    within: Vec<WeightedIndex<f64>>,
    within_p: Vec<Vec<f64>>,
    /// Class of each rank and its position within the class.
    class_of: Vec<(usize, usize)>,
    next: Vec<Vec<usize>>,
}

pub fn word(rank: usize) -> String {
    if rank == UNK_RANK {
        UNK.to_string()
    } else {
        format!("w{rank}")
    }
}

fn rank_of(w: &str) -> Option<usize> {
    if w == UNK {
        return Some(UNK_RANK);
    }
    w.strip_prefix('w')?.parse().ok().filter(|&r| r != UNK_RANK)
}

impl SyntheticLm {
    pub fn new(spec: SyntheticSpec) -> Result<Self, PtbError> {
        let (nf, nc) = (spec.function_classes, spec.content_classes);
        if nf == 0
            || nc == 0
            || spec.function_words < nf
            || spec.function_words <= UNK_RANK
            || spec.vocab < spec.function_words + nc
            || spec.successors == 0
            || spec.mean_len < 1.0
        {
            return Err(PtbError::Vocab(format!("unusable synthetic spec {spec:?}")));
        }
        let mut members = vec![Vec::new(); nf + nc];
        let mut class_of = Vec::with_capacity(spec.vocab);
        for r in 0..spec.vocab {
            let c = if r < spec.function_words {
                r % nf
            } else {
                nf + (r - spec.function_words) % nc
            };
            class_of.push((c, members[c].len()));
            members[c].push(r);
        }
        let within_p: Vec<Vec<f64>> = members
            .iter()
            .map(|m| {
                let w: Vec<f64> = m.iter().map(|&r| 1.0 / (r + 1) as f64).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let within = within_p
            .iter()
            .map(|p| WeightedIndex::new(p).expect("positive weights"))
            .collect();
        // One random permutation per successor slot, so every class has
        // the same in-degree and the chain visits all classes evenly.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let perms: Vec<Vec<usize>> = (0..spec.successors)
            .map(|_| {
                let mut p: Vec<usize> = (0..nf + nc).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let next = (0..nf + nc)
            .map(|c| perms.iter().map(|p| p[c]).collect())
            .collect();
        Ok(Self {
            spec,
            members,
            within,
            within_p,
            class_of,
            next,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn stop(&self) -> f64 {
        1.0 / self.spec.mean_len
    }

    /// Lines holding at least `tokens` words plus line ends; the class
    /// chain continues across line breaks.
    fn sample_lines<R: Rng>(&self, rng: &mut R, class: &mut usize, tokens: usize) -> String {
        let mut out = String::new();
        let mut n = 0;
        while n < tokens {
            let mut line = Vec::new();
            loop {
                let succ = &self.next[*class];
                *class = succ[rng.random_range(0..succ.len())];
                let j = self.within[*class].sample(rng);
                line.push(word(self.members[*class][j]));
                if rng.random::<f64>() < self.stop() {
                    break;
                }
            }
            n += line.len() + 1;
            out.push(' ');
            out.push_str(&line.join(" "));
            out.push_str(" \n");
        }
        out
    }

    /// Train, valid and test text.
    pub fn generate(&self) -> [String; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed);
        let mut class = 0;
        let train = self.sample_lines(&mut rng, &mut class, self.spec.train_tokens);
        let valid = self.sample_lines(&mut rng, &mut class, self.spec.valid_tokens);
        let test = self.sample_lines(&mut rng, &mut class, self.spec.test_tokens);
        [train, valid, test]
    }

    /// Perplexity of the generating process on `text` (line ends counted
    /// as tokens). Every word reveals its class, so only the first word
    /// is scored under a uniform class prior.
    pub fn oracle_ppl(&self, text: &str) -> Option<f64> {
        let k = self.members.len();
        let mut prev: Option<usize> = None;
        let (mut nll, mut n) = (0.0, 0usize);
        let stop = self.stop();
        for line in text.lines() {
            let words: Vec<&str> = line.split_whitespace().collect();
            for (i, w) in words.iter().enumerate() {
                let (c, j) = *self.class_of.get(rank_of(w)?)?;
                let pc = match prev {
                    None => 1.0 / k as f64,
                    Some(from) => {
                        let succ = &self.next[from];
                        succ.iter().filter(|&&s| s == c).count() as f64 / succ.len() as f64
                    }
                };
                let cont = if i == 0 { 1.0 } else { 1.0 - stop };
                nll -= (cont * pc * self.within_p[c][j]).ln();
                n += 1;
                prev = Some(c);
            }
            if !words.is_empty() {
                nll -= stop.ln();
                n += 1;
            }
        }
        Some((nll / n.max(1) as f64).exp())
    }
}

/// Writes `ptb.{train,valid,test}.txt` under `dir`.
pub fn write_corpus(dir: &Path, spec: &SyntheticSpec) -> Result<(), PtbError> {
    let lm = SyntheticLm::new(spec.clone())?;
    fs::create_dir_all(dir).map_err(|source| PtbError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, text) in ["train", "valid", "test"].iter().zip(lm.generate()) {
        let path = dir.join(format!("ptb.{name}.txt"));
        fs::write(&path, text).map_err(|source| PtbError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            vocab: 60,
            function_words: 10,
            function_classes: 3,
            content_classes: 3,
            train_tokens: 3000,
            valid_tokens: 300,
            test_tokens: 300,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = SyntheticLm::new(small()).unwrap().generate();
        let b = SyntheticLm::new(small()).unwrap().generate();
        assert_eq!(a, b);
        let n = a[0].split_whitespace().count() + a[0].lines().count();
        assert!((3000..3200).contains(&n), "{n}");
    }

    #[test]
    fn oracle_beats_uniform() {
        let lm = SyntheticLm::new(small()).unwrap();
        let [_, valid, _] = lm.generate();
        let ppl = lm.oracle_ppl(&valid).unwrap();
        assert!(ppl > 1.0 && ppl < 61.0, "{ppl}");
    }

    #[test]
    fn word_names_round_trip() {
        for r in 0..20 {
            assert_eq!(rank_of(&word(r)), Some(r));
        }
        assert_eq!(rank_of("w3"), None);
    }
}
