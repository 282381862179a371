//! Word-level corpora in the three-file Penn Treebank layout
//! (`ptb.train.txt`, `ptb.valid.txt`, `ptb.test.txt`): vocabulary,
//! encoding, batching and truncated-BPTT language modelling.

mod lm;
pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lm::{eval_ce, eval_ppl, train_lm, train_lm_restart, LmData};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum PtbError {
    #[error("missing corpus file {0}")]
    Missing(PathBuf),
    #[error("{0} split is empty")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad vocabulary: {0}")]
    Vocab(String),
    #[error("split of {len} ids is too short for {streams} streams of bptt {bptt}")]
    TooShort {
        len: usize,
        streams: usize,
        bptt: usize,
    },
}

/// Token to id bijection. Ids follow first appearance in the training
/// text, with `<eos>` placed at its first line end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds from training text; `<unk>` is appended if the text lacks it.
    pub fn from_text(text: &str) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in text.lines() {
            for w in line.split_whitespace() {
                v.insert(w);
            }
            v.insert(EOS);
        }
        v.insert(EOS);
        v.insert(UNK);
        v
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, PtbError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PtbError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        for needed in [EOS, UNK] {
            if !index.contains_key(needed) {
                return Err(PtbError::Vocab(format!("missing {needed}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of every token plus one `<eos>` per line.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for line in text.lines() {
            out.extend(line.split_whitespace().map(|w| self.id(w)));
            out.push(self.eos());
        }
        out
    }

    /// Space-joined tokens of one line, without the trailing `<eos>`.
    pub fn decode_line(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.eos())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PtbError> {
        let f: VocabFile = serde_json::from_str(text).map_err(|e| PtbError::Vocab(e.to_string()))?;
        Self::from_tokens(f.tokens)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), PtbError> {
        fs::write(path, self.to_json()).map_err(|source| PtbError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn read(path: &Path) -> Result<String, PtbError> {
    if !path.exists() {
        return Err(PtbError::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| PtbError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads `ptb.{train,valid,test}.txt` from `dir`.
pub fn load_ptb(dir: &Path) -> Result<Corpus, PtbError> {
    load_files(
        &dir.join("ptb.train.txt"),
        &dir.join("ptb.valid.txt"),
        &dir.join("ptb.test.txt"),
    )
}

pub fn load_files(train: &Path, valid: &Path, test: &Path) -> Result<Corpus, PtbError> {
    let texts = [read(train)?, read(valid)?, read(test)?];
    for (name, t) in ["train", "valid", "test"].iter().zip(&texts) {
        if t.split_whitespace().next().is_none() {
            return Err(PtbError::Empty(name.to_string()));
        }
    }
    let vocab = Vocab::from_text(&texts[0]);
    Ok(Corpus {
        train: vocab.encode(&texts[0]),
        valid: vocab.encode(&texts[1]),
        test: vocab.encode(&texts[2]),
        vocab,
    })
}

impl Corpus {
    /// Keeps the leading `fraction` of training lines (at least one).
    pub fn with_train_fraction(mut self, fraction: f64) -> Self {
        if fraction >= 1.0 {
            return self;
        }
        let eos = self.vocab.eos();
        let lines = self.train.iter().filter(|&&t| t == eos).count();
        let keep = ((lines as f64 * fraction.max(0.0)).floor() as usize).max(1);
        let mut seen = 0;
        let cut = self
            .train
            .iter()
            .position(|&t| {
                if t == eos {
                    seen += 1;
                }
                seen == keep
            })
            .map_or(self.train.len(), |p| p + 1);
        self.train.truncate(cut);
        self
    }
}

/// One truncated-BPTT block: per stream, `bptt` inputs and the targets
/// shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Splits `ids` into `streams` contiguous streams (dropping the remainder)
/// and cuts each into full blocks of `bptt` steps.
pub fn batchify(ids: &[usize], streams: usize, bptt: usize) -> Result<Vec<Block>, PtbError> {
    let per = ids.len() / streams.max(1);
    if streams == 0 || bptt == 0 || per < bptt + 1 {
        return Err(PtbError::TooShort {
            len: ids.len(),
            streams,
            bptt,
        });
    }
    let cols: Vec<&[usize]> = (0..streams).map(|s| &ids[s * per..(s + 1) * per]).collect();
    let n_blocks = (per - 1) / bptt;
    Ok((0..n_blocks)
        .map(|b| {
            let i = b * bptt;
            Block {
                inputs: cols.iter().map(|c| c[i..i + bptt].to_vec()).collect(),
                targets: cols.iter().map(|c| c[i + 1..i + bptt + 1].to_vec()).collect(),
            }
        })
        .collect())
}
