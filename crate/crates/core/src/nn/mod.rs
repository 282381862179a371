//! Recurrent controllers, the superposition stack, and the parameter
//! partition used by freeze modes.

mod freeze;
mod model;
mod stack;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::AutodiffError;

pub use freeze::{apply_freeze, ClassifierPolicy, FreezeMode, ParamGroup, ParamPartition, TrainMask};
pub use model::{
    Bound, CarriedState, CheckpointMeta, GraphState, Param, StackRnn, StepOutput, Trace,
};
pub use stack::{ListStack, StackAction, StackState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("non-finite activation at step {step}: {source}")]
    NonFinite { step: usize, source: AutodiffError },
    #[error("symbol {symbol} outside vocabulary of size {vocab}")]
    SymbolOutOfRange { symbol: usize, vocab: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Elman,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PushSource {
    /// `v_t = sigmoid(W_v h_t)`
    Learned,
    /// `v_t = h_t`
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub num_stacks: usize,
    pub cell_dims: Vec<usize>,
    pub push_source: PushSource,
    #[serde(default = "default_read_depth")]
    pub read_depth: usize,
}

fn default_read_depth() -> usize {
    1
}

impl StackConfig {
    /// Width of the concatenated stack read.
    pub fn read_width(&self) -> usize {
        self.cell_dims.iter().map(|d| d * self.read_depth).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum InputEncoding {
    OneHot,
    Embedding(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub controller: ControllerKind,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub input: InputEncoding,
    #[serde(default)]
    pub stack: Option<StackConfig>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Spec(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be at least 1".into());
        }
        if let InputEncoding::Embedding(0) = self.input {
            return bad("embedding size must be at least 1".into());
        }
        if let Some(s) = &self.stack {
            if s.num_stacks == 0 {
                return bad("num_stacks must be at least 1".into());
            }
            if s.cell_dims.len() != s.num_stacks {
                return bad(format!(
                    "{} cell dims for {} stacks",
                    s.cell_dims.len(),
                    s.num_stacks
                ));
            }
            if s.cell_dims.contains(&0) {
                return bad("cell dims must be positive".into());
            }
            if s.read_depth == 0 {
                return bad("read_depth must be at least 1".into());
            }
            if s.push_source == PushSource::Hidden
                && s.cell_dims.iter().any(|&d| d != self.hidden_size)
            {
                return bad(format!(
                    "push_source=hidden needs cell dim {} (the hidden size), got {:?}",
                    self.hidden_size, s.cell_dims
                ));
            }
        }
        Ok(())
    }

    /// Builds a spec from a roster name.
    ///
    /// Recognised names: `lstm`, `lstm-<hidden>`, `elman`, `elman-<hidden>`,
    /// `jm-hidden`, `jm-hidden-<hidden>`, `jm-<d>` and `jm-learned-<d>`
    /// (one learned-push stack with cell dim `d`), and dotted multi-stack
    /// names such as `jm-3.3.3` (one learned stack per entry). Controllers
    /// of stack models are LSTMs.
    pub fn from_name(
        name: &str,
        hidden_size: usize,
        vocab_size: usize,
        input: InputEncoding,
    ) -> Result<Self, ModelError> {
        let bad = || ModelError::Spec(format!("unknown model name {name:?}"));
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let mut hidden = hidden_size;
        let (controller, stack) = if let Some(rest) = name.strip_prefix("lstm") {
            if let Some(h) = rest.strip_prefix('-') {
                hidden = parse(h)?;
            } else if !rest.is_empty() {
                return Err(bad());
            }
            (ControllerKind::Lstm, None)
        } else if let Some(rest) = name.strip_prefix("elman") {
            if let Some(h) = rest.strip_prefix('-') {
                hidden = parse(h)?;
            } else if !rest.is_empty() {
                return Err(bad());
            }
            (ControllerKind::Elman, None)
        } else if let Some(rest) = name.strip_prefix("jm-hidden") {
            if let Some(h) = rest.strip_prefix('-') {
                hidden = parse(h)?;
            } else if !rest.is_empty() {
                return Err(bad());
            }
            let stack = StackConfig {
                num_stacks: 1,
                cell_dims: vec![hidden],
                push_source: PushSource::Hidden,
                read_depth: 1,
            };
            (ControllerKind::Lstm, Some(stack))
        } else if let Some(rest) = name.strip_prefix("jm-") {
            let dims_str = rest.strip_prefix("learned-").unwrap_or(rest);
            let dims = dims_str
                .split('.')
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?;
            let stack = StackConfig {
                num_stacks: dims.len(),
                cell_dims: dims,
                push_source: PushSource::Learned,
                read_depth: 1,
            };
            (ControllerKind::Lstm, Some(stack))
        } else {
            return Err(bad());
        };
        let spec = Self {
            name: name.to_string(),
            controller,
            hidden_size: hidden,
            vocab_size,
            input,
            stack,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gate_width(&self) -> usize {
        match self.controller {
            ControllerKind::Elman => self.hidden_size,
            ControllerKind::Lstm => 4 * self.hidden_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_names_parse() {
        let s = ModelSpec::from_name("jm-3.3.3", 20, 4, InputEncoding::OneHot).unwrap();
        let st = s.stack.unwrap();
        assert_eq!(st.cell_dims, vec![3, 3, 3]);
        assert_eq!(st.push_source, PushSource::Learned);

        let s = ModelSpec::from_name("jm-hidden-247", 20, 4, InputEncoding::OneHot).unwrap();
        assert_eq!(s.hidden_size, 247);
        assert_eq!(s.stack.unwrap().cell_dims, vec![247]);

        let s = ModelSpec::from_name("jm-learned-22", 20, 4, InputEncoding::OneHot).unwrap();
        assert_eq!(s.stack.unwrap().cell_dims, vec![22]);

        let s = ModelSpec::from_name("lstm-256", 20, 4, InputEncoding::OneHot).unwrap();
        assert_eq!(s.hidden_size, 256);
        assert!(s.stack.is_none());

        assert!(ModelSpec::from_name("rns-3-3", 20, 4, InputEncoding::OneHot).is_err());
        assert!(ModelSpec::from_name("lstmx", 20, 4, InputEncoding::OneHot).is_err());
    }

    #[test]
    fn hidden_push_requires_hidden_cell_dim() {
        let spec = ModelSpec {
            name: "bad".into(),
            controller: ControllerKind::Lstm,
            hidden_size: 8,
            vocab_size: 4,
            input: InputEncoding::OneHot,
            stack: Some(StackConfig {
                num_stacks: 1,
                cell_dims: vec![4],
                push_source: PushSource::Hidden,
                read_depth: 1,
            }),
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn tiny_vocab_rejected() {
        assert!(ModelSpec::from_name("lstm", 4, 1, InputEncoding::OneHot).is_err());
    }
}
