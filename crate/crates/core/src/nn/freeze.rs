use serde::{Deserialize, Serialize};

/// Which parameter set a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Recurrence, input weights, embedding.
    Controller,
    /// Action heads, push projections, stack-read injection weights.
    Memory,
    /// Output projection and bias.
    Classifier,
}

/// Training configuration by parameter set.
///
/// - `None`: everything trains.
/// - `C`: controller and classifier train, memory stays at init.
/// - `M`: memory and classifier train, controller stays at init.
/// - `Cm`: only the classifier trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezeMode {
    #[serde(rename = "none", alias = "n")]
    None,
    #[serde(rename = "c")]
    C,
    #[serde(rename = "m")]
    M,
    #[serde(rename = "cm")]
    Cm,
}

impl FreezeMode {
    pub const ALL: [FreezeMode; 4] = [FreezeMode::None, FreezeMode::C, FreezeMode::M, FreezeMode::Cm];

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::C => "c",
            FreezeMode::M => "m",
            FreezeMode::Cm => "cm",
        }
    }

    /// Short label used in result tables.
    pub fn short(self) -> &'static str {
        match self {
            FreezeMode::None => "n",
            other => other.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "n" => Some(FreezeMode::None),
            "c" => Some(FreezeMode::C),
            "m" => Some(FreezeMode::M),
            "cm" => Some(FreezeMode::Cm),
            _ => None,
        }
    }

    /// Mode actually applied to a model. Without a stack there is no
    /// memory set, so `m` collapses to `cm` and `c` to `none`.
    pub fn effective(self, has_stack: bool) -> FreezeMode {
        match (self, has_stack) {
            (FreezeMode::M, false) => FreezeMode::Cm,
            (FreezeMode::C, false) => FreezeMode::None,
            (mode, _) => mode,
        }
    }

    fn trains(self, group: ParamGroup, policy: ClassifierPolicy) -> bool {
        match (self, group) {
            (FreezeMode::None, _) => true,
            (FreezeMode::Cm, ParamGroup::Classifier) => true,
            (FreezeMode::Cm, _) => false,
            (FreezeMode::C, ParamGroup::Controller) | (FreezeMode::M, ParamGroup::Memory) => true,
            (FreezeMode::C | FreezeMode::M, ParamGroup::Classifier) => {
                policy == ClassifierPolicy::AlwaysTrain
            }
            (FreezeMode::C | FreezeMode::M, _) => false,
        }
    }
}

impl std::fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether the classifier trains in modes `c` and `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPolicy {
    #[default]
    AlwaysTrain,
    /// Classifier frozen unless the mode is `none` or `cm`.
    Strict,
}

/// Index sets of parameters by group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub theta_c: Vec<usize>,
    pub theta_m: Vec<usize>,
    pub theta_y: Vec<usize>,
}

impl ParamPartition {
    pub fn from_groups(groups: &[ParamGroup]) -> Self {
        let pick = |g: ParamGroup| {
            groups
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == g)
                .map(|(i, _)| i)
                .collect()
        };
        Self {
            theta_c: pick(ParamGroup::Controller),
            theta_m: pick(ParamGroup::Memory),
            theta_y: pick(ParamGroup::Classifier),
        }
    }

    pub fn len(&self) -> usize {
        self.theta_c.len() + self.theta_m.len() + self.theta_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, index: usize) -> Option<ParamGroup> {
        if self.theta_c.contains(&index) {
            Some(ParamGroup::Controller)
        } else if self.theta_m.contains(&index) {
            Some(ParamGroup::Memory)
        } else if self.theta_y.contains(&index) {
            Some(ParamGroup::Classifier)
        } else {
            None
        }
    }

    /// Disjoint and covering `0..n`.
    pub fn is_complete(&self, n: usize) -> bool {
        let mut seen = vec![0u8; n];
        for &i in self.theta_c.iter().chain(&self.theta_m).chain(&self.theta_y) {
            if i >= n {
                return false;
            }
            seen[i] += 1;
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Per-parameter trainability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub mode: FreezeMode,
    pub trainable: Vec<bool>,
}

impl TrainMask {
    pub fn all(n: usize) -> Self {
        Self {
            mode: FreezeMode::None,
            trainable: vec![true; n],
        }
    }

    pub fn count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// Trainability mask for a freeze mode. `mode` should already be the
/// effective mode for the model (see [`FreezeMode::effective`]).
pub fn apply_freeze(
    partition: &ParamPartition,
    mode: FreezeMode,
    policy: ClassifierPolicy,
) -> TrainMask {
    let n = partition.len();
    let mut trainable = vec![false; n];
    for (set, group) in [
        (&partition.theta_c, ParamGroup::Controller),
        (&partition.theta_m, ParamGroup::Memory),
        (&partition.theta_y, ParamGroup::Classifier),
    ] {
        for &i in set {
            trainable[i] = mode.trains(group, policy);
        }
    }
    TrainMask { mode, trainable }
}
