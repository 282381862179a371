//! Length-stability diagnostics over loss-vs-length curves and trained
//! models: error bounds, variance across lengths, power-law growth
//! fitting, degradation, equivalence to a random reference, perturbation
//! robustness, stack-action agreement and advantage windows.

mod fit;
mod probe;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::{growth_fit, log_log_slope, FitOptions, GrowthClass, GrowthFit, Weighting};
pub use probe::{
    action_agreement, exhaustive_single_flip, hidden_noise_robustness, perturbation_robustness,
    positional_ce, stack_action_agreement, Perturbation,
};

use crate::eval::BinMetrics;
use crate::lang::LangError;
use crate::nn::ModelError;

/// Retention below this flags degradation.
pub const RETENTION_THRESHOLD: f64 = 0.9;
/// Slack on the exponent before growth counts as faster than linear.
pub const FIT_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("fit did not converge: {0}")]
    NonConvergent(String),
    #[error("curves do not share length buckets")]
    MismatchedBuckets,
    #[error("model has no stack")]
    NoStack,
    #[error("task {0} has no canonical stack profile")]
    NoProfile(String),
    #[error("no constrained positions to compare")]
    NoConstrainedPositions,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// `count` lengths spaced geometrically from `lo` to `hi`, rounded.
pub fn geometric_sweep(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if count < 2 {
        return vec![lo];
    }
    let r = (hi as f64 / lo as f64).powf(1.0 / (count - 1) as f64);
    let mut out: Vec<usize> = (0..count)
        .map(|i| (lo as f64 * r.powi(i as i32)).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Default buckets for stability curves: nine lengths from 50 to 800.
pub fn default_sweep() -> Vec<usize> {
    geometric_sweep(50, 800, 9)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub length: f64,
    pub loss: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean loss per length bucket, ordered by length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self, StabilityError> {
        for w in points.windows(2) {
            if !(w[0].length < w[1].length) {
                return Err(StabilityError::InvalidCurve(format!(
                    "lengths not strictly increasing at {}",
                    w[1].length
                )));
            }
        }
        for p in &points {
            if !p.loss.is_finite() || p.loss < 0.0 {
                return Err(StabilityError::InvalidCurve(format!(
                    "loss {} at length {}",
                    p.loss, p.length
                )));
            }
            if !p.stderr.is_finite() || p.stderr < 0.0 || !p.length.is_finite() {
                return Err(StabilityError::InvalidCurve(format!("bad point at length {}", p.length)));
            }
        }
        Ok(Self { points })
    }

    /// Points with zero standard error and unit counts.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, StabilityError> {
        Self::new(
            pairs
                .iter()
                .map(|&(length, loss)| CurvePoint {
                    length,
                    loss,
                    stderr: 0.0,
                    n: 1,
                })
                .collect(),
        )
    }

    /// Mean per-symbol cross-entropy per bin, placed at the bin midpoint.
    pub fn from_bins(bins: &[BinMetrics]) -> Result<Self, StabilityError> {
        Self::new(
            bins.iter()
                .map(|b| CurvePoint {
                    length: (b.lo + b.hi) as f64 / 2.0,
                    loss: b.mean_ce(),
                    stderr: b.ce_stderr,
                    n: b.n_seq,
                })
                .collect(),
        )
    }

    /// Reads a CSV with columns `length,loss,stderr,n`.
    pub fn from_csv(path: &Path) -> Result<Self, StabilityError> {
        let io = |msg: String| StabilityError::Io {
            path: path.display().to_string(),
            msg,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
        let mut points = Vec::new();
        for (i, rec) in r.deserialize::<CurvePoint>().enumerate() {
            points.push(rec.map_err(|e| io(format!("line {}: {e}", i + 2)))?);
        }
        Self::new(points)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), StabilityError> {
        let io = |msg: String| StabilityError::Io {
            path: path.display().to_string(),
            msg,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.to_string()))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| io(e.to_string()))?;
        }
        w.flush().map_err(|e| io(e.to_string()))
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.length).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub pass: bool,
    /// Length and loss of the largest loss on the curve.
    pub worst: Option<(f64, f64)>,
}

/// Passes iff every mean loss is at most `c`.
pub fn error_bound_check(curve: &LossCurve, c: f64) -> BoundCheck {
    let worst = curve
        .points
        .iter()
        .max_by(|a, b| a.loss.total_cmp(&b.loss))
        .map(|p| (p.length, p.loss));
    BoundCheck {
        pass: worst.is_none_or(|(_, l)| l <= c),
        worst,
    }
}

/// Unbiased sample variance of the bucket means.
pub fn variance_across_lengths(curve: &LossCurve) -> Result<f64, StabilityError> {
    let n = curve.points.len();
    if n < 2 {
        return Err(StabilityError::TooFewPoints { need: 2, got: n });
    }
    let mean = curve.points.iter().map(|p| p.loss).sum::<f64>() / n as f64;
    Ok(curve.points.iter().map(|p| (p.loss - mean).powi(2)).sum::<f64>() / (n - 1) as f64)
}

/// Loss and optional accuracy of one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl From<&BinMetrics> for BinSummary {
    fn from(b: &BinMetrics) -> Self {
        Self {
            loss: b.mean_ce(),
            accuracy: b.accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    /// long / short loss; `None` when the short loss is zero.
    pub loss_ratio: Option<f64>,
    /// long / short accuracy.
    pub retention: Option<f64>,
    pub flagged: bool,
}

/// Flags when accuracy retention drops below the threshold, or, without
/// accuracies, when loss grows by more than its reciprocal.
pub fn degradation_ratio(short: BinSummary, long: BinSummary) -> Degradation {
    let loss_ratio = (short.loss > 0.0).then(|| long.loss / short.loss);
    let retention = match (short.accuracy, long.accuracy) {
        (Some(s), Some(l)) if s > 0.0 => Some(l / s),
        _ => None,
    };
    let flagged = match (retention, loss_ratio) {
        (Some(r), _) => r < RETENTION_THRESHOLD,
        (None, Some(q)) => q > 1.0 / RETENTION_THRESHOLD,
        (None, None) => long.loss > 0.0,
    };
    Degradation {
        loss_ratio,
        retention,
        flagged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub equivalent: bool,
    /// Difference over pooled standard error, per bucket.
    pub effect_sizes: Vec<f64>,
    /// Mean difference on the longest bucket.
    pub longest_difference: f64,
    pub longest_pooled_se: f64,
}

/// Compares a curve against a random or frozen reference on the same
/// buckets. Equivalent iff the longest bucket differs by at most two
/// pooled standard errors.
pub fn random_equivalence(curve: &LossCurve, reference: &LossCurve) -> Result<Equivalence, StabilityError> {
    if curve.points.is_empty() || curve.lengths() != reference.lengths() {
        return Err(StabilityError::MismatchedBuckets);
    }
    let pooled = |a: &CurvePoint, b: &CurvePoint| (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    let effect_sizes = curve
        .points
        .iter()
        .zip(&reference.points)
        .map(|(a, b)| (a.loss - b.loss) / pooled(a, b).max(1e-12))
        .collect();
    let (a, b) = (curve.points.last().unwrap(), reference.points.last().unwrap());
    let d = a.loss - b.loss;
    let se = pooled(a, b);
    Ok(Equivalence {
        equivalent: d.abs() <= 2.0 * se,
        effect_sizes,
        longest_difference: d,
        longest_pooled_se: se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_low: f64,
    pub t_high: f64,
}

/// Longest contiguous run of shared buckets where `a` beats `b` by more
/// than one standard error on each side. Ties go to the earliest run.
pub fn advantage_window(a: &LossCurve, b: &LossCurve) -> Result<Option<Window>, StabilityError> {
    if a.lengths() != b.lengths() {
        return Err(StabilityError::MismatchedBuckets);
    }
    let wins: Vec<bool> = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| p.loss + p.stderr < q.loss - q.stderr)
        .collect();
    let (mut best, mut start) = (None::<(usize, usize)>, None);
    for i in 0..=wins.len() {
        match (wins.get(i).copied().unwrap_or(false), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(bs, be)| i - s > be - bs) {
                    best = Some((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(best.map(|(s, e)| Window {
        t_low: a.points[s].length,
        t_high: a.points[e - 1].length,
    }))
}

/// Largest length in the leading run of points whose loss stays within
/// 10% of the first point's loss.
pub fn near_perfect_horizon(curve: &LossCurve) -> Option<f64> {
    let first = curve.points.first()?;
    let limit = first.loss * 1.1;
    curve
        .points
        .iter()
        .take_while(|p| p.loss <= limit)
        .last()
        .map(|p| p.length)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

/// Stable needs a converged fit with `b` at most `1 + FIT_TOLERANCE` and an
/// unflagged degradation check; super-linear growth or a flag is unstable.
pub fn verdict(growth: Option<&GrowthFit>, degradation: Option<&Degradation>) -> Verdict {
    let Some(g) = growth else {
        return Verdict::Inconclusive;
    };
    if g.class == GrowthClass::SuperLinear || degradation.is_some_and(|d| d.flagged) {
        return Verdict::Unstable;
    }
    match degradation {
        Some(_) if g.b <= 1.0 + FIT_TOLERANCE => Verdict::Stable,
        _ => Verdict::Inconclusive,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    /// False when the fully trained model is not stable, so no ordering is
    /// expected.
    pub applicable: bool,
    /// Frozen variants whose training-range loss is below the full model's.
    pub violations: Vec<String>,
    pub holds: Option<bool>,
}

/// When the fully trained model is stable, its training-range loss should
/// not exceed any frozen variant's.
pub fn ordering_check(full_verdict: Verdict, full_loss: f64, frozen: &[(String, f64)]) -> OrderingCheck {
    if full_verdict != Verdict::Stable {
        return OrderingCheck {
            applicable: false,
            violations: Vec::new(),
            holds: None,
        };
    }
    let violations: Vec<String> = frozen
        .iter()
        .filter(|(_, l)| *l < full_loss)
        .map(|(m, _)| m.clone())
        .collect();
    OrderingCheck {
        applicable: true,
        holds: Some(violations.is_empty()),
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Largest observed mean loss.
    pub bound_c: f64,
    pub variance: Option<f64>,
    pub growth: Option<GrowthFit>,
    /// Why the growth fit is missing.
    pub growth_error: Option<String>,
    pub degradation: Option<Degradation>,
    pub perturbation: Option<Perturbation>,
    pub random_equivalence: Option<Equivalence>,
    pub action_agreement: Option<f64>,
    pub advantage_window: Option<Window>,
    pub horizon: Option<f64>,
    pub verdict: Verdict,
}

/// Optional extras folded into a report.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub short: Option<BinSummary>,
    pub long: Option<BinSummary>,
    pub reference: Option<LossCurve>,
    pub comparison: Option<LossCurve>,
    pub perturbation: Option<Perturbation>,
    pub action_agreement: Option<f64>,
}

impl StabilityReport {
    pub fn assess(curve: &LossCurve, opts: &FitOptions, extra: &ReportInputs) -> Result<Self, StabilityError> {
        if curve.points.is_empty() {
            return Err(StabilityError::TooFewPoints { need: 1, got: 0 });
        }
        let (growth, growth_error) = match growth_fit(curve, opts) {
            Ok(g) => (Some(g), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let short = extra.short.unwrap_or(BinSummary {
            loss: curve.points[0].loss,
            accuracy: None,
        });
        let long = extra.long.unwrap_or(BinSummary {
            loss: curve.points.last().unwrap().loss,
            accuracy: None,
        });
        let degradation = degradation_ratio(short, long);
        let random_equivalence = match &extra.reference {
            Some(r) => Some(random_equivalence(curve, r)?),
            None => None,
        };
        let advantage_window = match &extra.comparison {
            Some(b) => advantage_window(curve, b)?,
            None => None,
        };
        Ok(Self {
            bound_c: error_bound_check(curve, f64::INFINITY).worst.map_or(0.0, |w| w.1),
            variance: variance_across_lengths(curve).ok(),
            verdict: verdict(growth.as_ref(), Some(&degradation)),
            growth,
            growth_error,
            degradation: Some(degradation),
            perturbation: extra.perturbation.clone(),
            random_equivalence,
            action_agreement: extra.action_agreement,
            advantage_window,
            horizon: near_perfect_horizon(curve),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are finite")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
