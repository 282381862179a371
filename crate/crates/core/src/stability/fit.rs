//! Least-squares fit of `a * T^b + c` with `a, c >= 0`.
//!
//! For fixed `b` the model is linear in `(a, c)`, so the inner problem is
//! a two-variable nonnegative least squares solved in closed form. The
//! outer search over `b` is a grid scan followed by golden-section
//! refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::{LossCurve, StabilityError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub b_min: f64,
    pub b_max: f64,
    pub grid_step: f64,
    /// Significance level of the growth-vs-constant F-test.
    pub alpha: f64,
    pub bootstrap: usize,
    pub seed: u64,
    pub weighting: Weighting,
}

/// How residuals are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// `1 / fitted^2`, for noise proportional to the loss.
    Relative,
    /// `1 / stderr^2`; falls back to relative when any stderr is zero.
    InverseVariance,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            b_min: -2.0,
            b_max: 5.0,
            grid_step: 0.02,
            alpha: 1e-3,
            bootstrap: 200,
            seed: 0,
            weighting: Weighting::InverseVariance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthClass {
    SubLinear,
    Linear,
    SuperLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Weighted sum of squared residuals.
    pub residual: f64,
    /// Percentile bootstrap interval for `b` (2.5%, 97.5%).
    pub b_interval: Option<(f64, f64)>,
    /// Whether growth beat a constant fit at the configured level.
    pub growth_significant: bool,
    pub class: GrowthClass,
}

/// Nonnegative `(a, c)` minimising `sum w (y - a x - c)^2`, and its
/// weighted SSE.
fn nnls2(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sse = |a: f64, c: f64| -> f64 {
        x.iter()
            .zip(y)
            .zip(w)
            .map(|((xi, yi), wi)| wi * (yi - a * xi - c).powi(2))
            .sum()
    };
    let mut m = [0.0; 5];
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        m[0] += wi;
        m[1] += wi * xi;
        m[2] += wi * yi;
        m[3] += wi * xi * xi;
        m[4] += wi * xi * yi;
    }
    let [sw, sx, sy, sxx, sxy] = m;
    let det = sw * sxx - sx * sx;
    let mut cands = Vec::with_capacity(3);
    if det.abs() > 1e-12 * (sw * sxx).max(1e-300) {
        let a = (sw * sxy - sx * sy) / det;
        let c = (sy - a * sx) / sw;
        if a >= 0.0 && c >= 0.0 {
            cands.push((a, c));
        }
    }
    cands.push((0.0, (sy / sw).max(0.0)));
    if sxx > 0.0 {
        cands.push(((sxy / sxx).max(0.0), 0.0));
    }
    cands
        .into_iter()
        .map(|(a, c)| (a, c, sse(a, c)))
        .min_by(|p, q| p.2.total_cmp(&q.2))
        .expect("at least one candidate")
}

struct Profile<'a> {
    t: &'a [f64],
    y: &'a [f64],
    w: &'a [f64],
    t_ref: f64,
}

impl Profile<'_> {
    /// Best `(a, c, sse)` for a fixed exponent. `a` is in original units.
    fn at(&self, b: f64) -> (f64, f64, f64) {
        let x: Vec<f64> = self.t.iter().map(|t| (t / self.t_ref).powf(b)).collect();
        let (a_scaled, c, sse) = nnls2(&x, self.y, self.w);
        (a_scaled / self.t_ref.powf(b), c, sse)
    }
}

fn golden<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

/// Ordinary least-squares slope of `ln y` on `ln T` over positive points.
pub fn log_log_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

const IRLS_ROUNDS: usize = 8;

struct PointFit {
    a: f64,
    b: f64,
    c: f64,
    sse: f64,
    /// Residual of the growth model in the significance test.
    test_sse: f64,
    /// Residual of the best constant in the significance test.
    sse0: f64,
    mean: f64,
    at_boundary: bool,
}

fn fit_weighted(t: &[f64], y: &[f64], w: &[f64], opts: &FitOptions) -> PointFit {
    let t_ref = t.iter().cloned().fold(0.0, f64::max);
    let prof = Profile { t, y, w, t_ref };
    let steps = ((opts.b_max - opts.b_min) / opts.grid_step).round() as usize;
    let mut grid: Vec<f64> = (0..=steps)
        .map(|i| opts.b_min + i as f64 * opts.grid_step)
        .collect();
    if let Some(s) = log_log_slope(t, y) {
        if s > opts.b_min && s < opts.b_max {
            grid.push(s);
        }
    }
    let (mut best_b, mut best_sse) = (grid[0], f64::INFINITY);
    for &b in &grid {
        let sse = prof.at(b).2;
        if sse < best_sse {
            best_b = b;
            best_sse = sse;
        }
    }
    let lo = (best_b - opts.grid_step).max(opts.b_min);
    let hi = (best_b + opts.grid_step).min(opts.b_max);
    let b_ref = golden(|b| prof.at(b).2, lo, hi, 1e-10);
    let (b, (a, c, sse)) = match prof.at(b_ref) {
        r if r.2 <= best_sse => (b_ref, r),
        _ => (best_b, prof.at(best_b)),
    };
    let sw: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sse0 = y.iter().zip(w).map(|(y, w)| w * (y - mean).powi(2)).sum();
    let edge = 1e-6 * (opts.b_max - opts.b_min);
    PointFit {
        a,
        b,
        c,
        sse,
        test_sse: sse,
        sse0,
        mean,
        at_boundary: a > 0.0 && (b - opts.b_min < edge || opts.b_max - b < edge),
    }
}

fn relative_weights(v: &[f64]) -> Vec<f64> {
    let top = v.iter().cloned().fold(0.0, f64::max);
    let floor = (1e-6 * top).max(1e-12);
    v.iter().map(|x| 1.0 / x.max(floor).powi(2)).collect()
}

/// Point fit under the configured weighting. Relative weights are
/// iteratively refreshed from the fitted values.
fn fit_point(t: &[f64], y: &[f64], se: &[f64], opts: &FitOptions) -> PointFit {
    match opts.weighting {
        Weighting::Uniform => fit_weighted(t, y, &vec![1.0; y.len()], opts),
        Weighting::InverseVariance if se.iter().all(|s| *s > 0.0) => {
            let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
            fit_weighted(t, y, &w, opts)
        }
        _ => {
            let mut fit = fit_weighted(t, y, &relative_weights(y), opts);
            for _ in 0..IRLS_ROUNDS {
                let fitted: Vec<f64> = t.iter().map(|t| fit.a * t.powf(fit.b) + fit.c).collect();
                let next = fit_weighted(t, y, &relative_weights(&fitted), opts);
                let done = (next.b - fit.b).abs() < 1e-9;
                fit = next;
                if done {
                    break;
                }
            }
            // The growth-vs-constant test uses unweighted residuals: under
            // relative weights a misfit exponent can look no better than a
            // constant even on steeply growing curves.
            let u = fit_weighted(t, y, &vec![1.0; y.len()], opts);
            fit.sse0 = u.sse0;
            fit.test_sse = u.sse;
            fit.mean = u.mean;
            fit
        }
    }
}

/// Fit with growth significance test and bootstrap interval for `b`.
///
/// When the power-law term does not improve significantly on a constant
/// fit, the constant fit is reported with `a = 0, b = 0`. A significant
/// fit whose exponent sits on the search boundary is non-convergent.
pub fn growth_fit(curve: &LossCurve, opts: &FitOptions) -> Result<GrowthFit, StabilityError> {
    let t: Vec<f64> = curve.points.iter().map(|p| p.length).collect();
    let y: Vec<f64> = curve.points.iter().map(|p| p.loss).collect();
    let se: Vec<f64> = curve.points.iter().map(|p| p.stderr).collect();
    if t.len() < 4 {
        return Err(StabilityError::TooFewPoints {
            need: 4,
            got: t.len(),
        });
    }
    if y.iter().any(|v| *v < 0.0) {
        return Err(StabilityError::InvalidCurve("negative loss".into()));
    }
    let pf = fit_point(&t, &y, &se, opts);
    if !pf.sse.is_finite() {
        return Err(StabilityError::NonConvergent("no finite residual".into()));
    }
    let n = y.len() as f64;
    let significant = if pf.sse0 <= 0.0 {
        false
    } else if pf.test_sse <= 1e-15 * pf.sse0 {
        true
    } else {
        let f = ((pf.sse0 - pf.test_sse) / 2.0) / (pf.test_sse / (n - 3.0));
        let dist = FisherSnedecor::new(2.0, n - 3.0)
            .map_err(|e| StabilityError::NonConvergent(e.to_string()))?;
        1.0 - dist.cdf(f.max(0.0)) < opts.alpha
    };
    if !significant {
        return Ok(GrowthFit {
            a: 0.0,
            b: 0.0,
            c: pf.mean.max(0.0),
            residual: pf.sse0,
            b_interval: None,
            growth_significant: false,
            class: GrowthClass::SubLinear,
        });
    }
    if pf.at_boundary {
        return Err(StabilityError::NonConvergent(format!(
            "exponent optimum at search boundary b = {}",
            pf.b
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut bs = Vec::with_capacity(opts.bootstrap);
    for _ in 0..opts.bootstrap {
        let mut idx: Vec<usize> = (0..t.len()).map(|_| rng.random_range(0..t.len())).collect();
        idx.sort_unstable();
        let mut distinct = idx.clone();
        distinct.dedup();
        if distinct.len() < 3 {
            continue;
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let r = fit_point(&pick(&t), &pick(&y), &pick(&se), opts);
        if r.a > 0.0 && !r.at_boundary {
            bs.push(r.b);
        }
    }
    let b_interval = (bs.len() >= 10).then(|| {
        bs.sort_by(f64::total_cmp);
        let q = |p: f64| bs[((bs.len() - 1) as f64 * p).round() as usize];
        (q(0.025), q(0.975))
    });
    let class = match b_interval {
        Some((lo, _)) if lo > 1.0 => GrowthClass::SuperLinear,
        Some((_, hi)) if hi < 1.0 => GrowthClass::SubLinear,
        Some(_) => GrowthClass::Linear,
        None if pf.b > 1.0 => GrowthClass::Linear,
        None => GrowthClass::SubLinear,
    };
    Ok(GrowthFit {
        a: pf.a,
        b: pf.b,
        c: pf.c,
        residual: pf.sse,
        b_interval,
        growth_significant: true,
        class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_exact_line() {
        let x = [1.0, 2.0, 3.0];
        let y = [3.0, 5.0, 7.0];
        let (a, c, sse) = nnls2(&x, &y, &[1.0; 3]);
        assert!((a - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12 && sse < 1e-20);
    }

    #[test]
    fn nnls_clamps_negative_intercept() {
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0];
        let (a, c, _) = nnls2(&x, &y, &[1.0; 3]);
        assert!(c >= 0.0 && a >= 0.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn golden_finds_parabola_minimum() {
        let x = golden(|x| (x - 0.3).powi(2), -1.0, 2.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-6);
    }

    #[test]
    fn slope_of_power_law() {
        let t = [10.0, 20.0, 40.0];
        let y: Vec<f64> = t.iter().map(|v: &f64| 3.0 * v.powf(1.7)).collect();
        assert!((log_log_slope(&t, &y).unwrap() - 1.7).abs() < 1e-12);
    }
}
