use serde::Serialize;

use super::{AutodiffError, Graph, NodeId, Tensor};

/// Central-difference gradient check settings.
///
/// The deviation of one entry is `|analytic - numeric| / (|numeric| + floor)`.
/// With `tol = 1e-4` and `floor = 1e-2` this is a 1e-4 relative bound with a
/// 1e-6 absolute floor.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-2,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamDeviation {
    pub param: usize,
    pub max_deviation: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamDeviation>,
    pub max_deviation: f64,
    pub tol: f64,
    pub passed: bool,
}

fn build_leaves(
    g: &mut Graph<f64>,
    params: &[Tensor<f64>],
    requires_grad: bool,
) -> Result<Vec<NodeId>, AutodiffError> {
    params
        .iter()
        .map(|p| g.param(p.shape(), p.data(), requires_grad))
        .collect()
}

fn eval<B>(params: &[Tensor<f64>], builder: &B) -> Result<f64, AutodiffError>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new();
    let ids = build_leaves(&mut g, params, false)?;
    let loss = builder(&mut g, &ids)?;
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(AutodiffError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    Ok(g.scalar_value(loss))
}

/// Gradients of the builder's scalar output by reverse mode.
pub fn analytic_gradients<B>(
    params: &[Tensor<f64>],
    builder: &B,
) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new();
    let ids = build_leaves(&mut g, params, true)?;
    let loss = builder(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            grads
                .get(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect())
}

/// Gradients of the builder's scalar output by central differences.
pub fn numeric_gradients<B>(
    params: &[Tensor<f64>],
    builder: &B,
    step: f64,
) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].numel()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = orig + step;
            let plus = eval(&work, builder)?;
            work[p].data_mut()[j] = orig - step;
            let minus = eval(&work, builder)?;
            work[p].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry. Non-finite analytic values
/// count as an infinite deviation.
pub fn compare_gradients(
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    cfg: GradCheckConfig,
) -> GradCheckReport {
    let mut params = Vec::with_capacity(analytic.len());
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let mut worst = ParamDeviation {
            param: p,
            max_deviation: 0.0,
            worst_entry: 0,
            analytic: a.first().copied().unwrap_or(0.0),
            numeric: n.first().copied().unwrap_or(0.0),
        };
        for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
            let dev = if x.is_finite() && y.is_finite() {
                (x - y).abs() / (y.abs() + cfg.floor)
            } else {
                f64::INFINITY
            };
            if dev > worst.max_deviation {
                worst = ParamDeviation {
                    param: p,
                    max_deviation: dev,
                    worst_entry: j,
                    analytic: x,
                    numeric: y,
                };
            }
        }
        params.push(worst);
    }
    let max_deviation = params
        .iter()
        .map(|d| d.max_deviation)
        .fold(0.0, f64::max);
    GradCheckReport {
        passed: max_deviation <= cfg.tol,
        max_deviation,
        tol: cfg.tol,
        params,
    }
}

/// Runs the builder in reverse mode and by central differences and
/// reports the per-parameter maximum deviation.
pub fn grad_check<B>(
    params: &[Tensor<f64>],
    builder: B,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let analytic = analytic_gradients(params, &builder)?;
    let numeric = numeric_gradients(params, &builder, cfg.step)?;
    Ok(compare_gradients(&analytic, &numeric, cfg))
}
