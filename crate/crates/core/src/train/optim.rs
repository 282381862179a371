use serde::{Deserialize, Serialize};

use crate::nn::{Param, TrainMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient accumulators for the trainable parameters only.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    /// `(param index, accumulated gradient)`
    pub slots: Vec<(usize, Vec<f64>)>,
}

impl GradBuffer {
    pub fn new(params: &[Param<f32>], mask: &TrainMask) -> Self {
        let slots = params
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.trainable[*i])
            .map(|(i, p)| (i, vec![0.0; p.tensor.numel()]))
            .collect();
        Self { slots }
    }

    pub fn zero(&mut self) {
        for (_, g) in &mut self.slots {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, g) in &mut self.slots {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// Rescales to global norm `max_norm` when above it; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// SGD or Adam with state only for trainable parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    /// `(param index, first moment, second moment)`
    moments: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, grads: &GradBuffer) -> Self {
        let moments = match cfg.kind {
            OptimizerKind::Adam => grads
                .slots
                .iter()
                .map(|(i, g)| (*i, vec![0.0; g.len()], vec![0.0; g.len()]))
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn num_state_buffers(&self) -> usize {
        self.moments.len()
    }

    pub fn apply(&mut self, params: &mut [Param<f32>], grads: &GradBuffer) {
        self.step += 1;
        let c = self.cfg;
        match c.kind {
            OptimizerKind::Sgd => {
                for (i, g) in &grads.slots {
                    for (w, gi) in params[*i].tensor.data_mut().iter_mut().zip(g) {
                        *w = (*w as f64 - c.lr * gi) as f32;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for ((i, g), (j, m, v)) in grads.slots.iter().zip(&mut self.moments) {
                    debug_assert_eq!(i, j);
                    let data = params[*i].tensor.data_mut();
                    for k in 0..g.len() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        data[k] = (data[k] as f64 - c.lr * mh / (vh.sqrt() + c.eps)) as f32;
                    }
                }
            }
        }
    }
}
