use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ControllerKind, FreezeMode, InputEncoding, ModelError, ModelSpec, ParamGroup, ParamPartition,
    PushSource, TrainMask,
};
use crate::tensor::{load_tensors, save_tensors, AutodiffError, Graph, NodeId, Scalar, Tensor};

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Scalar = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform,
    Zero,
    /// LSTM gate bias: zero except the forget-gate block set to one.
    ForgetBias(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct HeadLayout {
    w_act: usize,
    b_act: usize,
    w_push: Option<usize>,
    cell_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Option<usize>,
    w_x: usize,
    w_h: usize,
    b: usize,
    heads: Vec<HeadLayout>,
    w_read_in: Option<usize>,
    w_read_out: Option<usize>,
    w_y: usize,
    b_y: usize,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    init: Init,
}

fn plan(spec: &ModelSpec) -> (Vec<Slot>, Layout) {
    let h = spec.hidden_size;
    let v = spec.vocab_size;
    let g = spec.gate_width();
    let mut slots = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, group: ParamGroup, init: Init| {
        slots.push(Slot {
            name,
            shape,
            group,
            init,
        });
        slots.len() - 1
    };
    use ParamGroup::*;
    let embed = match spec.input {
        InputEncoding::Embedding(e) => Some(add("ctrl.embed".into(), vec![v, e], Controller, Init::Uniform)),
        InputEncoding::OneHot => None,
    };
    // One-hot inputs select a row of w_x, so it is stored symbol-major.
    let w_x_shape = match spec.input {
        InputEncoding::OneHot => vec![v, g],
        InputEncoding::Embedding(e) => vec![g, e],
    };
    let w_x = add("ctrl.w_x".into(), w_x_shape, Controller, Init::Uniform);
    let w_h = add("ctrl.w_h".into(), vec![g, h], Controller, Init::Uniform);
    let bias_init = match spec.controller {
        ControllerKind::Lstm => Init::ForgetBias(h),
        ControllerKind::Elman => Init::Zero,
    };
    let b = add("ctrl.b".into(), vec![g], Controller, bias_init);

    let mut heads = Vec::new();
    let (mut w_read_in, mut w_read_out) = (None, None);
    if let Some(stack) = &spec.stack {
        for (k, &d) in stack.cell_dims.iter().enumerate() {
            let w_act = add(format!("mem{k}.w_act"), vec![3, h], Memory, Init::Uniform);
            let b_act = add(format!("mem{k}.b_act"), vec![3], Memory, Init::Zero);
            let w_push = (stack.push_source == PushSource::Learned)
                .then(|| add(format!("mem{k}.w_push"), vec![d, h], Memory, Init::Uniform));
            heads.push(HeadLayout {
                w_act,
                b_act,
                w_push,
                cell_dim: d,
            });
        }
        let r = stack.read_width();
        w_read_in = Some(add("mem.w_read_in".into(), vec![g, r], Memory, Init::Uniform));
        w_read_out = Some(add("mem.w_read_out".into(), vec![v, r], Memory, Init::Uniform));
    }
    let w_y = add("out.w_y".into(), vec![v, h], Classifier, Init::Uniform);
    let b_y = add("out.b_y".into(), vec![v], Classifier, Init::Zero);
    let layout = Layout {
        embed,
        w_x,
        w_h,
        b,
        heads,
        w_read_in,
        w_read_out,
        w_y,
        b_y,
    };
    (slots, layout)
}

/// Stack-augmented recurrent language model (or a plain recurrent one when
/// the spec has no stack).
///
/// Per step: the controller reads the input symbol, its previous state and
/// the previous stack read; every stack head turns the new hidden state into
/// a (push, pop, no-op) distribution and a push value; the stacks update;
/// the output layer reads the hidden state and the new stack tops.
#[derive(Debug, Clone, PartialEq)]
pub struct StackRnn<F: Scalar = f32> {
    spec: ModelSpec,
    params: Vec<Param<F>>,
    layout: Layout,
}

/// Node ids of the parameters copied into one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct GraphState {
    pub h: NodeId,
    pub c: Option<NodeId>,
    pub stacks: Vec<NodeId>,
    pub read: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: NodeId,
    /// One (push, pop, no-op) node per stack.
    pub actions: Vec<NodeId>,
}

/// Controller state carried across truncated-BPTT blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CarriedState<F = f32> {
    pub h: Vec<F>,
    pub c: Option<Vec<F>>,
}

/// Values of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// One logit row per step.
    pub logits: Vec<Vec<f64>>,
    /// Per step, one (push, pop, no-op) triple per stack.
    pub actions: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub mode: FreezeMode,
    pub groups: Vec<(String, ParamGroup)>,
    pub init_seed: u64,
    #[serde(default)]
    pub data_seed: Option<u64>,
}

fn at_step(step: usize) -> impl Fn(AutodiffError) -> ModelError {
    move |e| match e {
        AutodiffError::NonFinite { .. } => ModelError::NonFinite { step, source: e },
        other => ModelError::Autodiff(other),
    }
}

impl<F: Scalar> StackRnn<F> {
    /// Fresh model: weights uniform in [-0.1, 0.1], biases zero, LSTM forget
    /// bias one.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let (slots, layout) = plan(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = slots
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data: Vec<F> = match s.init {
                    Init::Uniform => (0..n)
                        .map(|_| F::of(rng.random_range(-INIT_RANGE..=INIT_RANGE)))
                        .collect(),
                    Init::Zero => vec![F::zero(); n],
                    Init::ForgetBias(h) => (0..n)
                        .map(|i| if (h..2 * h).contains(&i) { F::one() } else { F::zero() })
                        .collect(),
                };
                Param {
                    name: s.name,
                    group: s.group,
                    tensor: Tensor::new(s.shape, data).expect("planned shape"),
                }
            })
            .collect();
        Ok(Self {
            spec,
            params,
            layout,
        })
    }

    /// Model from named tensors, e.g. a loaded checkpoint.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        spec.validate()?;
        let (slots, layout) = plan(&spec);
        if slots.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        let params = slots
            .into_iter()
            .zip(tensors)
            .map(|(s, (name, t))| {
                if s.name != name || s.shape != t.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "expected {} {:?}, found {} {:?}",
                        s.name,
                        s.shape,
                        name,
                        t.shape()
                    )));
                }
                Ok(Param {
                    name,
                    group: s.group,
                    tensor: t,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn has_stack(&self) -> bool {
        self.spec.stack.is_some()
    }

    pub fn num_stacks(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn partition(&self) -> ParamPartition {
        let groups: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        ParamPartition::from_groups(&groups)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> StackRnn<G> {
        StackRnn {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// SHA-256 over the bit patterns of the parameters in `group` (all
    /// parameters when `None`).
    pub fn checksum(&self, group: Option<ParamGroup>) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            h.update(p.name.as_bytes());
            for x in p.tensor.data() {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies parameters into a graph; frozen (or unmasked, when `mask` is
    /// `None`) parameters enter as constants.
    pub fn bind(&self, g: &mut Graph<F>, mask: Option<&TrainMask>) -> Result<Bound, ModelError> {
        let ids = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let trainable = mask.is_some_and(|m| m.trainable[i]);
                g.param(p.tensor.shape(), p.tensor.data(), trainable)
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { ids })
    }

    pub fn initial_state(&self, g: &mut Graph<F>) -> Result<GraphState, ModelError> {
        self.state_from_carry(g, None)
    }

    /// Graph state seeded from carried controller values. Stacks always
    /// start empty.
    pub fn state_from_carry(
        &self,
        g: &mut Graph<F>,
        carry: Option<&CarriedState<F>>,
    ) -> Result<GraphState, ModelError> {
        let hs = self.spec.hidden_size;
        let h = match carry {
            Some(c) => g.constant(&[hs], c.h.clone())?,
            None => g.zeros(&[hs])?,
        };
        let c = match self.spec.controller {
            ControllerKind::Lstm => Some(match carry.and_then(|c| c.c.clone()) {
                Some(v) => g.constant(&[hs], v)?,
                None => g.zeros(&[hs])?,
            }),
            ControllerKind::Elman => None,
        };
        let stacks = self
            .layout
            .heads
            .iter()
            .map(|hd| g.zeros(&[0, hd.cell_dim]))
            .collect::<Result<_, _>>()?;
        let read = match &self.spec.stack {
            Some(s) => Some(g.zeros(&[s.read_width()])?),
            None => None,
        };
        Ok(GraphState { h, c, stacks, read })
    }

    pub fn carry(&self, g: &Graph<F>, state: &GraphState) -> CarriedState<F> {
        CarriedState {
            h: g.value(state.h).to_vec(),
            c: state.c.map(|c| g.value(c).to_vec()),
        }
    }

    /// Hidden update `h_t = f(W_h h_{t-1} + W_x x_t + W_r r_{t-1} + b)`;
    /// returns `(h_t, c_t)` where `c_t` is the LSTM cell.
    pub fn controller_step(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        state: &GraphState,
        symbol: usize,
    ) -> Result<(NodeId, Option<NodeId>), ModelError> {
        if symbol >= self.spec.vocab_size {
            return Err(ModelError::SymbolOutOfRange {
                symbol,
                vocab: self.spec.vocab_size,
            });
        }
        let l = &self.layout;
        let x_term = match l.embed {
            None => g.row(b.ids[l.w_x], symbol)?,
            Some(e) => {
                let emb = g.row(b.ids[e], symbol)?;
                g.matmul(b.ids[l.w_x], emb)?
            }
        };
        let rec = g.matmul(b.ids[l.w_h], state.h)?;
        let mut terms = vec![x_term, rec, b.ids[l.b]];
        if let (Some(w), Some(r)) = (l.w_read_in, state.read) {
            terms.push(g.matmul(b.ids[w], r)?);
        }
        let pre = g.add_all(&terms)?;
        let hs = self.spec.hidden_size;
        match self.spec.controller {
            ControllerKind::Elman => Ok((g.tanh(pre)?, None)),
            ControllerKind::Lstm => {
                let c_prev = state
                    .c
                    .ok_or_else(|| ModelError::Spec("LSTM state without cell".into()))?;
                let gi = g.slice(pre, 0, hs)?;
                let gf = g.slice(pre, hs, hs)?;
                let gg = g.slice(pre, 2 * hs, hs)?;
                let go = g.slice(pre, 3 * hs, hs)?;
                let i = g.sigmoid(gi)?;
                let f = g.sigmoid(gf)?;
                let cand = g.tanh(gg)?;
                let o = g.sigmoid(go)?;
                let keep = g.mul(f, c_prev)?;
                let write = g.mul(i, cand)?;
                let c = g.add(keep, write)?;
                let tc = g.tanh(c)?;
                let h = g.mul(o, tc)?;
                Ok((h, Some(c)))
            }
        }
    }

    /// Action distribution (push, pop, no-op) and push value for head `k`.
    pub fn stack_action(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        k: usize,
        h: NodeId,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let hd = self
            .layout
            .heads
            .get(k)
            .ok_or_else(|| ModelError::Spec(format!("no stack head {k}")))?;
        let z = g.matmul(b.ids[hd.w_act], h)?;
        let z = g.add(z, b.ids[hd.b_act])?;
        let actions = g.softmax(z)?;
        let value = match hd.w_push {
            Some(w) => {
                let pv = g.matmul(b.ids[w], h)?;
                g.sigmoid(pv)?
            }
            None => h,
        };
        Ok((actions, value))
    }

    /// `W_y h_t + W_s r_t + b_y`.
    pub fn output_step(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        h: NodeId,
        read: Option<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let l = &self.layout;
        let wy = g.matmul(b.ids[l.w_y], h)?;
        let mut logits = g.add(wy, b.ids[l.b_y])?;
        if let (Some(w), Some(r)) = (l.w_read_out, read) {
            let ws = g.matmul(b.ids[w], r)?;
            logits = g.add(logits, ws)?;
        }
        Ok(logits)
    }

    /// Full step: controller, stack actions and updates, output.
    pub fn step(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        state: &GraphState,
        symbol: usize,
    ) -> Result<(GraphState, StepOutput), ModelError> {
        let (h, c) = self.controller_step(g, b, state, symbol)?;
        self.finish_step(g, b, state, h, c)
    }

    fn finish_step(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        state: &GraphState,
        h: NodeId,
        c: Option<NodeId>,
    ) -> Result<(GraphState, StepOutput), ModelError> {
        let mut stacks = Vec::with_capacity(state.stacks.len());
        let mut reads = Vec::with_capacity(state.stacks.len());
        let mut actions = Vec::with_capacity(state.stacks.len());
        let depth = self.spec.stack.as_ref().map_or(1, |s| s.read_depth);
        for (k, &s) in state.stacks.iter().enumerate() {
            let (a, v) = self.stack_action(g, b, k, h)?;
            let s_next = g.stack_update(s, a, v)?;
            reads.push(g.stack_read(s_next, depth)?);
            stacks.push(s_next);
            actions.push(a);
        }
        let read = match reads.len() {
            0 => None,
            1 => Some(reads[0]),
            _ => Some(g.concat(&reads)?),
        };
        let logits = self.output_step(g, b, h, read)?;
        Ok((GraphState { h, c, stacks, read }, StepOutput { logits, actions }))
    }

    /// Summed cross-entropy of `targets[t]` given `inputs[..=t]`.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<NodeId, ModelError> {
        let (loss, _) = self.sequence_loss_from(g, b, None, inputs, targets)?;
        Ok(loss)
    }

    /// Like [`sequence_loss`](Self::sequence_loss) but starting from a
    /// carried controller state; also returns the final graph state.
    pub fn sequence_loss_from(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        carry: Option<&CarriedState<F>>,
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<(NodeId, GraphState), ModelError> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(ModelError::Spec(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let mut state = self.state_from_carry(g, carry)?;
        let mut losses = Vec::with_capacity(inputs.len());
        for (t, (&x, &y)) in inputs.iter().zip(targets).enumerate() {
            let (next, out) = self.step(g, b, &state, x).map_err(|e| match e {
                ModelError::Autodiff(a) => at_step(t)(a),
                other => other,
            })?;
            losses.push(g.cross_entropy(out.logits, y).map_err(at_step(t))?);
            state = next;
        }
        Ok((g.add_all(&losses)?, state))
    }

    /// Inference pass with no gradient bookkeeping.
    pub fn trace(&self, inputs: &[usize]) -> Result<Trace, ModelError> {
        self.trace_inner(inputs, None)
    }

    /// Inference pass with Gaussian noise of standard deviation `sigma`
    /// added to the hidden state after every controller step.
    pub fn trace_with_noise(&self, inputs: &[usize], sigma: f64, seed: u64) -> Result<Trace, ModelError> {
        self.trace_inner(inputs, Some((sigma, seed)))
    }

    fn trace_inner(&self, inputs: &[usize], noise: Option<(f64, u64)>) -> Result<Trace, ModelError> {
        let mut g = Graph::<F>::new();
        let b = self.bind(&mut g, None)?;
        let mut state = self.initial_state(&mut g)?;
        let mut noise = match noise {
            Some((sigma, seed)) => Some((
                Normal::new(0.0, sigma).map_err(|e| ModelError::Spec(e.to_string()))?,
                ChaCha8Rng::seed_from_u64(seed),
            )),
            None => None,
        };
        let mut logits = Vec::with_capacity(inputs.len());
        let mut actions = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let wrap = |e: ModelError| match e {
                ModelError::Autodiff(a) => at_step(t)(a),
                other => other,
            };
            let (mut h, c) = self.controller_step(&mut g, &b, &state, x).map_err(wrap)?;
            if let Some((dist, rng)) = noise.as_mut() {
                let eps: Vec<F> = (0..self.spec.hidden_size)
                    .map(|_| F::of(dist.sample(rng)))
                    .collect();
                let e = g.constant(&[self.spec.hidden_size], eps)?;
                h = g.add(h, e).map_err(at_step(t))?;
            }
            let (next, out) = self.finish_step(&mut g, &b, &state, h, c).map_err(wrap)?;
            logits.push(g.value(out.logits).iter().map(|v| v.f64()).collect());
            actions.push(
                out.actions
                    .iter()
                    .map(|&a| {
                        let v = g.value(a);
                        [v[0].f64(), v[1].f64(), v[2].f64()]
                    })
                    .collect(),
            );
            state = next;
        }
        Ok(Trace { logits, actions })
    }

    /// Writes the tensor container at `path` and a JSON sidecar next to it.
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        let named: Vec<(&str, &Tensor<F>)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .collect();
        save_tensors(path, &named).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let json = serde_json::to_string_pretty(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(sidecar_path(path), json).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn checkpoint_meta(&self, mode: FreezeMode, init_seed: u64, data_seed: Option<u64>) -> CheckpointMeta {
        CheckpointMeta {
            spec: self.spec.clone(),
            mode,
            groups: self.params.iter().map(|p| (p.name.clone(), p.group)).collect(),
            init_seed,
            data_seed,
        }
    }
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

impl StackRnn<f32> {
    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta), ModelError> {
        let meta_text = fs::read_to_string(sidecar_path(path))
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta_text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let tensors = load_tensors(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let model = Self::from_tensors(meta.spec.clone(), tensors)?;
        Ok((model, meta))
    }
}
