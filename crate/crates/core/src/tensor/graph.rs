use super::{AutodiffError, Scalar, Tensor};

/// Index of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Generic operation selector for [`Graph::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Softmax,
    Concat,
    Slice { start: usize, len: usize },
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize },
    Row { input: usize, row: usize },
    Sum(usize),
    CrossEntropy { logits: usize, target: usize },
    StackUpdate { stack: usize, actions: usize, value: usize },
    StackRead { stack: usize },
}

#[derive(Debug)]
struct Node<F> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<F>,
    requires_grad: bool,
}

/// Append-only operation record. Inputs always precede their consumers, so
/// reverse append order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a graph after one backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for a leaf node; `None` when the leaf did not require
    /// gradients or did not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<F>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One superposition-stack step on a row-major `depth x cell_dim` matrix.
///
/// `out` must hold `(depth + 1) * cell_dim` values. Cells past `depth` read
/// as zero. Actions are ordered (push, pop, no-op).
pub fn superpose_stack<F: Scalar>(
    prev: &[F],
    depth: usize,
    cell_dim: usize,
    actions: [F; 3],
    value: &[F],
    out: &mut [F],
) {
    debug_assert_eq!(prev.len(), depth * cell_dim);
    debug_assert_eq!(out.len(), (depth + 1) * cell_dim);
    let [push, pop, noop] = actions;
    let cell = |i: usize, j: usize| -> F {
        if i < depth {
            prev[i * cell_dim + j]
        } else {
            F::zero()
        }
    };
    for j in 0..cell_dim {
        out[j] = push * value[j] + pop * cell(1, j) + noop * cell(0, j);
    }
    for i in 1..=depth {
        for j in 0..cell_dim {
            out[i * cell_dim + j] = push * cell(i - 1, j) + pop * cell(i + 1, j) + noop * cell(i, j);
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node<F>, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<F> {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<F>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<NodeId, AutodiffError> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Copies a tensor in as a leaf; it participates in backward when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Result<NodeId, AutodiffError> {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            "leaf",
        )
    }

    pub fn param(
        &mut self,
        shape: &[usize],
        data: &[F],
        requires_grad: bool,
    ) -> Result<NodeId, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("leaf", shape, &[data.len()]));
        }
        self.push(Op::Leaf, shape.to_vec(), data.to_vec(), requires_grad, "leaf")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<NodeId, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("constant", shape, &[data.len()]));
        }
        self.push(Op::Leaf, shape.to_vec(), data, false, "constant")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let n = shape.iter().product();
        self.constant(shape, vec![F::zero(); n])
    }

    /// Applies one of the generic operations by kind.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let arity = |n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Invalid(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Slice { start, len } => {
                arity(1)?;
                self.slice(inputs[0], start, len)
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
        }
    }

    /// `[m, k] x [k, n] -> [m, n]` or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let (sa, sb) = (&na.shape, &nb.shape);
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let (av, bv) = (&na.value, &nb.value);
        let mut out = vec![F::zero(); m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = F::of(dot(&av[i * k..(i + 1) * k], bv));
            }
        } else {
            let mut acc = vec![0.0f64; n];
            for i in 0..m {
                acc.iter_mut().for_each(|x| *x = 0.0);
                for p in 0..k {
                    let x = av[i * k + p].f64();
                    if x == 0.0 {
                        continue;
                    }
                    for (s, y) in acc.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *s += x * y.f64();
                    }
                }
                for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                    *o = F::of(*s);
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let rg = na.requires_grad || nb.requires_grad;
        self.push(Op::MatMul(a.0, b.0), shape, out, rg, "matmul")
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>, bool), AutodiffError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(mismatch(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out, na.requires_grad || nb.requires_grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a.0, b.0), shape, out, rg, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a.0, b.0), shape, out, rg, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (shape, out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a.0, b.0), shape, out, rg, "mul")
    }

    /// Sums several same-shaped nodes left to right.
    pub fn add_all(&mut self, ids: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| AutodiffError::Invalid("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| F::of(x.f64() * c)).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(Op::Scale(a.0, c), shape, out, rg, "scale")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| F::of(sigmoid(x.f64()))).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(Op::Sigmoid(a.0), shape, out, rg, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| x.tanh()).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(Op::Tanh(a.0), shape, out, rg, "tanh")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        let width = match na.shape.last() {
            Some(&w) if w > 0 => w,
            _ => return Err(mismatch("softmax", &na.shape, &[])),
        };
        let mut out = vec![F::zero(); na.value.len()];
        for (row, o) in na.value.chunks(width).zip(out.chunks_mut(width)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
            let mut z = 0.0;
            let exps: Vec<f64> = row
                .iter()
                .map(|x| {
                    let e = (x.f64() - max).exp();
                    z += e;
                    e
                })
                .collect();
            for (dst, e) in o.iter_mut().zip(exps) {
                *dst = F::of(e / z);
            }
        }
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(Op::Softmax(a.0), shape, out, rg, "softmax")
    }

    /// Concatenates 1-D nodes.
    pub fn concat(&mut self, ids: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if ids.is_empty() {
            return Err(AutodiffError::Invalid("concat of nothing".into()));
        }
        let mut out = Vec::new();
        let mut rg = false;
        for &id in ids {
            let n = self.node(id)?;
            if n.shape.len() != 1 {
                return Err(mismatch("concat", &n.shape, &[]));
            }
            out.extend_from_slice(&n.value);
            rg |= n.requires_grad;
        }
        let len = out.len();
        self.push(
            Op::Concat(ids.iter().map(|i| i.0).collect()),
            vec![len],
            out,
            rg,
            "concat",
        )
    }

    /// Contiguous range of the flattened input, as a 1-D node.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        if start + len > na.value.len() || len == 0 {
            return Err(mismatch("slice", &na.shape, &[start, len]));
        }
        let out = na.value[start..start + len].to_vec();
        let rg = na.requires_grad;
        self.push(Op::Slice { input: a.0, start }, vec![len], out, rg, "slice")
    }

    /// One row of a 2-D node (an embedding or one-hot column lookup).
    pub fn row(&mut self, a: NodeId, row: usize) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        if na.shape.len() != 2 || row >= na.shape[0] {
            return Err(mismatch("row", &na.shape, &[row]));
        }
        let w = na.shape[1];
        let out = na.value[row * w..(row + 1) * w].to_vec();
        let rg = na.requires_grad;
        self.push(Op::Row { input: a.0, row }, vec![w], out, rg, "row")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let na = self.node(a)?;
        let s: f64 = na.value.iter().map(|x| x.f64()).sum();
        let rg = na.requires_grad;
        self.push(Op::Sum(a.0), Vec::new(), vec![F::of(s)], rg, "sum")
    }

    /// `-log softmax(logits)[target]` as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId, AutodiffError> {
        let nl = self.node(logits)?;
        if nl.shape.len() != 1 || nl.shape[0] < 2 {
            return Err(mismatch("cross_entropy", &nl.shape, &[]));
        }
        let k = nl.shape[0];
        if target >= k {
            return Err(AutodiffError::TargetOutOfRange { target, classes: k });
        }
        let loss = log_sum_exp(&nl.value) - nl.value[target].f64();
        let rg = nl.requires_grad;
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                target,
            },
            Vec::new(),
            vec![F::of(loss)],
            rg,
            "cross_entropy",
        )
    }

    /// Superposition stack update: `stack [D, d]`, `actions [3]` ordered
    /// (push, pop, no-op), `value [d]` gives the new `[D + 1, d]` stack.
    pub fn stack_update(
        &mut self,
        stack: NodeId,
        actions: NodeId,
        value: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (ns, na, nv) = (self.node(stack)?, self.node(actions)?, self.node(value)?);
        if ns.shape.len() != 2 {
            return Err(mismatch("stack_update", &ns.shape, &nv.shape));
        }
        let (depth, d) = (ns.shape[0], ns.shape[1]);
        if na.shape != [3] {
            return Err(mismatch("stack_update", &na.shape, &[3]));
        }
        if nv.shape != [d] {
            return Err(mismatch("stack_update", &ns.shape, &nv.shape));
        }
        let a = [na.value[0], na.value[1], na.value[2]];
        let mut out = vec![F::zero(); (depth + 1) * d];
        superpose_stack(&ns.value, depth, d, a, &nv.value, &mut out);
        let rg = ns.requires_grad || na.requires_grad || nv.requires_grad;
        self.push(
            Op::StackUpdate {
                stack: stack.0,
                actions: actions.0,
                value: value.0,
            },
            vec![depth + 1, d],
            out,
            rg,
            "stack_update",
        )
    }

    /// Top `cells` cells of a `[D, d]` stack, flattened, zero past depth.
    pub fn stack_read(&mut self, stack: NodeId, cells: usize) -> Result<NodeId, AutodiffError> {
        let ns = self.node(stack)?;
        if ns.shape.len() != 2 || cells == 0 {
            return Err(mismatch("stack_read", &ns.shape, &[cells]));
        }
        let (depth, d) = (ns.shape[0], ns.shape[1]);
        let mut out = vec![F::zero(); cells * d];
        let n = cells.min(depth) * d;
        out[..n].copy_from_slice(&ns.value[..n]);
        let rg = ns.requires_grad;
        self.push(Op::StackRead { stack: stack.0 }, vec![cells * d], out, rg, "stack_read")
    }

    /// Reverse pass from a scalar loss. A graph supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<F>, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape.clone()));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            backprop_node(nodes, node, &gy, &mut grads);
        }
        // Only leaf gradients survive.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Dot product accumulated in f64 over four interleaved partial sums.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let mut s = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x.f64() * y.f64())
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            s[j] += x[j].f64() * y[j].f64();
        }
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

fn log_sum_exp<F: Scalar>(xs: &[F]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let s: f64 = xs.iter().map(|x| (x.f64() - max).exp()).sum();
    max + s.ln()
}

fn slot<'a, F: Scalar>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: usize,
) -> Option<&'a mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop_node<F: Scalar>(
    nodes: &[Node<F>],
    node: &Node<F>,
    gy: &[F],
    grads: &mut [Option<Vec<F>>],
) {
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
            let (m, k) = (sa[0], sa[1]);
            let n = if sb.len() == 2 { sb[1] } else { 1 };
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if n == 1 {
                // Matrix-vector product: rank-one dA, and dB = A^T dy.
                if let Some(ga) = slot(grads, nodes, a) {
                    for (i, d) in gy.iter().enumerate() {
                        let d = d.f64();
                        for (g, y) in ga[i * k..(i + 1) * k].iter_mut().zip(bv.iter()) {
                            *g = *g + F::of(d * y.f64());
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    let mut acc = vec![0.0f64; k];
                    for (i, d) in gy.iter().enumerate() {
                        let d = d.f64();
                        for (s, x) in acc.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *s += x.f64() * d;
                        }
                    }
                    for (g, s) in gb.iter_mut().zip(acc) {
                        *g = *g + F::of(s);
                    }
                }
                return;
            }
            if let Some(ga) = slot(grads, nodes, a) {
                // dA = dY * B^T
                for i in 0..m {
                    let gy_row = &gy[i * n..(i + 1) * n];
                    for p in 0..k {
                        let b_row = &bv[p * n..(p + 1) * n];
                        let mut acc = 0.0f64;
                        for (x, y) in gy_row.iter().zip(b_row) {
                            acc += x.f64() * y.f64();
                        }
                        ga[i * k + p] = ga[i * k + p] + F::of(acc);
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                // dB = A^T * dY
                let mut acc = vec![0.0f64; k * n];
                for i in 0..m {
                    let a_row = &av[i * k..(i + 1) * k];
                    let gy_row = &gy[i * n..(i + 1) * n];
                    for (p, x) in a_row.iter().enumerate() {
                        let x = x.f64();
                        for (s, g) in acc[p * n..(p + 1) * n].iter_mut().zip(gy_row) {
                            *s += x * g.f64();
                        }
                    }
                }
                for (g, s) in gb.iter_mut().zip(acc) {
                    *g = *g + F::of(s);
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gb.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + sign * d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(bv.iter()) {
                    *g = *g + d * y;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for ((g, &d), &x) in gb.iter_mut().zip(gy).zip(av.iter()) {
                    *g = *g + d * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut()
                    .zip(gy)
                    .for_each(|(g, &d)| *g = *g + F::of(d.f64() * c));
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(&node.value) {
                    *g = *g + d * y * (F::one() - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(&node.value) {
                    *g = *g + d * (F::one() - y * y);
                }
            }
        }
        Op::Softmax(a) => {
            let width = *node.shape.last().unwrap_or(&1);
            if let Some(ga) = slot(grads, nodes, a) {
                for ((grow, dy), y) in ga
                    .chunks_mut(width)
                    .zip(gy.chunks(width))
                    .zip(node.value.chunks(width))
                {
                    let dot: f64 = dy.iter().zip(y).map(|(d, y)| d.f64() * y.f64()).sum();
                    for ((g, d), yy) in grow.iter_mut().zip(dy).zip(y) {
                        *g = *g + F::of(yy.f64() * (d.f64() - dot));
                    }
                }
            }
        }
        Op::Concat(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&gy[offset..offset + len])
                        .for_each(|(g, &d)| *g = *g + d);
                }
                offset += len;
            }
        }
        Op::Slice { input, start } => {
            if let Some(gi) = slot(grads, nodes, input) {
                gi[start..start + gy.len()]
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(g, &d)| *g = *g + d);
            }
        }
        Op::Row { input, row } => {
            let w = gy.len();
            if let Some(gi) = slot(grads, nodes, input) {
                gi[row * w..(row + 1) * w]
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(g, &d)| *g = *g + d);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|g| *g = *g + gy[0]);
            }
        }
        Op::CrossEntropy { logits, target } => {
            let lv = &nodes[logits].value;
            if let Some(gl) = slot(grads, nodes, logits) {
                let lse = log_sum_exp(lv);
                let up = gy[0].f64();
                for (i, (g, x)) in gl.iter_mut().zip(lv).enumerate() {
                    let p = (x.f64() - lse).exp();
                    let t = if i == target { 1.0 } else { 0.0 };
                    *g = *g + F::of(up * (p - t));
                }
            }
        }
        Op::StackUpdate {
            stack,
            actions,
            value,
        } => {
            let (depth, d) = (nodes[stack].shape[0], nodes[stack].shape[1]);
            let sv = &nodes[stack].value;
            let av = &nodes[actions].value;
            let vv = &nodes[value].value;
            let g_row = |i: usize| &gy[i * d..(i + 1) * d];
            let s_row = |i: usize| -> Option<&[F]> {
                (i < depth).then(|| &sv[i * d..(i + 1) * d])
            };
            let dot = |x: &[F], y: &[F]| -> f64 {
                x.iter().zip(y).map(|(a, b)| a.f64() * b.f64()).sum()
            };
            if let Some(gv) = slot(grads, nodes, value) {
                for (g, &x) in gv.iter_mut().zip(g_row(0)) {
                    *g = *g + av[0] * x;
                }
            }
            if let Some(ga) = slot(grads, nodes, actions) {
                let mut push = dot(g_row(0), vv);
                let mut pop = 0.0;
                let mut noop = 0.0;
                for i in 0..=depth {
                    if i >= 1 {
                        if let Some(s) = s_row(i - 1) {
                            push += dot(g_row(i), s);
                        }
                    }
                    if let Some(s) = s_row(i + 1) {
                        pop += dot(g_row(i), s);
                    }
                    if let Some(s) = s_row(i) {
                        noop += dot(g_row(i), s);
                    }
                }
                ga[0] = ga[0] + F::of(push);
                ga[1] = ga[1] + F::of(pop);
                ga[2] = ga[2] + F::of(noop);
            }
            if let Some(gs) = slot(grads, nodes, stack) {
                let (a0, a1, a2) = (av[0], av[1], av[2]);
                for j in 0..depth {
                    for c in 0..d {
                        let mut acc = a0 * gy[(j + 1) * d + c] + a2 * gy[j * d + c];
                        if j >= 1 {
                            acc = acc + a1 * gy[(j - 1) * d + c];
                        }
                        gs[j * d + c] = gs[j * d + c] + acc;
                    }
                }
            }
        }
        Op::StackRead { stack } => {
            let n = gy.len().min(nodes[stack].value.len());
            if let Some(gs) = slot(grads, nodes, stack) {
                gs[..n]
                    .iter_mut()
                    .zip(&gy[..n])
                    .for_each(|(g, &d)| *g = *g + d);
            }
        }
    }
}
