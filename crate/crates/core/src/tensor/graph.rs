use std::collections::BTreeMap;

use super::kernels;
use super::meter::{BufferId, BufferKind, MemoryEvent, MemoryTrace, PlannedMove, Pool, PoolMeter};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type GroupId = usize;

/// Operation that produced a node. Inputs are handles into the same graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    IndexSelect(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    BroadcastLeading(Var, usize),
}

impl Op {
    /// Names of every differentiable operation.
    pub const REGISTERED: &'static [&'static str] = &[
        "matmul",
        "add",
        "sub",
        "mul",
        "scale",
        "add_scalar",
        "exp",
        "log",
        "tanh",
        "sigmoid",
        "gelu",
        "layer_norm",
        "softmax",
        "log_softmax",
        "l2_normalize",
        "sum",
        "mean",
        "concat",
        "slice",
        "index_select",
        "reshape",
        "permute",
        "broadcast_leading",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm(_) => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::L2Normalize(_) => "l2_normalize",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::IndexSelect(..) => "index_select",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastLeading(..) => "broadcast_leading",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::LayerNorm(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::L2Normalize(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::IndexSelect(x, _)
            | Op::Reshape(x, _)
            | Op::Permute(x, _)
            | Op::BroadcastLeading(x, _) => vec![*x],
            Op::Slice { x, .. } => vec![*x],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node<T> {
    op: Op,
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    bytes: u64,
    requires_grad: bool,
    pool: Pool,
    group: Option<GroupId>,
}

impl<T> Node<T> {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

/// A contiguous run of nodes treated as one unit for checkpointing and
/// offload. With `checkpoint` set, interior values are released when the
/// group closes and rebuilt from its boundary inputs during backward.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupInfo {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub checkpoint: bool,
    pub outputs: Vec<Var>,
    pub closed: bool,
}

/// Gradients of the `requires_grad` leaves reached by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Eager reverse-mode differentiation graph.
///
/// Every operation runs immediately and appends a node; node order is a
/// topological order, and [`Graph::backward`] walks it in reverse exactly once.
/// All buffers are counted in a per-graph [`PoolMeter`].
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    groups: Vec<GroupInfo>,
    open_group: Option<GroupId>,
    meter: PoolMeter,
    trace: Option<MemoryTrace>,
    ref_events: usize,
    plan: Vec<PlannedMove>,
    plan_cursor: usize,
    strict: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            groups: Vec::new(),
            open_group: None,
            meter: PoolMeter::default(),
            trace: None,
            ref_events: 0,
            plan: Vec::new(),
            plan_cursor: 0,
            strict: false,
        }
    }

    /// Enforce a FAST byte budget on every allocation and transfer.
    pub fn with_budget(mut self, budget: Option<u64>) -> Self {
        self.meter.fast_budget_bytes = budget;
        self
    }

    /// Record every allocation, free, use and move.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(MemoryTrace::default());
        self
    }

    /// Fail with a numeric-domain error on any non-finite result.
    pub fn with_strict_numerics(mut self) -> Self {
        self.strict = true;
        self
    }

    /// Pool moves to apply at fixed positions of the event stream.
    pub fn with_plan(mut self, mut plan: Vec<PlannedMove>) -> Self {
        plan.sort_by_key(|m| m.at);
        self.plan = plan;
        self.plan_cursor = 0;
        self
    }

    pub fn meter(&self) -> &PoolMeter {
        &self.meter
    }

    pub fn trace(&self) -> Option<&MemoryTrace> {
        self.trace.as_ref()
    }

    pub fn take_trace(&mut self) -> Option<MemoryTrace> {
        self.trace.take()
    }

    pub fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn pool(&self, v: Var) -> Pool {
        self.nodes[v.0].pool
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn group_of(&self, v: Var) -> Option<GroupId> {
        self.nodes[v.0].group
    }

    /// Whether the node currently holds its value (checkpointed interiors do not).
    pub fn is_materialized(&self, v: Var) -> bool {
        self.nodes[v.0].value.is_some()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes[v.0].value.as_ref().ok_or_else(|| {
            Error::Checkpoint(format!(
                "value of node {} ({}) has been released",
                v.0,
                self.nodes[v.0].op.name()
            ))
        })
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v)?.item()
    }

    // ---- event plumbing -------------------------------------------------

    fn tracking(&self) -> bool {
        self.trace.is_some() || !self.plan.is_empty()
    }

    /// Runs planned moves due before the next reference event.
    fn before_reference_event(&mut self) -> Result<()> {
        while self.plan_cursor < self.plan.len() && self.plan[self.plan_cursor].at <= self.ref_events {
            let m = self.plan[self.plan_cursor];
            self.plan_cursor += 1;
            self.move_node(m.node, m.to)?;
        }
        self.ref_events += 1;
        Ok(())
    }

    fn push_event(&mut self, e: MemoryEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.events.push(e);
        }
    }

    fn on_alloc(&mut self, buffer: BufferId, bytes: u64, group: Option<GroupId>) -> Result<()> {
        self.before_reference_event()?;
        let pinned = buffer.kind == BufferKind::Grad
            || (self.nodes[buffer.node].is_leaf() && self.nodes[buffer.node].requires_grad);
        self.push_event(MemoryEvent::Alloc {
            buffer,
            bytes,
            pool: Pool::Fast,
            group,
            pinned,
        });
        self.meter.alloc(Pool::Fast, bytes).map_err(|e| self.annotate_budget(e))
    }

    fn on_free(&mut self, buffer: BufferId, bytes: u64, pool: Pool) -> Result<()> {
        self.before_reference_event()?;
        self.push_event(MemoryEvent::Free { buffer, bytes, pool });
        self.meter.free(pool, bytes)
    }

    fn on_use(&mut self, nodes: &[usize]) -> Result<()> {
        let tracking = self.tracking();
        if tracking {
            self.before_reference_event()?;
        }
        for &n in nodes {
            if self.nodes[n].pool == Pool::Host {
                self.move_node(n, Pool::Fast)?;
            }
        }
        if tracking {
            self.push_event(MemoryEvent::Use { nodes: nodes.to_vec() });
        }
        Ok(())
    }

    fn on_marker(&mut self, e: MemoryEvent) -> Result<()> {
        self.before_reference_event()?;
        self.push_event(e);
        Ok(())
    }

    fn annotate_budget(&self, e: Error) -> Error {
        match e {
            Error::Budget { live, peak, budget, .. } => Error::Budget {
                live,
                peak,
                budget,
                advisory_min: None,
            },
            other => other,
        }
    }

    fn move_node(&mut self, node: usize, to: Pool) -> Result<()> {
        let n = &self.nodes[node];
        if n.pool == to {
            return Ok(());
        }
        if n.value.is_none() {
            return Err(Error::Checkpoint(format!(
                "cannot move released node {node} to {to:?}"
            )));
        }
        let (from, bytes) = (n.pool, n.bytes);
        self.push_event(MemoryEvent::Move {
            buffer: BufferId {
                node,
                kind: BufferKind::Value,
            },
            bytes,
            from,
            to,
        });
        self.nodes[node].pool = to;
        self.meter.transfer(from, to, bytes)
    }

    fn release_value(&mut self, node: usize) -> Result<()> {
        if self.nodes[node].value.take().is_some() {
            let (bytes, pool) = (self.nodes[node].bytes, self.nodes[node].pool);
            self.nodes[node].pool = Pool::Fast;
            self.on_free(
                BufferId {
                    node,
                    kind: BufferKind::Value,
                },
                bytes,
                pool,
            )?;
        }
        Ok(())
    }

    // ---- node construction ---------------------------------------------

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NumericDomain { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(op, value, requires_grad)
    }

    fn push_node(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        let bytes = value.byte_size();
        let group = self.open_group;
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            op,
            value: Some(value),
            bytes,
            requires_grad,
            pool: Pool::Fast,
            group,
        });
        self.on_alloc(
            BufferId {
                node: id,
                kind: BufferKind::Value,
            },
            bytes,
            group,
        )?;
        Ok(Var(id))
    }

    /// An input or parameter. Gradients are reported for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push_node(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn apply(&mut self, op: Op) -> Result<Var> {
        let inputs: Vec<usize> = op.inputs().iter().map(|v| v.0).collect();
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::Contract(format!("unknown node {i}")));
            }
            if self.nodes[i].value.is_none() {
                let grp = self.nodes[i].group;
                return Err(Error::Checkpoint(format!(
                    "node {i} was released by checkpoint group {grp:?}; declare it as a group output"
                )));
            }
        }
        self.on_use(&inputs)?;
        let value = eval(&op, &self.nodes)?;
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul(a, b))
    }

    /// `a + b`, with `b` broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu(x))
    }

    /// Normalises the last axis (epsilon 1e-5), no affine part.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LayerNorm(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax(x))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2Normalize(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanAll(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { x, axis, start, len })
    }

    /// Rows of `x` (axis 0) in the given order; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::IndexSelect(x, indices.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(x, shape.to_vec()))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidShape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        self.apply(Op::BroadcastLeading(x, n))
    }

    // ---- groups and pools ------------------------------------------------

    pub fn begin_group(&mut self, label: impl Into<String>, checkpoint: bool) -> Result<GroupId> {
        if let Some(open) = self.open_group {
            return Err(Error::Checkpoint(format!(
                "group {open} is still open; groups do not nest"
            )));
        }
        let id = self.groups.len();
        self.groups.push(GroupInfo {
            label: label.into(),
            start: self.nodes.len(),
            end: self.nodes.len(),
            checkpoint,
            outputs: Vec::new(),
            closed: false,
        });
        self.open_group = Some(id);
        Ok(id)
    }

    /// Closes a group. Only `outputs` (and leaves) stay readable afterwards
    /// when the group checkpoints.
    pub fn end_group(&mut self, id: GroupId, outputs: &[Var]) -> Result<()> {
        if self.open_group != Some(id) {
            return Err(Error::Checkpoint(format!("group {id} is not the open group")));
        }
        let end = self.nodes.len();
        let start = self.groups[id].start;
        for o in outputs {
            if o.0 < start || o.0 >= end {
                return Err(Error::Checkpoint(format!(
                    "output node {} lies outside group {id}",
                    o.0
                )));
            }
        }
        self.open_group = None;
        {
            let g = &mut self.groups[id];
            g.end = end;
            g.outputs = outputs.to_vec();
            g.closed = true;
        }
        if self.groups[id].checkpoint {
            for j in start..end {
                if !self.nodes[j].is_leaf() && !outputs.contains(&Var(j)) {
                    self.release_value(j)?;
                }
            }
        }
        self.on_marker(MemoryEvent::GroupEnd { group: id })
    }

    /// Moves a node's value between pools; values are untouched.
    pub fn pool_move(&mut self, v: Var, to: Pool) -> Result<()> {
        self.move_node(v.0, to)
    }

    fn recompute(&mut self, group: GroupId, upto: usize) -> Result<()> {
        let g = &self.groups[group];
        if !g.closed {
            return Err(Error::Checkpoint(format!("group {group} was never closed")));
        }
        let start = g.start;
        self.on_marker(MemoryEvent::Recompute { group })?;
        for j in start..=upto {
            if self.nodes[j].value.is_some() || self.nodes[j].is_leaf() {
                continue;
            }
            let inputs: Vec<usize> = self.nodes[j].op.inputs().iter().map(|v| v.0).collect();
            if let Some(&missing) = inputs.iter().find(|&&i| self.nodes[i].value.is_none()) {
                return Err(Error::Checkpoint(format!(
                    "recompute of group {group} is missing input node {missing}"
                )));
            }
            self.on_use(&inputs)?;
            let value = eval(&self.nodes[j].op, &self.nodes)?;
            if self.strict && !value.is_finite() {
                return Err(Error::NumericDomain {
                    op: self.nodes[j].op.name(),
                });
            }
            self.nodes[j].value = Some(value);
            self.nodes[j].pool = Pool::Fast;
            let bytes = self.nodes[j].bytes;
            self.on_alloc(
                BufferId {
                    node: j,
                    kind: BufferKind::Value,
                },
                bytes,
                Some(group),
            )?;
        }
        Ok(())
    }

    fn ensure_values(&mut self, node: usize) -> Result<()> {
        let mut needed: Vec<usize> = self.nodes[node].op.inputs().iter().map(|v| v.0).collect();
        needed.push(node);
        for n in needed {
            if self.nodes[n].value.is_none() {
                let group = self.nodes[n].group.ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "node {n} has no value and no checkpoint group to rebuild it"
                    ))
                })?;
                self.recompute(group, node)?;
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Interior values and gradients are
    /// released as soon as they are consumed, so the graph's activations are
    /// gone afterwards; read anything needed before calling this.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        if let Some(open) = self.open_group {
            return Err(Error::Checkpoint(format!("group {open} is still open")));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads = BTreeMap::new();
        if self.nodes[root.0].requires_grad {
            let seed = Tensor::ones(&self.nodes[root.0].shape);
            self.on_alloc(grad_buf(root.0), seed.byte_size(), None)?;
            grads[root.0] = Some(seed);
        }
        for i in (0..n).rev() {
            let g = grads[i].take();
            if self.nodes[i].is_leaf() {
                if let Some(g) = g {
                    leaf_grads.insert(Var(i), g);
                }
                continue;
            }
            let Some(g) = g else {
                self.release_value(i)?;
                continue;
            };
            self.ensure_values(i)?;
            let mut used: Vec<usize> = self.nodes[i].op.inputs().iter().map(|v| v.0).collect();
            used.push(i);
            self.on_use(&used)?;
            let contribs = {
                let node = &self.nodes[i];
                backward_op(&node.op, node.value.as_ref().expect("ensured"), &g, &self.nodes)?
            };
            for (input, gi) in contribs {
                let k = input.0;
                if !self.nodes[k].requires_grad {
                    continue;
                }
                match grads[k].as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        self.on_alloc(grad_buf(k), gi.byte_size(), None)?;
                        grads[k] = Some(gi);
                    }
                }
            }
            self.on_free(grad_buf(i), g.byte_size(), Pool::Fast)?;
            self.release_value(i)?;
        }
        // Leaf gradients leave the graph with the caller.
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() && node.requires_grad {
                out.insert(Var(i), Tensor::zeros(&node.shape));
            }
        }
        for (v, g) in leaf_grads {
            self.on_free(grad_buf(v.0), g.byte_size(), Pool::Fast)?;
            if self.nodes[v.0].requires_grad {
                out.insert(v, g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn grad_buf(node: usize) -> BufferId {
    BufferId {
        node,
        kind: BufferKind::Grad,
    }
}

fn input<T>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    nodes[v.0].value.as_ref().expect("input value present")
}

fn eval<T: Element>(op: &Op, nodes: &[Node<T>]) -> Result<Tensor<T>> {
    let val = |v: Var| input(nodes, v);
    match op {
        Op::Leaf => Err(Error::Contract("leaves are not evaluated".into())),
        Op::MatMul(a, b) => kernels::matmul(val(*a), val(*b)),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let name = op.name();
            kernels::check_broadcast(name, x.shape(), y.shape())?;
            let data = match op {
                Op::Add(..) => kernels::zip_broadcast(x, y, |p, q| p + q),
                Op::Sub(..) => kernels::zip_broadcast(x, y, |p, q| p - q),
                _ => kernels::zip_broadcast(x, y, |p, q| p * q),
            };
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Scale(x, c) => {
            let c = T::from_f64(*c);
            Ok(kernels::map(val(*x), |v| v * c))
        }
        Op::AddScalar(x, c) => {
            let c = T::from_f64(*c);
            Ok(kernels::map(val(*x), |v| v + c))
        }
        Op::Exp(x) => Ok(kernels::map(val(*x), |v| v.exp())),
        Op::Log(x) => Ok(kernels::map(val(*x), |v| v.ln())),
        Op::Tanh(x) => Ok(kernels::map(val(*x), |v| v.tanh())),
        Op::Sigmoid(x) => Ok(kernels::map(val(*x), kernels::sigmoid)),
        Op::Gelu(x) => Ok(kernels::map(val(*x), kernels::gelu)),
        Op::LayerNorm(x) => Ok(kernels::layer_norm(val(*x))),
        Op::Softmax(x) => Ok(kernels::softmax(val(*x))),
        Op::LogSoftmax(x) => Ok(kernels::log_softmax(val(*x))),
        Op::L2Normalize(x) => Ok(kernels::l2_normalize(val(*x))),
        Op::SumAll(x) => Ok(Tensor::scalar(
            val(*x).data().iter().fold(T::zero(), |s, &v| s + v),
        )),
        Op::MeanAll(x) => {
            let t = val(*x);
            let s = t.data().iter().fold(T::zero(), |s, &v| s + v);
            Ok(Tensor::scalar(s / T::from_f64(t.numel() as f64)))
        }
        Op::Concat(parts, axis) => {
            let ts: Vec<&Tensor<T>> = parts.iter().map(|&p| val(p)).collect();
            kernels::concat(&ts, *axis)
        }
        Op::Slice { x, axis, start, len } => kernels::slice(val(*x), *axis, *start, *len),
        Op::IndexSelect(x, idx) => kernels::index_select(val(*x), idx),
        Op::Reshape(x, shape) => val(*x).clone().reshape(shape),
        Op::Permute(x, perm) => kernels::permute(val(*x), perm),
        Op::BroadcastLeading(x, n) => {
            let t = val(*x);
            if *n == 0 {
                return Err(Error::InvalidShape("broadcast to zero rows".into()));
            }
            let mut shape = vec![*n];
            shape.extend_from_slice(t.shape());
            let mut data = Vec::with_capacity(n * t.numel());
            for _ in 0..*n {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        }
    }
}

fn backward_op<T: Element>(
    op: &Op,
    y: &Tensor<T>,
    dy: &Tensor<T>,
    nodes: &[Node<T>],
) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| input(nodes, v);
    let same = |x: &Tensor<T>, data: Vec<T>| Tensor::new(x.shape().to_vec(), data);
    Ok(match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (da, db) = kernels::matmul_backward(val(*a), val(*b), dy)?;
            vec![(*a, da), (*b, db)]
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let bt = val(*b);
            let mut db = kernels::reduce_to_suffix(dy.data(), bt.numel());
            if matches!(op, Op::Sub(..)) {
                db.iter_mut().for_each(|v| *v = -*v);
            }
            vec![(*a, dy.clone()), (*b, same(bt, db)?)]
        }
        Op::Mul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let da = kernels::zip_broadcast(dy, bt, |g, q| g * q);
            let prod: Vec<T> = dy.data().iter().zip(at.data()).map(|(&g, &p)| g * p).collect();
            let db = kernels::reduce_to_suffix(&prod, bt.numel());
            vec![(*a, same(at, da)?), (*b, same(bt, db)?)]
        }
        Op::Scale(x, c) => {
            let c = T::from_f64(*c);
            vec![(*x, kernels::map(dy, |g| g * c))]
        }
        Op::AddScalar(x, _) => vec![(*x, dy.clone())],
        Op::Exp(x) => {
            let d = dy.data().iter().zip(y.data()).map(|(&g, &e)| g * e).collect();
            vec![(*x, same(dy, d)?)]
        }
        Op::Log(x) => {
            let d = dy.data().iter().zip(val(*x).data()).map(|(&g, &v)| g / v).collect();
            vec![(*x, same(dy, d)?)]
        }
        Op::Tanh(x) => {
            let d = dy
                .data()
                .iter()
                .zip(y.data())
                .map(|(&g, &t)| g * (T::one() - t * t))
                .collect();
            vec![(*x, same(dy, d)?)]
        }
        Op::Sigmoid(x) => {
            let d = dy
                .data()
                .iter()
                .zip(y.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            vec![(*x, same(dy, d)?)]
        }
        Op::Gelu(x) => {
            let d = dy
                .data()
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| g * kernels::gelu_grad(v))
                .collect();
            vec![(*x, same(dy, d)?)]
        }
        Op::LayerNorm(x) => vec![(*x, kernels::layer_norm_backward(val(*x), y, dy))],
        Op::Softmax(x) => vec![(*x, kernels::softmax_backward(y, dy))],
        Op::LogSoftmax(x) => vec![(*x, kernels::log_softmax_backward(y, dy))],
        Op::L2Normalize(x) => vec![(*x, kernels::l2_normalize_backward(val(*x), y, dy))],
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), dy.item()?))],
        Op::MeanAll(x) => {
            let t = val(*x);
            let g = dy.item()? / T::from_f64(t.numel() as f64);
            vec![(*x, Tensor::full(t.shape(), g))]
        }
        Op::Concat(parts, axis) => {
            let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| nodes[p.0].shape.clone()).collect();
            parts
                .iter()
                .copied()
                .zip(kernels::concat_backward(&shapes, *axis, dy))
                .collect()
        }
        Op::Slice { x, axis, start, .. } => {
            vec![(*x, kernels::slice_backward(&nodes[x.0].shape, *axis, *start, dy))]
        }
        Op::IndexSelect(x, idx) => {
            vec![(*x, kernels::index_select_backward(&nodes[x.0].shape, idx, dy))]
        }
        Op::Reshape(x, _) => vec![(*x, dy.clone().reshape(&nodes[x.0].shape)?)],
        Op::Permute(x, perm) => vec![(*x, kernels::permute(dy, &kernels::inverse_perm(perm))?)],
        Op::BroadcastLeading(x, _) => {
            let shape = &nodes[x.0].shape;
            let n: usize = shape.iter().product();
            vec![(*x, Tensor::new(shape.clone(), kernels::reduce_to_suffix(dy.data(), n))?)]
        }
    })
}
