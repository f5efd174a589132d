//! Deterministic reverse-mode gradient engine.
//!
//! A [`Graph`] is an ordered list of primitive nodes; each node names its
//! parents by index, so insertion order is already a topological order.
//! [`Graph::forward`] evaluates every node and retains all activations;
//! [`Graph::backward`] walks the list in reverse and accumulates exact
//! gradients into every parameter. [`Graph::grad_check`] compares those
//! gradients against central finite differences.
//!
//! The primitive set is the minimal closed set needed by the autoencoder,
//! the entropy-model CDF and the loss: affine, add, multiply, softplus,
//! sigmoid, tanh, log, square, reciprocal, clamp-min, floor, mean-reduce,
//! sum-reduce, concat, slice. Floor propagates a zero gradient (its
//! almost-everywhere derivative) and is flagged as excluded by
//! `grad_check`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { slot: usize },
    Param,
    Const,
    /// parents: [x (BxI), w (IxO), b (O)]; y = x @ w + b
    Affine,
    Add,
    Mul,
    Softplus,
    Sigmoid,
    Tanh,
    Log,
    Square,
    Reciprocal,
    ClampMin { min: f64 },
    Floor,
    MeanReduce,
    SumReduce,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Affine => "affine",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Log => "log",
            Op::Square => "square",
            Op::Reciprocal => "reciprocal",
            Op::ClampMin { .. } => "clamp_min",
            Op::Floor => "floor",
            Op::MeanReduce => "mean_reduce",
            Op::SumReduce => "sum_reduce",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    name: Option<String>,
}

/// How two operand shapes line up for `add`/`mul`.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// Right operand is a single element.
    RightScalar,
    /// Left operand is a single element.
    LeftScalar,
    /// Right operand is a [1, N] row against a [B, N] left.
    RightRow,
    /// Left operand is a [1, N] row against a [B, N] right.
    LeftRow,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<(Broadcast, Vec<usize>)> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        return Some((Broadcast::Same, a.to_vec()));
    }
    if bn == 1 {
        return Some((Broadcast::RightScalar, a.to_vec()));
    }
    if an == 1 {
        return Some((Broadcast::LeftScalar, b.to_vec()));
    }
    if a.len() == 2 && b.len() == 2 && a[1] == b[1] {
        if b[0] == 1 {
            return Some((Broadcast::RightRow, a.to_vec()));
        }
        if a[0] == 1 {
            return Some((Broadcast::LeftRow, b.to_vec()));
        }
    }
    None
}

/// Result of a finite-difference gradient audit for one parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// Max |analytic - central difference| over the parameter, relative to
    /// the largest gradient magnitude seen in that parameter.
    pub max_rel_err: f64,
    /// True when every path from this parameter to the output crosses a
    /// non-differentiable node; such parameters are skipped.
    pub excluded: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Non-differentiable nodes present in the graph (currently: floor).
    pub excluded_nodes: Vec<String>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.excluded)
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Static compute graph with retained activations and gradient buffers.
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    input_ids: Vec<NodeId>,
    param_ids: Vec<NodeId>,
    output: Option<NodeId>,
    ran_forward: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            input_ids: Vec::new(),
            param_ids: Vec::new(),
            output: None,
            ran_forward: false,
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        for &p in &parents {
            assert!(p < id, "parent {p} of node {id} not yet defined");
        }
        let n: usize = shape.iter().product();
        self.nodes.push(Node {
            op,
            parents,
            shape: shape.clone(),
            name: None,
        });
        self.values.push(Tensor::zeros(&shape));
        self.grads.push(vec![0.0; n]);
        id
    }

    pub fn set_name(&mut self, id: NodeId, name: &str) {
        self.nodes[id].name = Some(name.to_string());
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id].name {
            Some(n) => format!("node {id} ({}, \"{n}\")", self.nodes[id].op.name()),
            None => format!("node {id} ({})", self.nodes[id].op.name()),
        }
    }

    // ---- construction ----------------------------------------------------

    /// Declare an input placeholder with a fixed shape.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.input_ids.len();
        let id = self.push(Op::Input { slot }, vec![], shape.to_vec());
        self.input_ids.push(id);
        id
    }

    /// Declare a trainable parameter initialised with `value`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, vec![], value.shape().to_vec());
        self.values[id] = value;
        self.param_ids.push(id);
        self.set_name(id, name);
        id
    }

    /// Embed a constant tensor (no gradient is accumulated into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Const, vec![], value.shape().to_vec());
        self.values[id] = value;
        id
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws, bs) = (
            self.nodes[x].shape.clone(),
            self.nodes[w].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        assert!(xs.len() == 2 && ws.len() == 2, "affine wants rank-2 x and w");
        assert_eq!(xs[1], ws[0], "affine inner dims: x {xs:?} vs w {ws:?}");
        assert_eq!(bs.iter().product::<usize>(), ws[1], "affine bias length");
        self.push(Op::Affine, vec![x, w, b], vec![xs[0], ws[1]])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, shape) = broadcast_kind(&self.nodes[a].shape, &self.nodes[b].shape)
            .unwrap_or_else(|| {
                panic!(
                    "add: incompatible shapes {:?} vs {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                )
            });
        self.push(Op::Add, vec![a, b], shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, shape) = broadcast_kind(&self.nodes[a].shape, &self.nodes[b].shape)
            .unwrap_or_else(|| {
                panic!(
                    "mul: incompatible shapes {:?} vs {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                )
            });
        self.push(Op::Mul, vec![a, b], shape)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// a - b, assembled from the primitive set.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.mul_const(b, -1.0);
        self.add(a, nb)
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        self.push(op, vec![x], shape)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Softplus, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x)
    }
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log, x)
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square, x)
    }
    pub fn reciprocal(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Reciprocal, x)
    }
    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        self.unary(Op::ClampMin { min }, x)
    }
    pub fn floor(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Floor, x)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanReduce, vec![x], vec![1])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumReduce, vec![x], vec![1])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2, "concat axis must be 0 or 1");
        let first = self.nodes[parts[0]].shape.clone();
        assert_eq!(first.len(), 2, "concat wants rank-2 operands");
        let mut shape = first.clone();
        for &p in &parts[1..] {
            let s = &self.nodes[p].shape;
            assert_eq!(s.len(), 2, "concat wants rank-2 operands");
            assert_eq!(s[1 - axis], first[1 - axis], "concat: mismatched shapes");
            shape[axis] += s[axis];
        }
        self.push(Op::Concat { axis }, parts.to_vec(), shape)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let s = self.nodes[x].shape.clone();
        assert_eq!(s.len(), 2, "slice wants a rank-2 operand");
        assert!(axis < 2 && start + len <= s[axis], "slice out of range");
        let mut shape = s;
        shape[axis] = len;
        self.push(Op::Slice { axis, start, len }, vec![x], shape)
    }

    pub fn set_output(&mut self, id: NodeId) {
        assert!(id < self.nodes.len());
        self.output = Some(id);
    }

    // ---- introspection ---------------------------------------------------

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn output_id(&self) -> NodeId {
        self.output.expect("output not set")
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Value computed for a node by the last forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }

    pub fn param_name(&self, id: NodeId) -> &str {
        self.nodes[id].name.as_deref().unwrap_or("")
    }

    pub fn param_data(&self, id: NodeId) -> &[f64] {
        self.values[id].data()
    }

    pub fn param_data_mut(&mut self, id: NodeId) -> &mut [f64] {
        self.values[id].data_mut()
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    /// Visit every parameter as `(param_index, values, grads)`; the
    /// optimizer's update hook.
    pub fn param_update(&mut self, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for pi in 0..self.param_ids.len() {
            let id = self.param_ids[pi];
            let grad = &self.grads[id];
            let data = self.values[id].data_mut();
            f(pi, data, grad);
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ---- execution -------------------------------------------------------

    /// Evaluate every node in insertion order, retaining all activations.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<&Tensor> {
        if inputs.len() != self.input_ids.len() {
            return Err(Error::Config(format!(
                "graph takes {} inputs, got {}",
                self.input_ids.len(),
                inputs.len()
            )));
        }
        for (slot, t) in inputs.iter().enumerate() {
            let id = self.input_ids[slot];
            if t.shape() != self.nodes[id].shape {
                return Err(Error::Config(format!(
                    "input {slot} shape {:?} does not match declared {:?}",
                    t.shape(),
                    self.nodes[id].shape
                )));
            }
        }
        let out = self.output.ok_or_else(|| Error::State("output not set".into()))?;

        for id in 0..self.nodes.len() {
            self.eval_node(id, inputs);
            if !self.values[id].all_finite() {
                self.ran_forward = false;
                return Err(Error::Numeric(format!(
                    "non-finite value at {}",
                    self.describe(id)
                )));
            }
        }
        self.ran_forward = true;
        Ok(&self.values[out])
    }

    fn eval_node(&mut self, id: NodeId, inputs: &[Tensor]) {
        let parents = self.nodes[id].parents.clone();
        let out_len: usize = self.nodes[id].shape.iter().product();
        let mut out = vec![0.0; out_len];
        match &self.nodes[id].op {
            Op::Input { slot } => {
                out.copy_from_slice(inputs[*slot].data());
            }
            Op::Param | Op::Const => return, // value persists
            Op::Affine => {
                let (x, w, b) = (
                    self.values[parents[0]].data(),
                    self.values[parents[1]].data(),
                    self.values[parents[2]].data(),
                );
                let bsz = self.nodes[parents[0]].shape[0];
                let i_dim = self.nodes[parents[0]].shape[1];
                let o_dim = self.nodes[parents[1]].shape[1];
                for bi in 0..bsz {
                    let row = &mut out[bi * o_dim..(bi + 1) * o_dim];
                    row.copy_from_slice(b);
                    for k in 0..i_dim {
                        let xv = x[bi * i_dim + k];
                        if xv != 0.0 {
                            let wrow = &w[k * o_dim..(k + 1) * o_dim];
                            for (o, wv) in wrow.iter().enumerate() {
                                row[o] += xv * wv;
                            }
                        }
                    }
                }
            }
            Op::Add | Op::Mul => {
                let a = self.values[parents[0]].data();
                let b = self.values[parents[1]].data();
                let (kind, _) = broadcast_kind(
                    &self.nodes[parents[0]].shape,
                    &self.nodes[parents[1]].shape,
                )
                .unwrap();
                let is_add = matches!(self.nodes[id].op, Op::Add);
                let combine = |x: f64, y: f64| if is_add { x + y } else { x * y };
                match kind {
                    Broadcast::Same => {
                        for (o, (&x, &y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
                            *o = combine(x, y);
                        }
                    }
                    Broadcast::RightScalar => {
                        let y = b[0];
                        for (o, &x) in out.iter_mut().zip(a.iter()) {
                            *o = combine(x, y);
                        }
                    }
                    Broadcast::LeftScalar => {
                        let x = a[0];
                        for (o, &y) in out.iter_mut().zip(b.iter()) {
                            *o = combine(x, y);
                        }
                    }
                    Broadcast::RightRow => {
                        let n = b.len();
                        for (i, o) in out.iter_mut().enumerate() {
                            *o = combine(a[i], b[i % n]);
                        }
                    }
                    Broadcast::LeftRow => {
                        let n = a.len();
                        for (i, o) in out.iter_mut().enumerate() {
                            *o = combine(a[i % n], b[i]);
                        }
                    }
                }
            }
            Op::Softplus => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = softplus(x);
                }
            }
            Op::Sigmoid => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = sigmoid(x);
                }
            }
            Op::Tanh => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = x.tanh();
                }
            }
            Op::Log => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = x.ln();
                }
            }
            Op::Square => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = x * x;
                }
            }
            Op::Reciprocal => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = 1.0 / x;
                }
            }
            Op::ClampMin { min } => {
                let m = *min;
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = x.max(m);
                }
            }
            Op::Floor => {
                for (o, &x) in out.iter_mut().zip(self.values[parents[0]].data()) {
                    *o = x.floor();
                }
            }
            Op::MeanReduce => {
                let x = self.values[parents[0]].data();
                out[0] = x.iter().sum::<f64>() / x.len() as f64;
            }
            Op::SumReduce => {
                out[0] = self.values[parents[0]].data().iter().sum();
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].shape.clone();
                if axis == 0 {
                    let mut at = 0;
                    for &p in &parents {
                        let d = self.values[p].data();
                        out[at..at + d.len()].copy_from_slice(d);
                        at += d.len();
                    }
                } else {
                    let rows = out_shape[0];
                    let ocols = out_shape[1];
                    let mut col_at = 0;
                    for &p in &parents {
                        let pcols = self.nodes[p].shape[1];
                        let d = self.values[p].data();
                        for r in 0..rows {
                            out[r * ocols + col_at..r * ocols + col_at + pcols]
                                .copy_from_slice(&d[r * pcols..(r + 1) * pcols]);
                        }
                        col_at += pcols;
                    }
                }
            }
            Op::Slice { axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let src_shape = self.nodes[parents[0]].shape.clone();
                let d = self.values[parents[0]].data();
                if axis == 0 {
                    let cols = src_shape[1];
                    out.copy_from_slice(&d[start * cols..(start + len) * cols]);
                } else {
                    let cols = src_shape[1];
                    let rows = src_shape[0];
                    for r in 0..rows {
                        out[r * len..(r + 1) * len]
                            .copy_from_slice(&d[r * cols + start..r * cols + start + len]);
                    }
                }
            }
        }
        self.values[id].data_mut().copy_from_slice(&out);
    }

    /// Propagate `output_grad` backwards. Gradients accumulate across calls;
    /// use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<()> {
        if !self.ran_forward {
            return Err(Error::State("backward before forward".into()));
        }
        let out = self.output_id();
        if output_grad.shape() != self.nodes[out].shape {
            return Err(Error::Config(format!(
                "output grad shape {:?} does not match output {:?}",
                output_grad.shape(),
                self.nodes[out].shape
            )));
        }
        // Local seed buffer so upstream contributions stay isolated per call.
        let mut seed: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.shape.iter().product()])
            .collect();
        seed[out].copy_from_slice(output_grad.data());

        for id in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut seed[id]);
            if g.iter().all(|&v| v == 0.0) {
                // Still accumulate into persistent grads for params below.
                if matches!(self.nodes[id].op, Op::Param) {
                    // nothing to add
                }
                seed[id] = g;
                continue;
            }
            self.backprop_node(id, &g, &mut seed);
            seed[id] = g;
        }
        // Fold per-call contributions into the persistent accumulators.
        for id in 0..self.nodes.len() {
            let s = &seed[id];
            let acc = &mut self.grads[id];
            for (a, &v) in acc.iter_mut().zip(s.iter()) {
                *a += v;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], seed: &mut [Vec<f64>]) {
        let parents = &self.nodes[id].parents;
        match &self.nodes[id].op {
            Op::Input { .. } | Op::Param | Op::Const => {}
            Op::Affine => {
                let (xp, wp, bp) = (parents[0], parents[1], parents[2]);
                let x = self.values[xp].data();
                let w = self.values[wp].data();
                let bsz = self.nodes[xp].shape[0];
                let i_dim = self.nodes[xp].shape[1];
                let o_dim = self.nodes[wp].shape[1];
                {
                    let dx = &mut seed[xp];
                    for bi in 0..bsz {
                        let grow = &g[bi * o_dim..(bi + 1) * o_dim];
                        for k in 0..i_dim {
                            let wrow = &w[k * o_dim..(k + 1) * o_dim];
                            let mut acc = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow.iter()) {
                                acc += gv * wv;
                            }
                            dx[bi * i_dim + k] += acc;
                        }
                    }
                }
                {
                    let dw = &mut seed[wp];
                    for bi in 0..bsz {
                        let grow = &g[bi * o_dim..(bi + 1) * o_dim];
                        for k in 0..i_dim {
                            let xv = x[bi * i_dim + k];
                            if xv != 0.0 {
                                let drow = &mut dw[k * o_dim..(k + 1) * o_dim];
                                for (dv, gv) in drow.iter_mut().zip(grow.iter()) {
                                    *dv += xv * gv;
                                }
                            }
                        }
                    }
                }
                {
                    let db = &mut seed[bp];
                    for bi in 0..bsz {
                        for o in 0..o_dim {
                            db[o] += g[bi * o_dim + o];
                        }
                    }
                }
            }
            Op::Add | Op::Mul => {
                let (ap, bp) = (parents[0], parents[1]);
                let (kind, _) =
                    broadcast_kind(&self.nodes[ap].shape, &self.nodes[bp].shape).unwrap();
                let is_add = matches!(self.nodes[id].op, Op::Add);
                let a = self.values[ap].data().to_vec();
                let b = self.values[bp].data().to_vec();
                // d/da = g (add) or g*b (mul); d/db symmetric, reduced over
                // any broadcast dimension.
                let accum = |dst: &mut [f64], i_dst: usize, v: f64| {
                    dst[i_dst] += v;
                };
                for i in 0..g.len() {
                    let (av, bv) = match kind {
                        Broadcast::Same => (a[i], b[i]),
                        Broadcast::RightScalar => (a[i], b[0]),
                        Broadcast::LeftScalar => (a[0], b[i]),
                        Broadcast::RightRow => (a[i], b[i % b.len()]),
                        Broadcast::LeftRow => (a[i % a.len()], b[i]),
                    };
                    let (da, db) = if is_add {
                        (g[i], g[i])
                    } else {
                        (g[i] * bv, g[i] * av)
                    };
                    match kind {
                        Broadcast::Same => {
                            accum(&mut seed[ap], i, da);
                            accum(&mut seed[bp], i, db);
                        }
                        Broadcast::RightScalar => {
                            accum(&mut seed[ap], i, da);
                            accum(&mut seed[bp], 0, db);
                        }
                        Broadcast::LeftScalar => {
                            accum(&mut seed[ap], 0, da);
                            accum(&mut seed[bp], i, db);
                        }
                        Broadcast::RightRow => {
                            accum(&mut seed[ap], i, da);
                            let n = b.len();
                            accum(&mut seed[bp], i % n, db);
                        }
                        Broadcast::LeftRow => {
                            let n = a.len();
                            accum(&mut seed[ap], i % n, da);
                            accum(&mut seed[bp], i, db);
                        }
                    }
                }
            }
            Op::Softplus => {
                let x = self.values[parents[0]].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] += g[i] * sigmoid(x[i]);
                }
            }
            Op::Sigmoid => {
                let y = self.values[id].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh => {
                let y = self.values[id].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Log => {
                let x = self.values[parents[0]].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] += g[i] / x[i];
                }
            }
            Op::Square => {
                let x = self.values[parents[0]].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] += 2.0 * x[i] * g[i];
                }
            }
            Op::Reciprocal => {
                let y = self.values[id].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    d[i] -= g[i] * y[i] * y[i];
                }
            }
            Op::ClampMin { min } => {
                let x = self.values[parents[0]].data();
                let d = &mut seed[parents[0]];
                for i in 0..g.len() {
                    if x[i] >= *min {
                        d[i] += g[i];
                    }
                }
            }
            Op::Floor => {
                // zero almost everywhere
            }
            Op::MeanReduce => {
                let d = &mut seed[parents[0]];
                let scale = g[0] / d.len() as f64;
                for v in d.iter_mut() {
                    *v += scale;
                }
            }
            Op::SumReduce => {
                let d = &mut seed[parents[0]];
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Concat { axis } => {
                if *axis == 0 {
                    let mut at = 0;
                    for &p in parents {
                        let d = &mut seed[p];
                        let n = d.len();
                        for (dv, gv) in d.iter_mut().zip(&g[at..at + n]) {
                            *dv += gv;
                        }
                        at += n;
                    }
                } else {
                    let rows = self.nodes[id].shape[0];
                    let ocols = self.nodes[id].shape[1];
                    let mut col_at = 0;
                    for &p in parents {
                        let pcols = self.nodes[p].shape[1];
                        let d = &mut seed[p];
                        for r in 0..rows {
                            for c in 0..pcols {
                                d[r * pcols + c] += g[r * ocols + col_at + c];
                            }
                        }
                        col_at += pcols;
                    }
                }
            }
            Op::Slice { axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let src_shape = &self.nodes[parents[0]].shape;
                let d = &mut seed[parents[0]];
                if axis == 0 {
                    let cols = src_shape[1];
                    for (i, gv) in g.iter().enumerate() {
                        d[start * cols + i] += gv;
                    }
                } else {
                    let cols = src_shape[1];
                    let rows = src_shape[0];
                    for r in 0..rows {
                        for c in 0..len {
                            d[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
        }
    }

    // ---- gradient auditing -----------------------------------------------

    /// Compare analytic gradients of `sum(output)` against central finite
    /// differences (h = 1e-5) for every parameter. Parameters that can only
    /// reach the output through a non-differentiable node are reported as
    /// excluded and skipped.
    pub fn grad_check(&mut self, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport> {
        const H: f64 = 1e-5;
        let out = self.output_id();

        let excluded_node_ids: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Floor))
            .collect();
        let excluded_nodes = excluded_node_ids
            .iter()
            .map(|&i| self.describe(i))
            .collect::<Vec<_>>();
        let reachable = self.differentiable_reach(out, &excluded_node_ids);

        // Analytic gradients of sum(output).
        self.forward(inputs)?;
        self.zero_grad();
        let ones = Tensor::full(&self.nodes[out].shape.clone(), 1.0);
        self.backward(&ones)?;
        let analytic: Vec<Vec<f64>> = self
            .param_ids
            .iter()
            .map(|&p| self.grads[p].clone())
            .collect();

        let mut entries = Vec::new();
        let mut pass = true;
        let param_ids = self.param_ids.clone();
        for (pi, &p) in param_ids.iter().enumerate() {
            let name = self.param_name(p).to_string();
            if !reachable[p] {
                entries.push(GradCheckEntry {
                    name,
                    max_rel_err: 0.0,
                    excluded: true,
                });
                continue;
            }
            let n = self.values[p].len();
            let mut fd = vec![0.0; n];
            for j in 0..n {
                let orig = self.values[p].data()[j];
                self.values[p].data_mut()[j] = orig + H;
                let fp: f64 = {
                    self.forward(inputs)?;
                    self.values[out].data().iter().sum()
                };
                self.values[p].data_mut()[j] = orig - H;
                let fm: f64 = {
                    self.forward(inputs)?;
                    self.values[out].data().iter().sum()
                };
                self.values[p].data_mut()[j] = orig;
                fd[j] = (fp - fm) / (2.0 * H);
            }
            let scale = analytic[pi]
                .iter()
                .chain(fd.iter())
                .fold(0.0_f64, |m, &v| m.max(v.abs()))
                .max(1e-6);
            let max_rel_err = analytic[pi]
                .iter()
                .zip(fd.iter())
                .map(|(&a, &f)| (a - f).abs() / scale)
                .fold(0.0, f64::max);
            if max_rel_err >= tolerance {
                pass = false;
            }
            entries.push(GradCheckEntry {
                name,
                max_rel_err,
                excluded: false,
            });
        }
        // Restore a clean forward state for the caller.
        self.forward(inputs)?;
        Ok(GradCheckReport {
            entries,
            excluded_nodes,
            tolerance,
            pass,
        })
    }

    /// For each node, whether a path to the output exists that avoids the
    /// listed non-differentiable nodes.
    fn differentiable_reach(&self, output: NodeId, excluded: &[NodeId]) -> Vec<bool> {
        let mut reach = vec![false; self.nodes.len()];
        reach[output] = !excluded.contains(&output);
        for id in (0..self.nodes.len()).rev() {
            if !reach[id] || excluded.contains(&id) {
                continue;
            }
            for &p in &self.nodes[id].parents {
                if !excluded.contains(&p) {
                    reach[p] = true;
                }
            }
        }
        reach
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
