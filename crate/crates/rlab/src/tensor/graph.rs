//! Static op tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per architecture and never mutated afterwards;
//! node construction order is topological by construction, so the backward
//! pass is a single reverse sweep. Values and gradients live in a [`Run`]
//! buffer, keeping the graph and the [`ParameterStore`] shareable across
//! threads.

use std::collections::BTreeMap;

use super::optim::ParameterStore;
use super::{Tensor, TensorError};

pub type NodeId = usize;

/// Per-node shape metadata tracked at build time.
///
/// `Batched` nodes carry a per-sample shape and get a leading batch
/// dimension at run time; `Fixed` nodes (parameters, constants) have their
/// full shape; `Scalar` nodes are batch reductions of shape `[1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeShape {
    Batched(Vec<usize>),
    Fixed(Vec<usize>),
    Scalar,
}

impl NodeShape {
    fn batched(&self) -> Result<&[usize], TensorError> {
        match self {
            NodeShape::Batched(s) => Ok(s),
            other => Err(TensorError::Shape {
                context: "node kind".into(),
                detail: format!("expected batched node, got {:?}", other),
            }),
        }
    }

    fn fixed(&self) -> Result<&[usize], TensorError> {
        match self {
            NodeShape::Fixed(s) => Ok(s),
            other => Err(TensorError::Shape {
                context: "node kind".into(),
                detail: format!("expected fixed-shape node, got {:?}", other),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input { name: String },
    Param { name: String },
    Const { value: Tensor },
    /// `[B,M] x [M,N] -> [B,N]`
    MatMul { a: NodeId, w: NodeId },
    /// `[B,N] + [N]`, explicit row broadcast
    AddBias { x: NodeId, b: NodeId },
    /// `[B,C,H,W] + [C]`, explicit channel broadcast
    AddChannelBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Log { x: NodeId },
    /// Row-wise softmax over the trailing dimension of `[B,K]`.
    Softmax { x: NodeId },
    /// `[B,K] -> [B]`
    RowSum { x: NodeId },
    /// Sum of every element, including the batch dimension -> `[1]`.
    SumAll { x: NodeId },
    /// Mean of every element, including the batch dimension -> `[1]`.
    MeanAll { x: NodeId },
    /// `[B, s...] -> [B, prod(s)]`
    Flatten { x: NodeId },
    /// `[B,C,H,W] * [OC,IC,KH,KW] -> [B,OC,OH,OW]`, zero padding.
    Conv2d { x: NodeId, kernel: NodeId, stride: usize, padding: usize },
    /// Mean over the batch of per-row cross-entropy between `logits` and
    /// integer `labels`, optionally weighted per row -> `[1]`.
    SoftmaxXent { logits: NodeId, labels: NodeId, weights: Option<NodeId> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: NodeShape,
}

/// Immutable op tape plus name registries.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Per-evaluation buffers: node values from [`Graph::forward`], node
/// gradients from [`Graph::backward`].
#[derive(Debug)]
pub struct Run {
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    batch: usize,
}

impl Run {
    pub fn value(&self, id: NodeId) -> Result<&Tensor, TensorError> {
        self.values[id].as_ref().ok_or(TensorError::ForwardNotRun(id))
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_id(&self, name: &str) -> Result<NodeId, TensorError> {
        self.inputs.get(name).copied().ok_or_else(|| TensorError::UnknownName(name.into()))
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, TensorError> {
        self.outputs.get(name).copied().ok_or_else(|| TensorError::UnknownName(name.into()))
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(|s| s.as_str())
    }

    /// Node ids of every `Param` op, with the store name they reference.
    pub fn param_nodes(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.op {
                Op::Param { name } => Some((name.clone(), id)),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node.
    pub fn forward(
        &self,
        store: &ParameterStore,
        bindings: &[(&str, &Tensor)],
    ) -> Result<Run, TensorError> {
        let all: Vec<NodeId> = (0..self.nodes.len()).collect();
        self.forward_to(store, bindings, &all)
    }

    /// Evaluates only the ancestors of `targets`; inputs that are not
    /// ancestors of any target may be left unbound.
    pub fn forward_to(
        &self,
        store: &ParameterStore,
        bindings: &[(&str, &Tensor)],
        targets: &[NodeId],
    ) -> Result<Run, TensorError> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            for_each_input(&self.nodes[id].op, |i| stack.push(i));
        }

        let mut bound: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in bindings {
            if bound.insert(name, t).is_some() {
                return Err(TensorError::DuplicateName((*name).into()));
            }
        }

        // Infer the batch size from bound batched inputs.
        let mut batch: Option<usize> = None;
        for (name, &id) in &self.inputs {
            if !needed[id] {
                continue;
            }
            let t = *bound.get(name.as_str()).ok_or_else(|| TensorError::InputNotBound(name.clone()))?;
            let per_sample = self.nodes[id].shape.batched()?;
            if t.shape().len() != per_sample.len() + 1 || &t.shape()[1..] != per_sample {
                return Err(TensorError::Shape {
                    context: format!("input '{name}'"),
                    detail: format!("expected [B, {:?}], got {:?}", per_sample, t.shape()),
                });
            }
            let b = t.shape()[0];
            match batch {
                None => batch = Some(b),
                Some(prev) if prev != b => return Err(TensorError::BatchMismatch(prev, b)),
                _ => {}
            }
        }
        let batch = batch.unwrap_or(1);

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let value = self.eval_node(id, store, &bound, &values)?;
            if !value.all_finite() {
                return Err(TensorError::NonFinite { context: format!("node {id} ({:?})", op_name(&self.nodes[id].op)) });
            }
            values[id] = Some(value);
        }

        Ok(Run { grads: vec![None; self.nodes.len()], values, batch })
    }

    fn eval_node(
        &self,
        id: NodeId,
        store: &ParameterStore,
        bound: &BTreeMap<&str, &Tensor>,
        values: &[Option<Tensor>],
    ) -> Result<Tensor, TensorError> {
        let val = |i: NodeId| values[i].as_ref().expect("topological order");
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Input { name } => (*bound
                .get(name.as_str())
                .ok_or_else(|| TensorError::InputNotBound(name.clone()))?)
            .clone(),
            Op::Param { name } => store.value(name)?.clone(),
            Op::Const { value } => value.clone(),
            Op::MatMul { a, w } => matmul(val(*a), val(*w))?,
            Op::AddBias { x, b } => add_bias(val(*x), val(*b))?,
            Op::AddChannelBias { x, b } => add_channel_bias(val(*x), val(*b))?,
            Op::Add { a, b } => zip_same(val(*a), val(*b), "add", |x, y| x + y)?,
            Op::Sub { a, b } => zip_same(val(*a), val(*b), "sub", |x, y| x - y)?,
            Op::Mul { a, b } => zip_same(val(*a), val(*b), "mul", |x, y| x * y)?,
            Op::Scale { x, c } => val(*x).map(|v| v * c),
            Op::AddScalar { x, c } => val(*x).map(|v| v + c),
            Op::Relu { x } => val(*x).map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Tanh { x } => val(*x).map(f64::tanh),
            Op::Sigmoid { x } => val(*x).map(sigmoid),
            Op::Log { x } => val(*x).map(f64::ln),
            Op::Softmax { x } => softmax_rows(val(*x))?,
            Op::RowSum { x } => row_sum(val(*x))?,
            Op::SumAll { x } => Tensor::scalar(val(*x).data().iter().sum()),
            Op::MeanAll { x } => {
                let t = val(*x);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            Op::Flatten { x } => {
                let t = val(*x);
                let b = t.shape()[0];
                t.reshaped(vec![b, t.numel() / b])?
            }
            Op::Conv2d { x, kernel, stride, padding } => conv2d(val(*x), val(*kernel), *stride, *padding)?,
            Op::SoftmaxXent { logits, labels, weights } => {
                softmax_xent(val(*logits), val(*labels), weights.map(val))?
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar loss node. Populates gradients for every
    /// node that contributed to the loss, parameters and inputs included.
    pub fn backward(
        &self,
        store: &ParameterStore,
        run: &mut Run,
        loss: NodeId,
    ) -> Result<(), TensorError> {
        let loss_val = run.values[loss].as_ref().ok_or(TensorError::ForwardNotRun(loss))?;
        if loss_val.shape() != [1] {
            return Err(TensorError::LossNotScalar(loss_val.shape().to_vec()));
        }
        let _ = store;

        for g in run.grads.iter_mut() {
            *g = None;
        }
        run.grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(dout) = run.grads[id].take() else { continue };
            self.backprop_node(id, &dout, run)?;
            run.grads[id] = Some(dout);
        }
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, dout: &Tensor, run: &mut Run) -> Result<(), TensorError> {
        // Accumulate `delta` into the gradient slot of `target`.
        fn acc(run: &mut Run, target: NodeId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
            let slot = run.grads[target].get_or_insert_with(|| Tensor::zeros(shape));
            f(slot.data_mut());
        }
        let val = |i: NodeId| run.values[i].as_ref().expect("forward ran");

        match &self.nodes[id].op {
            Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => {}
            Op::MatMul { a, w } => {
                let (a, w) = (*a, *w);
                let av = val(a).clone();
                let wv = val(w).clone();
                let (bsz, m) = (av.shape()[0], av.shape()[1]);
                let n = wv.shape()[1];
                let d = dout.data();
                acc(run, a, av.shape(), |da| {
                    for bi in 0..bsz {
                        let drow = &d[bi * n..(bi + 1) * n];
                        for mi in 0..m {
                            let wrow = &wv.data()[mi * n..(mi + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += drow[j] * wrow[j];
                            }
                            da[bi * m + mi] += s;
                        }
                    }
                });
                acc(run, w, wv.shape(), |dw| {
                    for bi in 0..bsz {
                        let drow = &d[bi * n..(bi + 1) * n];
                        for mi in 0..m {
                            let avm = av.data()[bi * m + mi];
                            if avm == 0.0 {
                                continue;
                            }
                            let dwrow = &mut dw[mi * n..(mi + 1) * n];
                            for j in 0..n {
                                dwrow[j] += avm * drow[j];
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, b } => {
                let (x, b) = (*x, *b);
                let xshape = val(x).shape().to_vec();
                let n = xshape[1];
                acc(run, x, &xshape, |dx| {
                    for (dst, src) in dx.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
                acc(run, b, &[n], |db| {
                    for row in dout.data().chunks_exact(n) {
                        for j in 0..n {
                            db[j] += row[j];
                        }
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                let (x, b) = (*x, *b);
                let xshape = val(x).shape().to_vec();
                let (c, h, w) = (xshape[1], xshape[2], xshape[3]);
                let hw = h * w;
                acc(run, x, &xshape, |dx| {
                    for (dst, src) in dx.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
                acc(run, b, &[c], |db| {
                    for img in dout.data().chunks_exact(c * hw) {
                        for ci in 0..c {
                            db[ci] += img[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let ashape = val(a).shape().to_vec();
                let bshape = val(b).shape().to_vec();
                acc(run, a, &ashape, |da| {
                    for (dst, src) in da.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
                acc(run, b, &bshape, |db| {
                    for (dst, src) in db.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let ashape = val(a).shape().to_vec();
                let bshape = val(b).shape().to_vec();
                acc(run, a, &ashape, |da| {
                    for (dst, src) in da.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
                acc(run, b, &bshape, |db| {
                    for (dst, src) in db.iter_mut().zip(dout.data()) {
                        *dst -= src;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = val(a).clone();
                let bv = val(b).clone();
                acc(run, a, av.shape(), |da| {
                    for i in 0..da.len() {
                        da[i] += dout.data()[i] * bv.data()[i];
                    }
                });
                acc(run, b, bv.shape(), |db| {
                    for i in 0..db.len() {
                        db[i] += dout.data()[i] * av.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let shape = val(x).shape().to_vec();
                acc(run, x, &shape, |dx| {
                    for (dst, src) in dx.iter_mut().zip(dout.data()) {
                        *dst += c * src;
                    }
                });
            }
            Op::AddScalar { x, .. } => {
                let x = *x;
                let shape = val(x).shape().to_vec();
                acc(run, x, &shape, |dx| {
                    for (dst, src) in dx.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                let xv = val(x).clone();
                acc(run, x, xv.shape(), |dx| {
                    for i in 0..dx.len() {
                        if xv.data()[i] > 0.0 {
                            dx[i] += dout.data()[i];
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let x = *x;
                let y = val(id).clone();
                acc(run, x, y.shape(), |dx| {
                    for i in 0..dx.len() {
                        let yv = y.data()[i];
                        dx[i] += dout.data()[i] * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = val(id).clone();
                acc(run, x, y.shape(), |dx| {
                    for i in 0..dx.len() {
                        let yv = y.data()[i];
                        dx[i] += dout.data()[i] * yv * (1.0 - yv);
                    }
                });
            }
            Op::Log { x } => {
                let x = *x;
                let xv = val(x).clone();
                acc(run, x, xv.shape(), |dx| {
                    for i in 0..dx.len() {
                        dx[i] += dout.data()[i] / xv.data()[i];
                    }
                });
            }
            Op::Softmax { x } => {
                let x = *x;
                let y = val(id).clone();
                let k = y.shape()[1];
                acc(run, x, y.shape(), |dx| {
                    for (bi, yrow) in y.data().chunks_exact(k).enumerate() {
                        let drow = &dout.data()[bi * k..(bi + 1) * k];
                        let dot: f64 = yrow.iter().zip(drow).map(|(yv, dv)| yv * dv).sum();
                        for j in 0..k {
                            dx[bi * k + j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                });
            }
            Op::RowSum { x } => {
                let x = *x;
                let xshape = val(x).shape().to_vec();
                let k = xshape[1];
                acc(run, x, &xshape, |dx| {
                    for bi in 0..xshape[0] {
                        for j in 0..k {
                            dx[bi * k + j] += dout.data()[bi];
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let x = *x;
                let g = dout.data()[0];
                let shape = val(x).shape().to_vec();
                acc(run, x, &shape, |dx| {
                    for v in dx.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::MeanAll { x } => {
                let x = *x;
                let shape = val(x).shape().to_vec();
                let g = dout.data()[0] / shape.iter().product::<usize>() as f64;
                acc(run, x, &shape, |dx| {
                    for v in dx.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::Flatten { x } => {
                let x = *x;
                let shape = val(x).shape().to_vec();
                acc(run, x, &shape, |dx| {
                    for (dst, src) in dx.iter_mut().zip(dout.data()) {
                        *dst += src;
                    }
                });
            }
            Op::Conv2d { x, kernel, stride, padding } => {
                conv2d_backward(val(*x).clone(), val(*kernel).clone(), *stride, *padding, dout, *x, *kernel, run);
            }
            Op::SoftmaxXent { logits, labels, weights } => {
                let (logits, labels) = (*logits, *labels);
                let lv = val(logits).clone();
                let yv = val(labels).clone();
                let wv = weights.map(|w| val(w).clone());
                let (bsz, k) = (lv.shape()[0], lv.shape()[1]);
                let g = dout.data()[0];
                acc(run, logits, lv.shape(), |dl| {
                    let mut probs = vec![0.0; k];
                    for bi in 0..bsz {
                        let row = &lv.data()[bi * k..(bi + 1) * k];
                        softmax_into(row, &mut probs);
                        let y = yv.data()[bi] as usize;
                        let wrow = wv.as_ref().map_or(1.0, |w| w.data()[bi]);
                        let scale = g * wrow / bsz as f64;
                        for j in 0..k {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            dl[bi * k + j] += scale * (probs[j] - ind);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn for_each_input(op: &Op, mut f: impl FnMut(NodeId)) {
    match op {
        Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => {}
        Op::MatMul { a, w } => {
            f(*a);
            f(*w);
        }
        Op::AddBias { x, b } | Op::AddChannelBias { x, b } => {
            f(*x);
            f(*b);
        }
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            f(*a);
            f(*b);
        }
        Op::Scale { x, .. }
        | Op::AddScalar { x, .. }
        | Op::Relu { x }
        | Op::Tanh { x }
        | Op::Sigmoid { x }
        | Op::Log { x }
        | Op::Softmax { x }
        | Op::RowSum { x }
        | Op::SumAll { x }
        | Op::MeanAll { x }
        | Op::Flatten { x } => f(*x),
        Op::Conv2d { x, kernel, .. } => {
            f(*x);
            f(*kernel);
        }
        Op::SoftmaxXent { logits, labels, weights } => {
            f(*logits);
            f(*labels);
            if let Some(w) = weights {
                f(*w);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input { .. } => "input",
        Op::Param { .. } => "param",
        Op::Const { .. } => "const",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::AddChannelBias { .. } => "add_channel_bias",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Log { .. } => "log",
        Op::Softmax { .. } => "softmax",
        Op::RowSum { .. } => "row_sum",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::Flatten { .. } => "flatten",
        Op::Conv2d { .. } => "conv2d",
        Op::SoftmaxXent { .. } => "softmax_xent",
    }
}

// ── forward kernels ─────────────────────────────────────────────────

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape().len() != 2 || w.shape().len() != 2 || a.shape()[1] != w.shape()[0] {
        return Err(TensorError::Shape {
            context: "matmul".into(),
            detail: format!("{:?} x {:?}", a.shape(), w.shape()),
        });
    }
    let (bsz, m) = (a.shape()[0], a.shape()[1]);
    let n = w.shape()[1];
    let mut out = vec![0.0; bsz * n];
    for bi in 0..bsz {
        let arow = &a.data()[bi * m..(bi + 1) * m];
        let orow = &mut out[bi * n..(bi + 1) * n];
        for (mi, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wrow = &w.data()[mi * n..(mi + 1) * n];
            for j in 0..n {
                orow[j] += av * wrow[j];
            }
        }
    }
    Tensor::new(vec![bsz, n], out)
}

fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
        return Err(TensorError::Shape {
            context: "add_bias".into(),
            detail: format!("{:?} + {:?}", x.shape(), b.shape()),
        });
    }
    let n = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        for j in 0..n {
            row[j] += b.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 4 || b.shape() != [x.shape()[1]] {
        return Err(TensorError::Shape {
            context: "add_channel_bias".into(),
            detail: format!("{:?} + {:?}", x.shape(), b.shape()),
        });
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = x.data().to_vec();
    for img in out.chunks_exact_mut(c * hw) {
        for ci in 0..c {
            let bias = b.data()[ci];
            for v in img[ci * hw..(ci + 1) * hw].iter_mut() {
                *v += bias;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn zip_same(
    a: &Tensor,
    b: &Tensor,
    ctx: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            context: ctx.into(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 {
        return Err(TensorError::Shape {
            context: "softmax".into(),
            detail: format!("{:?}", x.shape()),
        });
    }
    let k = x.shape()[1];
    let mut out = vec![0.0; x.numel()];
    for (orow, row) in out.chunks_exact_mut(k).zip(x.data().chunks_exact(k)) {
        softmax_into(row, orow);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn row_sum(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 {
        return Err(TensorError::Shape {
            context: "row_sum".into(),
            detail: format!("{:?}", x.shape()),
        });
    }
    let k = x.shape()[1];
    let data = x.data().chunks_exact(k).map(|row| row.iter().sum()).collect();
    Tensor::new(vec![x.shape()[0]], data)
}

pub(crate) fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw || stride == 0 {
        return None;
    }
    Some(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

fn conv2d(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor, TensorError> {
    let err = || TensorError::Shape {
        context: "conv2d".into(),
        detail: format!("x {:?}, kernel {:?}", x.shape(), k.shape()),
    };
    if x.shape().len() != 4 || k.shape().len() != 4 || x.shape()[1] != k.shape()[1] {
        return Err(err());
    }
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow) = conv2d_out_dims(h, w, kh, kw, stride, padding).ok_or_else(err)?;

    let mut out = vec![0.0; bsz * oc * oh * ow];
    let pad = padding as isize;
    for bi in 0..bsz {
        for oci in 0..oc {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (ohi * stride + khi) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xbase = ((bi * c + ci) * h + ih as usize) * w;
                            let kbase = ((oci * c + ci) * kh + khi) * kw;
                            for kwi in 0..kw {
                                let iw = (owi * stride + kwi) as isize - pad;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                s += x.data()[xbase + iw as usize] * k.data()[kbase + kwi];
                            }
                        }
                    }
                    out[((bi * oc + oci) * oh + ohi) * ow + owi] = s;
                }
            }
        }
    }
    Tensor::new(vec![bsz, oc, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: Tensor,
    k: Tensor,
    stride: usize,
    padding: usize,
    dout: &Tensor,
    x_id: NodeId,
    k_id: NodeId,
    run: &mut Run,
) {
    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (dout.shape()[2], dout.shape()[3]);
    let pad = padding as isize;

    let mut dx = vec![0.0; x.numel()];
    let mut dk = vec![0.0; k.numel()];
    for bi in 0..bsz {
        for oci in 0..oc {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let g = dout.data()[((bi * oc + oci) * oh + ohi) * ow + owi];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (ohi * stride + khi) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xbase = ((bi * c + ci) * h + ih as usize) * w;
                            let kbase = ((oci * c + ci) * kh + khi) * kw;
                            for kwi in 0..kw {
                                let iw = (owi * stride + kwi) as isize - pad;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dx[xbase + iw as usize] += g * k.data()[kbase + kwi];
                                dk[kbase + kwi] += g * x.data()[xbase + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    let slot = run.grads[x_id].get_or_insert_with(|| Tensor::zeros(x.shape()));
    for (dst, src) in slot.data_mut().iter_mut().zip(&dx) {
        *dst += src;
    }
    let slot = run.grads[k_id].get_or_insert_with(|| Tensor::zeros(k.shape()));
    for (dst, src) in slot.data_mut().iter_mut().zip(&dk) {
        *dst += src;
    }
}

fn softmax_xent(logits: &Tensor, labels: &Tensor, weights: Option<&Tensor>) -> Result<Tensor, TensorError> {
    if logits.shape().len() != 2 || labels.shape() != [logits.shape()[0]] {
        return Err(TensorError::Shape {
            context: "softmax_xent".into(),
            detail: format!("logits {:?}, labels {:?}", logits.shape(), labels.shape()),
        });
    }
    if let Some(w) = weights {
        if w.shape() != labels.shape() {
            return Err(TensorError::Shape {
                context: "softmax_xent weights".into(),
                detail: format!("{:?}", w.shape()),
            });
        }
    }
    let (bsz, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for bi in 0..bsz {
        let row = &logits.data()[bi * k..(bi + 1) * k];
        let y = labels.data()[bi];
        if y < 0.0 || y.fract() != 0.0 || y as usize >= k {
            return Err(TensorError::Shape {
                context: "softmax_xent".into(),
                detail: format!("label {y} out of range for {k} classes"),
            });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let wrow = weights.map_or(1.0, |w| w.data()[bi]);
        total += wrow * (lse - row[y as usize]);
    }
    Ok(Tensor::scalar(total / bsz as f64))
}

// ── builder ─────────────────────────────────────────────────────────

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Constructs a [`Graph`] and its backing [`ParameterStore`] together,
/// validating shapes as ops are added. Parameter initialization draws from
/// a seeded RNG in insertion order, so identical build sequences produce
/// identical parameters.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    store: ParameterStore,
    pub(crate) rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            store: ParameterStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> (Graph, ParameterStore) {
        (Graph { nodes: self.nodes, inputs: self.inputs, outputs: self.outputs }, self.store)
    }

    /// Discards the builder's store; used when a second graph (e.g. an
    /// actor-only view) references parameters owned elsewhere.
    pub fn finish_graph_only(self) -> Graph {
        Graph { nodes: self.nodes, inputs: self.inputs, outputs: self.outputs }
    }

    fn push(&mut self, op: Op, shape: NodeShape) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> &NodeShape {
        &self.nodes[id].shape
    }

    pub fn input(&mut self, name: &str, per_sample: &[usize]) -> Result<NodeId, TensorError> {
        if self.inputs.contains_key(name) {
            return Err(TensorError::DuplicateName(name.into()));
        }
        let id = self.push(Op::Input { name: name.into() }, NodeShape::Batched(per_sample.to_vec()));
        self.inputs.insert(name.into(), id);
        Ok(id)
    }

    /// A per-sample scalar input (class labels, sample weights): shape `[B]`.
    pub fn input_rows(&mut self, name: &str) -> Result<NodeId, TensorError> {
        self.input(name, &[])
    }

    pub fn param_tensor(&mut self, name: &str, value: Tensor) -> Result<NodeId, TensorError> {
        self.store.insert(name, value.clone())?;
        Ok(self.push(Op::Param { name: name.into() }, NodeShape::Fixed(value.shape().to_vec())))
    }

    pub fn param_zeros(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.param_tensor(name, Tensor::zeros(shape))
    }

    pub fn param_xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<NodeId, TensorError> {
        let t = super::layers::xavier_uniform(&mut self.rng, shape, fan_in, fan_out);
        self.param_tensor(name, t)
    }

    pub fn param_scaled(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<NodeId, TensorError> {
        let t = super::layers::scaled_uniform(&mut self.rng, shape, fan_in, fan_out, gain);
        self.param_tensor(name, t)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = NodeShape::Fixed(value.shape().to_vec());
        self.push(Op::Const { value }, shape)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) -> Result<(), TensorError> {
        if self.outputs.contains_key(name) {
            return Err(TensorError::DuplicateName(name.into()));
        }
        self.outputs.insert(name.into(), id);
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let av = self.shape_of(a).batched()?.to_vec();
        let wv = self.shape_of(w).fixed()?.to_vec();
        if av.len() != 1 || wv.len() != 2 || av[0] != wv[0] {
            return Err(TensorError::Shape {
                context: "matmul".into(),
                detail: format!("[B,{:?}] x {:?}", av, wv),
            });
        }
        Ok(self.push(Op::MatMul { a, w }, NodeShape::Batched(vec![wv[1]])))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        let bv = self.shape_of(b).fixed()?.to_vec();
        if xv.len() != 1 || bv != xv {
            return Err(TensorError::Shape {
                context: "add_bias".into(),
                detail: format!("[B,{:?}] + {:?}", xv, bv),
            });
        }
        Ok(self.push(Op::AddBias { x, b }, NodeShape::Batched(xv)))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        let bv = self.shape_of(b).fixed()?.to_vec();
        if xv.len() != 3 || bv != [xv[0]] {
            return Err(TensorError::Shape {
                context: "add_channel_bias".into(),
                detail: format!("[B,{:?}] + {:?}", xv, bv),
            });
        }
        Ok(self.push(Op::AddChannelBias { x, b }, NodeShape::Batched(xv)))
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, ctx: &str) -> Result<NodeShape, TensorError> {
        let sa = self.shape_of(a).clone();
        let sb = self.shape_of(b).clone();
        if sa != sb {
            return Err(TensorError::Shape {
                context: ctx.into(),
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.elementwise(a, b, "add")?;
        Ok(self.push(Op::Add { a, b }, s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.elementwise(a, b, "sub")?;
        Ok(self.push(Op::Sub { a, b }, s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.elementwise(a, b, "mul")?;
        Ok(self.push(Op::Mul { a, b }, s))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::Scale { x, c }, s)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::AddScalar { x, c }, s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::Relu { x }, s)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::Tanh { x }, s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::Sigmoid { x }, s)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let s = self.shape_of(x).clone();
        self.push(Op::Log { x }, s)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        if xv.len() != 1 {
            return Err(TensorError::Shape {
                context: "softmax".into(),
                detail: format!("[B,{:?}]", xv),
            });
        }
        Ok(self.push(Op::Softmax { x }, NodeShape::Batched(xv)))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        if xv.len() != 1 {
            return Err(TensorError::Shape {
                context: "row_sum".into(),
                detail: format!("[B,{:?}]", xv),
            });
        }
        Ok(self.push(Op::RowSum { x }, NodeShape::Batched(vec![])))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll { x }, NodeShape::Scalar)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll { x }, NodeShape::Scalar)
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        let prod = xv.iter().product();
        Ok(self.push(Op::Flatten { x }, NodeShape::Batched(vec![prod])))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let xv = self.shape_of(x).batched()?.to_vec();
        let kv = self.shape_of(kernel).fixed()?.to_vec();
        let bad = || TensorError::Shape {
            context: "conv2d".into(),
            detail: format!("[B,{:?}] * {:?} stride {stride} pad {padding}", xv, kv),
        };
        if xv.len() != 3 || kv.len() != 4 || kv[1] != xv[0] {
            return Err(bad());
        }
        let (oh, ow) = conv2d_out_dims(xv[1], xv[2], kv[2], kv[3], stride, padding).ok_or_else(bad)?;
        Ok(self.push(Op::Conv2d { x, kernel, stride, padding }, NodeShape::Batched(vec![kv[0], oh, ow])))
    }

    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        labels: NodeId,
        weights: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let lv = self.shape_of(logits).batched()?.to_vec();
        let yv = self.shape_of(labels).batched()?.to_vec();
        if lv.len() != 1 || !yv.is_empty() {
            return Err(TensorError::Shape {
                context: "softmax_xent".into(),
                detail: format!("logits [B,{:?}], labels [B,{:?}]", lv, yv),
            });
        }
        if let Some(w) = weights {
            if !self.shape_of(w).batched()?.is_empty() {
                return Err(TensorError::Shape {
                    context: "softmax_xent weights".into(),
                    detail: "weights must be per-row scalars".into(),
                });
            }
        }
        Ok(self.push(Op::SoftmaxXent { logits, labels, weights }, NodeShape::Scalar))
    }
}
