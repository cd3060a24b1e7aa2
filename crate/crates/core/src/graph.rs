//! Reverse-mode differentiation over small dense networks.
//!
//! A [`Graph`] is a fixed list of primitive operations in construction
//! (= topological) order. Parameters and quantizer scales are not owned by
//! the graph: nodes reference them by index into a [`ParamStore`], so the same
//! graph evaluates any parameter state, including perturbed copies.
//!
//! `forward` caches every intermediate value; `backward` consumes the cache
//! and writes gradients into the store. A second `backward` without a fresh
//! `forward` is rejected.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::quantizer;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// What the loss head compares the network output against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Class indices, one per batch row.
    Labels(Vec<usize>),
    /// Regression targets with the shape of the prediction.
    Values(Tensor),
    /// Loss heads that need no target.
    None,
}

impl Target {
    fn batch_len(&self) -> Option<usize> {
        match self {
            Target::Labels(l) => Some(l.len()),
            Target::Values(t) => Some(t.dims2().0),
            Target::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(usize),
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul(NodeId, NodeId),
    /// `[n, m] + [m]`, broadcast over rows.
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Fake quantization with the store scale at the given index.
    FakeQuant {
        input: NodeId,
        scale: usize,
        normalize_grad: bool,
    },
    /// Mean softmax cross-entropy against [`Target::Labels`].
    SoftmaxCrossEntropy(NodeId),
    /// Mean squared error against [`Target::Values`].
    MeanSquaredError(NodeId),
    /// Sum of squares of every element; needs no target.
    SumSquares(NodeId),
}

impl Op {
    fn is_loss(&self) -> bool {
        matches!(
            self,
            Op::SoftmaxCrossEntropy(_) | Op::MeanSquaredError(_) | Op::SumSquares(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq)]
enum Pass {
    Idle,
    Forwarded { values: Vec<Tensor>, target: Target },
    Consumed,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    loss: Option<NodeId>,
    pass: Pass,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            loss: None,
            pass: Pass::Idle,
        }
    }

    fn push(&mut self, name: impl Into<String>, op: Op) -> NodeId {
        if op.is_loss() {
            self.loss = Some(self.nodes.len());
        }
        self.nodes.push(Node { name: name.into(), op });
        self.pass = Pass::Idle;
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> NodeId {
        self.push("input", Op::Input)
    }

    pub fn param(&mut self, name: impl Into<String>, index: usize) -> NodeId {
        self.push(name, Op::Param(index))
    }

    pub fn matmul(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::MatMul(a, b))
    }

    pub fn bias_add(&mut self, name: impl Into<String>, x: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::BiasAdd(x, b))
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.push(name, Op::Relu(x))
    }

    pub fn add(&mut self, name: impl Into<String>, a: NodeId, b: NodeId) -> NodeId {
        self.push(name, Op::Add(a, b))
    }

    pub fn scale_by(&mut self, name: impl Into<String>, x: NodeId, c: f64) -> NodeId {
        self.push(name, Op::Scale(x, c))
    }

    pub fn fake_quant(&mut self, name: impl Into<String>, x: NodeId, scale: usize, normalize_grad: bool) -> NodeId {
        self.push(
            name,
            Op::FakeQuant {
                input: x,
                scale,
                normalize_grad,
            },
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId) -> NodeId {
        self.push("loss", Op::SoftmaxCrossEntropy(logits))
    }

    pub fn mean_squared_error(&mut self, pred: NodeId) -> NodeId {
        self.push("loss", Op::MeanSquaredError(pred))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        self.push("loss", Op::SumSquares(x))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    /// The node feeding the loss head (logits for a classifier).
    pub fn output_node(&self) -> Option<NodeId> {
        let loss = self.loss?;
        match self.nodes[loss].op {
            Op::SoftmaxCrossEntropy(x) | Op::MeanSquaredError(x) | Op::SumSquares(x) => Some(x),
            _ => None,
        }
    }

    /// Cached value of a node from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        match &self.pass {
            Pass::Forwarded { values, .. } => values.get(node),
            _ => None,
        }
    }

    /// Evaluates the loss and caches every intermediate value for `backward`.
    pub fn forward(&mut self, store: &ParamStore, input: &Tensor, target: &Target) -> Result<f64> {
        let loss = self.loss.ok_or(Error::NoLossNode)?;
        check_batch(input, target)?;
        let values = self.evaluate(store, input, Some(target), loss)?;
        let l = values[loss].data()[0];
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss = {l}")));
        }
        self.pass = Pass::Forwarded {
            values,
            target: target.clone(),
        };
        Ok(l)
    }

    /// Evaluates the network up to its output node without touching the cache.
    pub fn predict(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let out = self.output_node().ok_or(Error::NoLossNode)?;
        let mut values = self.evaluate(store, input, None, out)?;
        Ok(values.swap_remove(out))
    }

    /// Evaluates nodes `0..=upto` and returns all their values.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        input: &Tensor,
        target: Option<&Target>,
        upto: NodeId,
    ) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(upto + 1);
        for (id, node) in self.nodes.iter().enumerate().take(upto + 1) {
            let v = eval_node(node, &values, store, input, target)?;
            debug_assert!(id == values.len());
            values.push(v);
        }
        Ok(values)
    }

    /// Propagates d(loss)/d(node) back through the cached pass, overwriting the
    /// gradients of every trainable parameter and every scale in `store`.
    pub fn backward(&mut self, store: &mut ParamStore) -> Result<()> {
        let loss = self.loss.ok_or(Error::NoLossNode)?;
        let (values, target) = match std::mem::replace(&mut self.pass, Pass::Consumed) {
            Pass::Forwarded { values, target } => (values, target),
            other => {
                self.pass = other;
                return Err(Error::BackwardWithoutForward);
            }
        };
        store.zero_grads();

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    let p = store
                        .params_mut_unversioned()
                        .get_mut(*i)
                        .ok_or(Error::UnknownIndex(*i))?;
                    if p.trainable {
                        for (acc, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                            *acc += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&values[*a], &values[*b]);
                    let (n, k) = av.dims2();
                    let (_, m) = bv.dims2();
                    let gd = g.data();
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let arow = av.row(i);
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let a_ip = arow[p];
                            if a_ip != 0.0 {
                                for (acc, &gj) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *acc += a_ip * gj;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
                Op::BiasAdd(x, b) => {
                    let m = values[*b].len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::from_parts(values[*b].shape().to_vec(), gb));
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let xv = &values[*x];
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|d| d * c));
                }
                Op::FakeQuant {
                    input,
                    scale,
                    normalize_grad,
                } => {
                    let s = store.scale(*scale)?.clone();
                    let xv = &values[*input];
                    let gs = quantizer::scale_grad(&g, xv, &s, *normalize_grad)?;
                    store.scale_grads_mut()[*scale] += gs;
                    accumulate(&mut grads, *input, quantizer::ste_input_grad(&g, xv, &s)?);
                }
                Op::SoftmaxCrossEntropy(x) => {
                    let Target::Labels(labels) = &target else {
                        return Err(Error::TargetMismatch {
                            node: node.name.clone(),
                        });
                    };
                    let xv = &values[*x];
                    let (n, c) = xv.dims2();
                    let scale = g.data()[0] / n as f64;
                    let mut data = Vec::with_capacity(n * c);
                    for (i, &label) in labels.iter().enumerate() {
                        let probs = softmax(xv.row(i));
                        for (j, p) in probs.into_iter().enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            data.push((p - onehot) * scale);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::MeanSquaredError(x) => {
                    let Target::Values(y) = &target else {
                        return Err(Error::TargetMismatch {
                            node: node.name.clone(),
                        });
                    };
                    let xv = &values[*x];
                    let scale = 2.0 * g.data()[0] / xv.len() as f64;
                    let data = xv.data().iter().zip(y.data()).map(|(p, t)| (p - t) * scale).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::SumSquares(x) => {
                    let xv = &values[*x];
                    let scale = 2.0 * g.data()[0];
                    accumulate(&mut grads, *x, xv.map(|v| v * scale));
                }
            }
        }
        Ok(())
    }
}

fn check_batch(input: &Tensor, target: &Target) -> Result<()> {
    if let Some(n) = target.batch_len() {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let rows = input.dims2().0;
        if rows != n {
            return Err(Error::ShapeMismatch {
                node: "input".into(),
                detail: format!("{rows} input rows but {n} targets"),
            });
        }
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut grads[node] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn mismatch(node: &Node, detail: String) -> Error {
    Error::ShapeMismatch {
        node: node.name.clone(),
        detail,
    }
}

fn eval_node(
    node: &Node,
    values: &[Tensor],
    store: &ParamStore,
    input: &Tensor,
    target: Option<&Target>,
) -> Result<Tensor> {
    Ok(match &node.op {
        Op::Input => input.clone(),
        Op::Param(i) => store.param(*i)?.tensor.clone(),
        Op::MatMul(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            let (n, k) = av.dims2();
            let (k2, m) = bv.dims2();
            if k != k2 || bv.shape().len() != 2 {
                return Err(mismatch(node, format!("{:?} x {:?}", av.shape(), bv.shape())));
            }
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let arow = av.row(i);
                let orow = &mut out[i * m..(i + 1) * m];
                for (p, &a_ip) in arow.iter().enumerate() {
                    if a_ip == 0.0 {
                        continue;
                    }
                    for (o, &b) in orow.iter_mut().zip(&bv.data()[p * m..(p + 1) * m]) {
                        *o += a_ip * b;
                    }
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Op::BiasAdd(x, b) => {
            let (xv, bv) = (&values[*x], &values[*b]);
            let (_, m) = xv.dims2();
            if bv.len() != m {
                return Err(mismatch(node, format!("{:?} + {:?}", xv.shape(), bv.shape())));
            }
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(m) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::Relu(x) => values[*x].map(|v| v.max(0.0)),
        Op::Add(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            if av.shape() != bv.shape() {
                return Err(mismatch(node, format!("{:?} + {:?}", av.shape(), bv.shape())));
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        }
        Op::Scale(x, c) => {
            let c = *c;
            values[*x].map(|v| v * c)
        }
        Op::FakeQuant { input, scale, .. } => quantizer::fake_quantize(&values[*input], store.scale(*scale)?)?,
        Op::SoftmaxCrossEntropy(x) => {
            let Some(Target::Labels(labels)) = target else {
                return Err(Error::TargetMismatch {
                    node: node.name.clone(),
                });
            };
            let xv = &values[*x];
            let (n, c) = xv.dims2();
            if labels.len() != n {
                return Err(mismatch(node, format!("{n} logit rows, {} labels", labels.len())));
            }
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(Error::LabelOutOfRange { label, n_classes: c });
                }
                let row = xv.row(i);
                total += log_sum_exp(row) - row[label];
            }
            Tensor::scalar(total / n as f64)
        }
        Op::MeanSquaredError(x) => {
            let Some(Target::Values(y)) = target else {
                return Err(Error::TargetMismatch {
                    node: node.name.clone(),
                });
            };
            let xv = &values[*x];
            if xv.shape() != y.shape() {
                return Err(mismatch(
                    node,
                    format!("prediction {:?}, target {:?}", xv.shape(), y.shape()),
                ));
            }
            let sum: f64 = xv.data().iter().zip(y.data()).map(|(p, t)| (p - t) * (p - t)).sum();
            Tensor::scalar(sum / xv.len() as f64)
        }
        Op::SumSquares(x) => Tensor::scalar(values[*x].sum_squares()),
    })
}
