//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, which is a valid
//! topological order by construction. [`Graph::backward`] walks the tape once
//! from the loss to the inputs, summing contributions into each node in a
//! fixed order, then stores the gradient of every `requires_grad` leaf on its
//! tensor. A graph can be differentiated once.

use crate::error::{Error, Result};
use crate::nn::activation::{activation_backward, activation_forward, Activation};
use crate::nn::batchnorm::{
    batchnorm_affine_forward, batchnorm_backward, batchnorm_train_forward, layout, BnSaved,
};
use crate::nn::channel::*;
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::nn::head::*;
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Conv { x: Var, w: Var, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved, batch_stats: bool },
    Activation { x: Var, act: Activation },
    Pool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Outer(Var, Var),
    Gather { x: Var, index: Vec<usize> },
    GroupSum { x: Var, group: usize },
    Subsample { x: Var, stride: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input node; differentiated iff the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Input node that is always differentiated.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad())
    }

    /// Input node that is never differentiated.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient stored on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].value.grad_tensor()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y).map_err(|_| self.mismatch("add", a, b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y).map_err(|_| self.mismatch("sub", a, b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y).map_err(|_| self.mismatch("mul", a, b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::shape(op, self.value(a).shape(), self.value(b).shape())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.record(v, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let v = conv2d_forward(self.value(x), self.value(w), spec)?;
        Ok(self.record(v, Op::Conv { x, w, spec: *spec }, &[x, w]))
    }

    /// Batch-statistics normalization. Also returns the per-channel batch
    /// mean, biased variance and element count, for running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>, usize)> {
        let (v, saved, mean, var) = batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        let (n, inner) = layout(self.value(x), mean.len())?;
        let out = self.record(v, Op::BatchNorm { x, gamma, beta, saved, batch_stats: true }, &[x, gamma, beta]);
        Ok((out, mean, var, n * inner))
    }

    /// Normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        epsilon: f64,
    ) -> Result<Var> {
        let (v, saved) = batchnorm_affine_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            epsilon,
        )?;
        Ok(self.record(v, Op::BatchNorm { x, gamma, beta, saved, batch_stats: false }, &[x, gamma, beta]))
    }

    pub fn activation(&mut self, x: Var, act: &Activation) -> Var {
        let v = activation_forward(self.value(x), act);
        self.record(v, Op::Activation { x, act: *act }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = global_avg_pool_forward(self.value(x))?;
        Ok(self.record(v, Op::Pool(x), &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(v, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Mean cross-entropy of the softmax of `logits` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy_forward(self.value(logits), labels)?;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.record(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn channel_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = channel_outer_forward(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Outer(a, b), &[a, b]))
    }

    pub fn channel_gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = channel_gather_forward(self.value(x), index)?;
        Ok(self.record(v, Op::Gather { x, index: index.to_vec() }, &[x]))
    }

    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = group_sum_forward(self.value(x), group)?;
        Ok(self.record(v, Op::GroupSum { x, group }, &[x]))
    }

    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let v = subsample_forward(self.value(x), stride)?;
        Ok(self.record(v, Op::Subsample { x, stride }, &[x]))
    }

    /// Differentiates the scalar `loss` with respect to every leaf that
    /// requires a gradient. Gradients from several paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("graph already differentiated; record a new forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::MatMul(a, b) => {
                let (m, k, n) = (val(*a).shape()[0], val(*a).shape()[1], val(*b).shape()[1]);
                let bt = val(*b).transpose2().expect("2-D");
                let at = val(*a).transpose2().expect("2-D");
                let ga = matmul_raw(g, bt.data(), m, n, k);
                let gb = matmul_raw(at.data(), g, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv { x, w, spec } => {
                let (gx, gw) = conv2d_backward(val(*x), val(*w), spec, g);
                vec![(*x, gx), (*w, gw)]
            }
            Op::BatchNorm { x, gamma, beta, saved, batch_stats } => {
                let (dx, dg, db) = batchnorm_backward(saved, val(*gamma).data(), val(*x).shape(), g, *batch_stats);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Activation { x, act } => vec![(*x, activation_backward(val(*x), act, g))],
            Op::Pool(x) => vec![(*x, global_avg_pool_backward(val(*x).shape(), g))],
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear_backward(val(*x), val(*w), g);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, softmax_cross_entropy_backward(probs, labels, g[0]))]
            }
            Op::Outer(a, b) => {
                let (ga, gb) = channel_outer_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Gather { x, index } => vec![(*x, channel_gather_backward(val(*x).shape(), index, g))],
            Op::GroupSum { x, group } => vec![(*x, group_sum_backward(val(*x).shape(), *group, g))],
            Op::Subsample { x, stride } => vec![(*x, subsample_backward(val(*x).shape(), *stride, g))],
        }
    }
}
