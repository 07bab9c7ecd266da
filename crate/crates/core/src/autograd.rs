//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Model code is written once against the [`Ops`] trait and runs on two
//! backends:
//!
//! * [`Graph`] records every op on a tape so [`Graph::backward`] can
//!   propagate gradients to the named parameters.
//! * [`Eager`] evaluates ops directly and keeps nothing, which is what
//!   full-resolution inference wants.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnCache, RunningStats};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet;

/// The operations the network is built from.
pub trait Ops<T: Scalar> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    /// A named learnable tensor; recording backends track its gradient.
    fn parameter(&mut self, name: &str, t: Tensor<T>) -> Result<Self::Var>;
    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn batch_norm_train(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
    ) -> Result<(Self::Var, BatchStats<T>)>;
    fn batch_norm_eval(
        &mut self,
        x: &Self::Var,
        gamma: &Self::Var,
        beta: &Self::Var,
        stats: &RunningStats<T>,
    ) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn concat_channels(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn slice_channels(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    /// Haar DWT into the stacked `[N, 4C, H/2, W/2]` layout.
    fn dwt2(&mut self, x: &Self::Var) -> Result<Self::Var>;
    /// Inverse of [`Ops::dwt2`].
    fn idwt2(&mut self, x: &Self::Var) -> Result<Self::Var>;
}

fn same_pad<T: Scalar>(w: &Tensor<T>) -> usize {
    w.shape().get(2).map_or(0, |k| k.saturating_sub(1) / 2)
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Ops<T> for Eager {
    type Var = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn parameter(&mut self, _name: &str, t: Tensor<T>) -> Result<Tensor<T>> {
        Ok(t)
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, w, b, same_pad(w))
    }

    fn batch_norm_train(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
    ) -> Result<(Tensor<T>, BatchStats<T>)> {
        let (y, stats, _) = ops::batch_norm_train(x, gamma, beta)?;
        Ok((y, stats))
    }

    fn batch_norm_eval(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        stats: &RunningStats<T>,
    ) -> Result<Tensor<T>> {
        ops::batch_norm_eval(x, gamma, beta, stats)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::relu(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn concat_channels(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        ops::concat_channels(&refs)
    }

    fn slice_channels(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        ops::slice_channels(x, start, len)
    }

    fn dwt2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        wavelet::dwt2_stacked(x)
    }

    fn idwt2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        wavelet::idwt2_stacked(x)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNormTrain {
        gamma: NodeId,
        beta: NodeId,
        x: NodeId,
        cache: BnCache<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: RunningStats<T>,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Dwt2 {
        x: NodeId,
    },
    Idwt2 {
        x: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Gradients of a scalar loss with respect to every named parameter.
#[derive(Debug, Clone)]
pub struct GradientRecord<T> {
    pub loss: T,
    pub grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientRecord<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }
}

/// A tape of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|i| !self.nodes[i.0].value.all_finite()),
            "non-finite value produced from finite inputs"
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a learnable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        let name = name.into();
        if self.params.contains(&name) {
            return Err(Error::Config(format!("parameter `{name}` bound twice")));
        }
        self.params.push(name);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(self.params.len() - 1),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU, or `None` if
    /// there are none. Finite differences with a step that moves no ReLU
    /// input by more than this never straddle a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .reduce(f64::min)
    }

    /// Mean of squared differences, as a rank-0 tensor.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.get(pred), self.get(target));
        p.expect_same_shape(t, "mse_loss")?;
        let n = p.numel().max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let value = Tensor::scalar(T::from_f64(s / n));
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.get(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Back-propagates from a scalar `loss` to every registered parameter.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradientRecord<T>> {
        let lv = self.get(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |id: NodeId, t: Tensor<T>| -> Result<()> {
                if !self.nodes[id.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.accumulate(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        out.insert(self.params[p].clone(), g);
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let cg = ops::conv2d_backward(
                        self.get(*x),
                        self.get(*w),
                        self.get(*b),
                        &g,
                        need_dx,
                    )?;
                    if let Some(dx) = cg.input {
                        acc(*x, dx)?;
                    }
                    acc(*w, cg.weight)?;
                    acc(*b, cg.bias)?;
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(&g, self.get(*gamma), cache)?;
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (dx, dg, db) =
                        ops::batch_norm_eval_backward(self.get(*x), &g, self.get(*gamma), stats)?;
                    acc(*x, dx)?;
                    acc(*gamma, dg)?;
                    acc(*beta, db)?;
                }
                Op::Relu { x } => acc(*x, ops::relu_backward(&node.value, &g)?)?,
                Op::Add { a, b } => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for &(id, c) in parts {
                        acc(id, ops::slice_channels(&g, start, c)?)?;
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    acc(*x, ops::unslice_channels(&g, self.get(*x).shape(), *start)?)?;
                }
                Op::Dwt2 { x } => acc(*x, wavelet::idwt2_stacked(&g)?)?,
                Op::Idwt2 { x } => acc(*x, wavelet::dwt2_stacked(&g)?)?,
                Op::Mse { pred, target } => {
                    let (p, t) = (self.get(*pred), self.get(*target));
                    let k = g.item()? * T::from_f64(2.0 / p.numel().max(1) as f64);
                    let dp = p.zip_map(t, |a, b| k * (a - b))?;
                    acc(*target, dp.scale(-T::one()))?;
                    acc(*pred, dp)?;
                }
                Op::Sum { x } => acc(*x, Tensor::full(self.get(*x).shape(), g.item()?))?,
            }
        }

        for (idx, name) in self.params.iter().enumerate() {
            if !out.contains_key(name) {
                let node = self
                    .nodes
                    .iter()
                    .find(|n| n.param == Some(idx))
                    .expect("param node");
                out.insert(name.clone(), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradientRecord {
            loss: lv.data()[0],
            grads: out,
        })
    }
}

impl<T: Scalar> Ops<T> for Graph<T> {
    type Var = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.input(t)
    }

    fn parameter(&mut self, name: &str, t: Tensor<T>) -> Result<NodeId> {
        self.param(name, t)
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        let wt = self.get(*w);
        let y = ops::conv2d(self.get(*x), wt, self.get(*b), same_pad(wt))?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x: *x,
                w: *w,
                b: *b,
            },
            &[*x, *w, *b],
        ))
    }

    fn batch_norm_train(
        &mut self,
        x: &NodeId,
        gamma: &NodeId,
        beta: &NodeId,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let (y, stats, cache) =
            ops::batch_norm_train(self.get(*x), self.get(*gamma), self.get(*beta))?;
        let op = Op::BatchNormTrain {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            cache,
        };
        Ok((self.push(y, op, &[*x, *gamma, *beta]), stats))
    }

    fn batch_norm_eval(
        &mut self,
        x: &NodeId,
        gamma: &NodeId,
        beta: &NodeId,
        stats: &RunningStats<T>,
    ) -> Result<NodeId> {
        let y = ops::batch_norm_eval(self.get(*x), self.get(*gamma), self.get(*beta), stats)?;
        let op = Op::BatchNormEval {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            stats: stats.clone(),
        };
        Ok(self.push(y, op, &[*x, *gamma, *beta]))
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = ops::relu(self.get(*x));
        self.push(y, Op::Relu { x: *x }, &[*x])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = self.get(*a).add(self.get(*b))?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }, &[*a, *b]))
    }

    fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.get(*p)).collect();
        let y = ops::concat_channels(&refs)?;
        let meta = parts
            .iter()
            .map(|p| (*p, self.get(*p).shape()[1]))
            .collect();
        Ok(self.push(y, Op::Concat { parts: meta }, parts))
    }

    fn slice_channels(&mut self, x: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        let y = ops::slice_channels(self.get(*x), start, len)?;
        Ok(self.push(y, Op::Slice { x: *x, start }, &[*x]))
    }

    fn dwt2(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = wavelet::dwt2_stacked(self.get(*x))?;
        Ok(self.push(y, Op::Dwt2 { x: *x }, &[*x]))
    }

    fn idwt2(&mut self, x: &NodeId) -> Result<NodeId> {
        let y = wavelet::idwt2_stacked(self.get(*x))?;
        Ok(self.push(y, Op::Idwt2 { x: *x }, &[*x]))
    }
}
