//! Tape-based reverse-mode differentiation over the primitives in
//! [`conv`](super::conv) and [`ops`](super::ops).
//!
//! A [`Graph`] records each forward op as a node. Leaves are either owned
//! inputs or borrowed parameters, so building a graph over a model does not
//! copy its weights. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf.

use std::borrow::Cow;

use super::conv::{add_channel_bias, conv2d_backward, conv2d_raw, conv_block_raw};
use super::ops;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        groups: usize,
        padding: usize,
    },
    ConvBlock {
        x: Var,
        w: Var,
        pw: Option<Var>,
        b: Option<Var>,
        groups: usize,
        padding: usize,
    },
    Add(Var, Var),
    BiasAdd {
        x: Var,
        b: Var,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvBlock { .. } => "conv_block",
            Op::Add(..) => "add",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::AvgPool2(_) => "avg_pool2",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConvBlock { x, w, pw, b, .. } => [Some(*x), Some(*w), *pw, *b]
                .into_iter()
                .flatten()
                .collect(),
            Op::Add(a, b) => vec![*a, *b],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::SoftmaxCrossEntropy { logits: x, .. }
            | Op::Relu(x)
            | Op::AvgPool2(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::WeightedSum { x, .. } => vec![*x],
        }
    }
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<'a, T: Element> {
    nodes: Vec<Node<'a, T>>,
    checked: bool,
}

impl<'a, T: Element> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A graph that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn get(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| n.value.as_ref())
            .ok_or_else(|| Error::Graph(format!("variable {} is not part of this graph", v.0)))
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf whose gradient is computed.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Owned leaf that receives no gradient, e.g. a training batch.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    /// Borrowed leaf (typically a model parameter).
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, padding: usize) -> Result<Var> {
        let y = conv2d_raw(self.get(x)?, self.get(w)?, groups, padding)?;
        self.push(
            Cow::Owned(y),
            Op::Conv2d {
                x,
                w,
                groups,
                padding,
            },
        )
    }

    /// `relu(conv(x, w) + conv1x1(x, pw) + b)` as a single node; the optional
    /// pointwise branch and bias accumulate in place.
    pub fn conv_block(
        &mut self,
        x: Var,
        w: Var,
        pw: Option<Var>,
        b: Option<Var>,
        groups: usize,
        padding: usize,
    ) -> Result<Var> {
        let pwv = pw.map(|v| self.get(v)).transpose()?;
        let bv = b.map(|v| self.get(v)).transpose()?;
        let y = conv_block_raw(self.get(x)?, self.get(w)?, pwv, bv, groups, padding)?;
        self.push(
            Cow::Owned(y),
            Op::ConvBlock {
                x,
                w,
                pw,
                b,
                groups,
                padding,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.get(a)?.add(self.get(b)?)?;
        self.push(Cow::Owned(y), Op::Add(a, b))
    }

    /// Per-channel bias for `N x C x ...` activations.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let mut y = self.get(x)?.clone();
        add_channel_bias(&mut y, self.get(b)?)?;
        self.push(Cow::Owned(y), Op::BiasAdd { x, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.get(x)?);
        self.push(Cow::Owned(y), Op::Relu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.get(x)?)?;
        self.push(Cow::Owned(y), Op::AvgPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.get(x)?)?;
        self.push(Cow::Owned(y), Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.get(b)).transpose()?;
        let y = ops::linear(self.get(x)?, self.get(w)?, bias)?;
        self.push(Cow::Owned(y), Op::Linear { x, w, b })
    }

    /// Batch-mean cross-entropy; the result is a one-element tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.get(logits)?, labels)?;
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.get(x)?.sum();
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x))
    }

    /// `sum(x * weights)` for a fixed weight vector; handy for probing
    /// gradients with a non-trivial upstream signal.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.get(x)?;
        if xv.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} elements",
                weights.len(),
                xv.len()
            )));
        }
        let s = xv.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        self.push(
            Cow::Owned(Tensor::scalar(s)),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Graph(
                "backward called before any forward op was recorded".into(),
            ));
        }
        let root = self.nodes.get(loss.0).ok_or_else(|| {
            Error::Graph(format!("variable {} is not part of this graph", loss.0))
        })?;
        if root.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let mut acc = |v: Var, g: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    x,
                    w,
                    groups,
                    padding,
                } => {
                    let dy_t = Tensor::from_parts(node.value.shape().to_vec(), dy);
                    let need_dx = self.nodes[x.0].requires_grad;
                    let (dx, dw) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy_t,
                        *groups,
                        *padding,
                        need_dx,
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx.into_data());
                    }
                    acc(*w, dw.into_data());
                }
                Op::ConvBlock {
                    x,
                    w,
                    pw,
                    b,
                    groups,
                    padding,
                } => {
                    let mut dz = dy;
                    for (d, &y) in dz.iter_mut().zip(node.value.data()) {
                        if !(y > T::zero()) {
                            *d = T::zero();
                        }
                    }
                    if let Some(b) = b {
                        acc(*b, channel_sums(node.value.shape(), &dz));
                    }
                    let dz = Tensor::from_parts(node.value.shape().to_vec(), dz);
                    let need_dx = self.nodes[x.0].requires_grad;
                    if let Some(pw) = pw {
                        let (dx, dpw) =
                            conv2d_backward(self.value(*x), self.value(*pw), &dz, 1, 0, need_dx)?;
                        if let Some(dx) = dx {
                            acc(*x, dx.into_data());
                        }
                        acc(*pw, dpw.into_data());
                    }
                    let (dx, dw) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dz,
                        *groups,
                        *padding,
                        need_dx,
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx.into_data());
                    }
                    acc(*w, dw.into_data());
                }
                Op::Add(a, b) => {
                    acc(*b, dy.clone());
                    acc(*a, dy);
                }
                Op::BiasAdd { x, b } => {
                    acc(*b, channel_sums(node.value.shape(), &dy));
                    acc(*x, dy);
                }
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &dy)),
                Op::AvgPool2(x) => acc(*x, ops::avg_pool2_backward(self.value(*x).shape(), &dy)),
                Op::GlobalAvgPool(x) => acc(
                    *x,
                    ops::global_avg_pool_backward(self.value(*x).shape(), &dy),
                ),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &dy);
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    acc(
                        *logits,
                        ops::softmax_cross_entropy_backward(probs, labels, dy[0]),
                    );
                }
                Op::Sum(x) => acc(*x, vec![dy[0]; self.value(*x).len()]),
                Op::WeightedSum { x, weights } => {
                    acc(*x, weights.iter().map(|&w| w * dy[0]).collect())
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn channel_sums<T: Element>(shape: &[usize], dy: &[T]) -> Vec<T> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut db = vec![T::zero(); c];
    for (i, chunk) in dy.chunks(inner.max(1)).enumerate() {
        db[i % c] = db[i % c] + chunk.iter().copied().sum::<T>();
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_before_forward() {
        let g = Graph::<f32>::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([3]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([4], 2.0));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full([1, 1, 3, 3], 0.5));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data()[4], 9.0);
    }

    #[test]
    fn conv_block_matches_unfused_ops() {
        let x = Tensor::from_fn([2, 4, 5, 5], |i| ((i * 29 % 17) as f64 - 8.0) / 8.0);
        let w = Tensor::from_fn([4, 2, 3, 3], |i| ((i * 13 % 11) as f64 - 5.0) / 10.0);
        let pw = Tensor::from_fn([4, 4, 1, 1], |i| (i as f64 - 7.0) / 9.0);
        let b = Tensor::new([4], vec![0.1, -0.2, 0.3, -0.4]).unwrap();
        let probe: Vec<f64> = (0..200)
            .map(|i| ((i * 7 % 23) as f64 - 11.0) / 11.0)
            .collect();

        let mut g1 = Graph::new();
        let (x1, w1, p1, b1) = (
            g1.input(x.clone()),
            g1.param(&w),
            g1.param(&pw),
            g1.param(&b),
        );
        let y1 = g1.conv_block(x1, w1, Some(p1), Some(b1), 2, 1).unwrap();
        let s1 = g1.weighted_sum(y1, &probe).unwrap();
        let gr1 = g1.backward(s1).unwrap();

        let mut g2 = Graph::new();
        let (x2, w2, p2, b2) = (
            g2.input(x.clone()),
            g2.param(&w),
            g2.param(&pw),
            g2.param(&b),
        );
        let a = g2.conv2d(x2, w2, 2, 1).unwrap();
        let c = g2.conv2d(x2, p2, 1, 0).unwrap();
        let z = g2.add(a, c).unwrap();
        let z = g2.bias_add(z, b2).unwrap();
        let y2 = g2.relu(z).unwrap();
        let s2 = g2.weighted_sum(y2, &probe).unwrap();
        let gr2 = g2.backward(s2).unwrap();

        assert!(g1.value(y1).max_abs_diff(g2.value(y2)) < 1e-12);
        for (u, v) in [(x1, x2), (w1, w2), (p1, p2), (b1, b2)] {
            assert!(gr1.get(u).unwrap().max_abs_diff(gr2.get(v).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn checked_mode_trips_on_nan() {
        let mut g = Graph::<f32>::checked();
        let x = g.input(Tensor::new([2], vec![f32::NAN, 1.0]).unwrap());
        assert!(matches!(g.add(x, x), Err(Error::NonFinite("add"))));
    }
}
