//! Reverse-mode differentiation on a linear tape, plus an eager executor.
//!
//! Network code is written once against [`Ops`]. Running it on a [`Graph`]
//! records every [`Op`] so gradients can be pulled back from a scalar; running
//! it on [`Eager`] evaluates forward only and drops intermediates as soon as
//! they go out of scope.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A differentiable operation.
pub trait Op<T: Real> {
    fn name(&self) -> &'static str;

    /// Computes the output. May cache auxiliary state needed by `backward`.
    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Vector-Jacobian product. Returns one entry per input; entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Executor abstraction shared by the tape and the eager evaluator.
pub trait Ops<T: Real> {
    type V: Clone;

    /// Input that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    /// Trainable leaf.
    fn parameter(&mut self, t: &Tensor<T>) -> Self::V;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    fn apply<O: Op<T> + 'static>(&mut self, op: O, inputs: &[&Self::V]) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Add, &[a, b])
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Relu, &[x])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    fn scale(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        self.apply(Scale, &[x, s])
    }

    fn concat_channels(&mut self, xs: &[&Self::V]) -> Result<Self::V> {
        self.apply(ConcatChannels, xs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Option<Box<dyn Op<T>>>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf taking ownership of `t`.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sum of all elements, producing a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(SumAll, &[&x])
    }

    /// `Σ x ⊙ w` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        let w = self.constant(w);
        self.apply(WeightedSum, &[&x, &w])
    }

    /// Pulls gradients back from the one-element tensor `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            for ((&p, need), g) in node.parents.iter().zip(needs).zip(parent_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(Error::Dimension(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Intermediate gradients were taken above; only leaves keep theirs.
        Ok(Gradients { grads })
    }
}

impl<T: Real> Ops<T> for Graph<T> {
    type V = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false)
    }

    fn parameter(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn apply<O: Op<T> + 'static>(&mut self, mut op: O, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: out,
            parents: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }
}

/// Gradients produced by [`Graph::backward`]; populated for leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Forward-only executor; values are reference counted and freed on drop.
#[derive(Default)]
pub struct Eager;

impl<T: Real> Ops<T> for Eager {
    type V = Rc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Rc::new(t)
    }

    fn parameter(&mut self, t: &Tensor<T>) -> Self::V {
        Rc::new(t.clone())
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T> {
        v
    }

    fn apply<O: Op<T> + 'static>(&mut self, mut op: O, inputs: &[&Self::V]) -> Result<Self::V> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(op.forward(&values)?))
    }
}

fn expect_inputs<T: Real>(name: &str, inputs: &[&Tensor<T>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Dimension(format!(
            "{name} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

pub struct Add;

impl<T: Real> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs("add", inputs, 2)?;
        if inputs[0].shape() != inputs[1].shape() {
            return Err(Error::shape(inputs[0].shape(), inputs[1].shape()));
        }
        let mut out = inputs[0].clone();
        out.add_assign(inputs[1]);
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

pub struct Relu;

impl<T: Real> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs("relu", inputs, 1)?;
        Ok(inputs[0].map(|v| v.max(T::zero())))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0].data();
        let g = Tensor::from_fn(grad.shape(), |i| {
            if x[i] > T::zero() {
                grad.data()[i]
            } else {
                T::zero()
            }
        });
        Ok(vec![Some(g)])
    }
}

pub struct Scale;

impl<T: Real> Op<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs("scale", inputs, 2)?;
        if inputs[1].len() != 1 {
            return Err(Error::Dimension("scale factor must have one element".into()));
        }
        let s = inputs[1].data()[0];
        Ok(inputs[0].map(|v| v * s))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let s = inputs[1].data()[0];
        let dx = needs[0].then(|| grad.map(|g| g * s));
        let ds = needs[1].then(|| {
            let dot: T = grad
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| g * x)
                .sum();
            Tensor::from_fn(inputs[1].shape(), |_| dot)
        });
        Ok(vec![dx, ds])
    }
}

/// Concatenates rank-4 tensors along the channel axis.
pub struct ConcatChannels;

impl<T: Real> Op<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut c_total = 0;
        for t in inputs {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::shape(&[n, tc, h, w], t.shape()));
            }
            c_total += tc;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for t in inputs {
                data.extend_from_slice(t.batch(b));
            }
        }
        Tensor::from_vec(&[n, c_total, h, w], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let n = grad.shape()[0];
        let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
        for b in 0..n {
            let mut offset = 0;
            let gb = grad.batch(b);
            for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                let per = t.len() / n;
                g.extend_from_slice(&gb[offset..offset + per]);
                offset += per;
            }
        }
        inputs
            .iter()
            .zip(grads)
            .zip(needs)
            .map(|((t, g), &need)| {
                if need {
                    Tensor::from_vec(t.shape(), g).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }
}

struct SumAll;

impl<T: Real> Op<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs("sum", inputs, 1)?;
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))])
    }
}

struct WeightedSum;

impl<T: Real> Op<T> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs("weighted_sum", inputs, 2)?;
        if inputs[0].shape() != inputs[1].shape() {
            return Err(Error::shape(inputs[0].shape(), inputs[1].shape()));
        }
        let s = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(Tensor::scalar(s))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0];
        Ok(vec![Some(inputs[1].map(|w| w * g)), None])
    }
}
