//! Differentiable building blocks: convolution, the residual block
//! (Conv 3×3 → ReLU → Conv 3×3 plus identity skip, no normalization) and the
//! deformable convolution.

mod conv;
mod deform;
mod gradcheck;

pub use conv::Conv2d;
pub use deform::{bilinear_sample, DeformConv2d};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};

use crate::error::{Error, Result};
use crate::graph::{Eager, Ops};
use crate::real::Real;
use crate::tensor::Tensor;

/// Weights `C_out×C_in×k×k` and bias `C_out` of a stride-1, shape-preserving convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (c_out, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel must be square with odd size, got {kh}×{kw}"
            )));
        }
        if bias.len() != c_out {
            return Err(Error::shape(&[c_out], bias.shape()));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Borrowed weight and bias handles of one convolution on an executor.
#[derive(Debug)]
pub struct ConvRef<'a, V> {
    pub weight: &'a V,
    pub bias: &'a V,
}

impl<V> Clone for ConvRef<'_, V> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<V> Copy for ConvRef<'_, V> {}

impl<'a, V> ConvRef<'a, V> {
    pub fn new(weight: &'a V, bias: &'a V) -> Self {
        ConvRef { weight, bias }
    }
}

/// Applies a borrowed convolution.
pub fn conv_ref<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, c: ConvRef<'_, O::V>) -> Result<O::V> {
    conv(ops, x, c.weight, c.bias)
}

/// `conv(x; w, b)` on any executor.
pub fn conv<T: Real, O: Ops<T>>(ops: &mut O, x: &O::V, w: &O::V, b: &O::V) -> Result<O::V> {
    ops.apply(Conv2d, &[x, w, b])
}

/// `x + conv(relu(conv(x; w1, b1)); w2, b2)` on any executor.
pub fn residual<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    first: (&O::V, &O::V),
    second: (&O::V, &O::V),
) -> Result<O::V> {
    let h = conv(ops, x, first.0, first.1)?;
    let h = ops.relu(&h)?;
    let h = conv(ops, &h, second.0, second.1)?;
    ops.add(x, &h)
}

/// Deformable convolution with `groups` offset groups on any executor.
pub fn deform<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    offsets: &O::V,
    w: &O::V,
    b: &O::V,
    groups: usize,
) -> Result<O::V> {
    ops.apply(DeformConv2d { groups }, &[x, offsets, w, b])
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let mut e = Eager;
    let xv = e.constant(x.clone());
    let w = e.parameter(&p.weight);
    let b = e.parameter(&p.bias);
    let y = conv(&mut e, &xv, &w, &b)?;
    Ok(unwrap_rc(y))
}

pub fn res_block<T: Real>(x: &Tensor<T>, p1: &ConvParams<T>, p2: &ConvParams<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    if p1.c_in() != c || p1.c_out() != c || p2.c_in() != c || p2.c_out() != c {
        return Err(Error::Dimension(format!(
            "residual block needs {c}→{c} convolutions, got {}→{} and {}→{}",
            p1.c_in(),
            p1.c_out(),
            p2.c_in(),
            p2.c_out()
        )));
    }
    let mut e = Eager;
    let xv = e.constant(x.clone());
    let (w1, b1) = (e.parameter(&p1.weight), e.parameter(&p1.bias));
    let (w2, b2) = (e.parameter(&p2.weight), e.parameter(&p2.bias));
    let y = residual(&mut e, &xv, (&w1, &b1), (&w2, &b2))?;
    Ok(unwrap_rc(y))
}

/// Offsets are `N×(2·k²·G)×H×W` in pixel units.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    p: &ConvParams<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let mut e = Eager;
    let xv = e.constant(x.clone());
    let ov = e.constant(offsets.clone());
    let w = e.parameter(&p.weight);
    let b = e.parameter(&p.bias);
    let y = deform(&mut e, &xv, &ov, &w, &b, groups)?;
    Ok(unwrap_rc(y))
}

pub(crate) fn unwrap_rc<T: Clone>(v: std::rc::Rc<T>) -> T {
    std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
}
