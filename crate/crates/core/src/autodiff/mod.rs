//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles in
//! execution order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse. One tape is
//! meant to live for a single training step.
//!
//! [`Tape::stop_gradient`] produces a node whose value equals its input
//! but which never passes gradient back. Any node whose inputs all lack
//! `requires_grad` also lacks it, so blocked branches are skipped entirely
//! during the backward sweep.
//!
//! Elementwise binary ops accept identical shapes or a single-element
//! operand on either side; nothing else broadcasts.

mod conv;
mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use conv::{ConvGeometry, ConvGrads};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Mean(Var),
    StopGradient,
    Conv2d { input: Var, weight: Var, bias: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward sweep.
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
    /// Replacement values for `stop_gradient` outputs, consumed in order.
    pinned: Option<std::collections::VecDeque<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: false,
            pinned: None,
        }
    }

    /// A tape for inference: nothing recorded on it requires a gradient and
    /// `backward` is rejected.
    pub fn frozen() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: true,
            pinned: None,
        }
    }

    /// A frozen tape on which the k-th `stop_gradient` call returns
    /// `values[k]` instead of its argument. Replaying a computation with the
    /// values recorded by [`Tape::stopped_values`] evaluates it with every
    /// stopped quantity held fixed, which is the function whose derivative
    /// `backward` computes.
    pub fn frozen_with_stopped(values: Vec<Tensor>) -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: true,
            pinned: Some(values.into()),
        }
    }

    /// Values produced by `stop_gradient`, in recording order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    /// Smallest distance from any `relu` or `abs` input element to the kink at
    /// zero; infinite when the tape has neither. Finite-difference checks are
    /// only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::Abs(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Identity on values; the result never propagates gradient to `a`.
    ///
    /// # Panics
    /// On a replay tape, if the pinned values run out or mismatch in shape.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = match self.pinned.as_mut() {
            Some(q) => {
                let v = q.pop_front().expect("more stop_gradient calls than pinned values");
                assert_eq!(v.shape(), self.nodes[a.0].value.shape(), "pinned value shape");
                v
            }
            None => self.nodes[a.0].value.clone(),
        };
        self.push(value, Op::StopGradient, false)
    }

    /// Zero "same"-padded convolution of an NCHW input with OIKK weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let g = self.conv_geometry(input, weight, bias)?;
        let out = conv::forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![g.batch, g.out_channels, g.height, g.width], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias }, rg))
    }

    fn conv_geometry(&self, input: Var, weight: Var, bias: Var) -> Result<ConvGeometry> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 {
            return Err(Error::InvalidKernel(format!("input must be NCHW, got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::InvalidKernel(format!("weights must be O×I×K×K, got {ws:?}")));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::InvalidKernel(format!("kernel side {} is even", ws[2])));
        }
        if ws[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        if bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        Ok(ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
        })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss`
    /// receives one; other requires-grad nodes report zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.frozen {
            return Err(Error::FrozenTape);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| match n.op {
                    Op::Leaf => g,
                    _ => None,
                })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g, |_, gi| gi);
                self.accumulate(grads, b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g, |_, gi| gi);
                self.accumulate(grads, b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, g, |i, gi| gi * pick(vb, i));
                self.accumulate(grads, b, g, |i, gi| gi * pick(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, g, |i, gi| gi / pick(vb, i));
                self.accumulate(grads, b, g, |i, gi| {
                    let d = pick(vb, i);
                    -gi * pick(va, i) / (d * d)
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g, |_, gi| gi * c),
            Op::Relu(a) => {
                let va = self.value(a).data();
                self.accumulate(grads, a, g, |i, gi| if va[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.accumulate(grads, a, g, |i, gi| gi * (1.0 - out[i] * out[i]));
            }
            Op::Abs(a) => {
                let va = self.value(a).data();
                self.accumulate(grads, a, g, |i, gi| {
                    if va[i] > 0.0 {
                        gi
                    } else if va[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                let share = g[0] / n;
                if self.requires_grad(a) {
                    let len = self.value(a).numel();
                    add_into(&mut grads[a.0], len, |_| share);
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let geometry = self.conv_geometry(input, weight, bias)?;
                let mut gi = self.requires_grad(input).then(|| vec![0.0; self.value(input).numel()]);
                let mut gw = self.requires_grad(weight).then(|| vec![0.0; self.value(weight).numel()]);
                let mut gb = self.requires_grad(bias).then(|| vec![0.0; self.value(bias).numel()]);
                conv::backward(
                    &geometry,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    ConvGrads {
                        input: gi.as_deref_mut(),
                        weight: gw.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (var, contribution) in [(input, gi), (weight, gw), (bias, gb)] {
                    if let Some(c) = contribution {
                        merge(&mut grads[var.0], c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds `f(i, g[i])` into the gradient of `target`, summing over the
    /// broadcast dimension when `target` is a single element.
    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.requires_grad(target) {
            return;
        }
        let len = self.value(target).numel();
        if len == g.len() {
            add_into(&mut grads[target.0], len, |i| f(i, g[i]));
        } else {
            let total: f64 = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum();
            add_into(&mut grads[target.0], len, |_| total);
        }
    }
}

fn pick(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    match slot {
        Some(acc) => acc.iter_mut().enumerate().for_each(|(i, a)| *a += f(i)),
        None => *slot = Some((0..len).map(f).collect()),
    }
}

fn merge(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

/// Result of [`Tape::backward`]: gradients of the leaves.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of `v`, or zeros when `v` was not reached.
    ///
    /// Only leaves keep gradients; intermediate nodes are released during
    /// the sweep and report zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Whether `v` received any gradient contribution.
    pub fn reached(&self, v: Var) -> bool {
        self.requires[v.0] && self.grads[v.0].is_some()
    }
}
