//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; node ids are handed out as
//! [`Var`] handles, so inputs always precede the nodes that consume them.
//! [`Tape::backward`] walks the tape once in reverse. Nodes that do not
//! depend on a trainable leaf are never visited.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    MulRow(Var, Var),
    AddRow(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. Gradients are tracked only for trainable leaves.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.unary(a, v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).add_scalar(offset);
        self.unary(a, v, Op::AddScalar(a))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sqrt()?;
        Ok(self.unary(a, v, Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).square();
        self.unary(a, v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.unary(a, v, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).ln()?;
        Ok(self.unary(a, v, Op::Log(a)))
    }

    /// Clamp with a straight-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Domain {
                op: "clamp",
                detail: format!("empty band [{lo}, {hi}]"),
            });
        }
        let v = self.value(a).clamp(lo, hi);
        Ok(self.unary(a, v, Op::Clamp(a, lo, hi)))
    }

    /// Multiplies each trailing-axis row of `a` by the vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).mul_row(self.value(row))?;
        Ok(self.binary(a, row, v, Op::MulRow(a, row)))
    }

    /// Adds the vector `row` to each trailing-axis row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.binary(a, row, v, Op::AddRow(a, row)))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let bt = self.value(b).transpose()?;
                    self.accumulate(grads, a, g.matmul(&bt)?)?;
                }
                if self.requires_grad(b) {
                    let at = self.value(a).transpose()?;
                    self.accumulate(grads, b, at.matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.mul(self.value(b))?)?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.mul(self.value(a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.scale(c))?,
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone())?,
            Op::Sqrt(a) => {
                // d sqrt(x) = 1 / (2 sqrt(x)), reusing the forward output.
                let d = node.value.map(|s| 0.5 / s);
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Square(a) => {
                let d = self.value(a).scale(2.0);
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Abs(a) => {
                let d = self.value(a).map(f64::signum_or_zero);
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let d = Tensor::full(x.shape(), g.item()? / x.len() as f64);
                self.accumulate(grads, a, scalar_shaped(d, x))?;
            }
            Op::Sum(a) => {
                let x = self.value(a);
                let d = Tensor::full(x.shape(), g.item()?);
                self.accumulate(grads, a, scalar_shaped(d, x))?;
            }
            Op::Sigmoid(a) => {
                let d = node.value.map(|s| s * (1.0 - s));
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Tanh(a) => {
                let d = node.value.map(|t| 1.0 - t * t);
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Log(a) => {
                let d = self.value(a).map(|x| 1.0 / x);
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::Clamp(a, lo, hi) => {
                let d = self
                    .value(a)
                    .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                self.accumulate(grads, a, g.mul(&d)?)?;
            }
            Op::MulRow(a, row) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.mul_row(self.value(row))?)?;
                }
                if self.requires_grad(row) {
                    self.accumulate(grads, row, g.mul(self.value(a))?.sum_rows())?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone())?;
                if self.requires_grad(row) {
                    self.accumulate(grads, row, g.sum_rows())?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contrib: Tensor) -> Result<()> {
        if !self.requires_grad(target) {
            return Ok(());
        }
        let shape = self.value(target).shape();
        // A scalar operand broadcast over a larger tensor collects the sum.
        let contrib = if contrib.shape() != shape && self.value(target).is_scalar() {
            scalar_shaped(Tensor::scalar(contrib.sum()), self.value(target))
        } else {
            contrib
        };
        match &mut grads[target.0] {
            Some(existing) => *existing = existing.add(&contrib)?,
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }
}

fn scalar_shaped(t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() == like.shape() {
        t
    } else {
        Tensor::new(like.shape(), t.into_data()).expect("same element count")
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
