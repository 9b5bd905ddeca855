//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, so node inputs always precede the node. [`Graph::backward`] walks
//! the tape in reverse and accumulates vector-Jacobian products.

pub mod conv;
mod ops;

pub use ops::{backward as vjp, forward as forward_op, Op};

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
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

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: vec![],
            value,
            trainable,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| Var(i))
    }

    /// Applies `op` to `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss` (shape `[]` or `[1]`).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 || lv.ndim() > 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let in_grads = ops::backward(op, &inputs, &node.value, &g, &needs)?;
            for ((&src, gi), need) in node.inputs.iter().zip(in_grads).zip(needs) {
                let Some(gi) = gi.filter(|_| need) else {
                    continue;
                };
                match &mut grads[src] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        // keep gradients only where callers can ask for them
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.trainable && i != loss.0 && n.op.is_some() {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, k])
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::ConvTranspose2d { stride, pad }, &[x, k])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Op::BiasAdd, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu(slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn max_with_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::MaxScalar(c), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(axes.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn vector_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Op::VectorNorm { axis, eps }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn squash(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Op::Squash { axis, eps }, &[x])
    }
}
