//! Dynamic reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`] and returns its
//! [`NodeId`]. Inputs always precede outputs, so [`Tape::backward`] walks the
//! record once in reverse to accumulate adjoints.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input; gradients are reported for these.
    Leaf,
    /// Data input; never receives a gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Horizontal concatenation of matrices with equal row counts.
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; exact zeros when `id` does not reach the loss.
    pub fn wrt(&self, id: NodeId) -> Result<Tensor> {
        match self.grads.get(id.0) {
            Some(Some(g)) => Ok(g.clone()),
            Some(None) => Ok(Tensor::zeros(&self.shapes[id.0])),
            None => Err(Error::DanglingNode {
                id: id.0,
                len: self.grads.len(),
            }),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward rule shared by recording and replay.
fn eval(op: &Op, vals: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("inputs have no forward rule"),
        Op::MatMul(..) => vals[0].matmul(vals[1])?,
        Op::Add(..) => vals[0].zip_with(vals[1], "add", |a, b| a + b)?,
        Op::Sub(..) => vals[0].zip_with(vals[1], "sub", |a, b| a - b)?,
        Op::Mul(..) => vals[0].zip_with(vals[1], "mul", |a, b| a * b)?,
        Op::Tanh(_) => vals[0].map(f64::tanh),
        Op::Sigmoid(_) => vals[0].map(sigmoid),
        Op::Relu(_) => vals[0].map(|v| v.max(0.0)),
        Op::Sum(_) => Tensor::scalar(vals[0].sum()),
        Op::Mean(_) => {
            let t = vals[0];
            if t.is_empty() {
                return Err(Error::Empty("mean of empty tensor".into()));
            }
            Tensor::scalar(t.sum() / t.len() as f64)
        }
        Op::ConcatCols(_) => {
            let rows = vals[0].rows();
            if let Some(bad) = vals.iter().find(|v| v.rows() != rows || v.shape().len() != 2) {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vals[0].shape().to_vec(),
                    right: bad.shape().to_vec(),
                });
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        }
    };
    Ok(out)
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Tanh(a) | Op::Sigmoid(a) | Op::Relu(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
        Op::ConcatCols(ids) => ids.clone(),
    }
}

/// Reduce a broadcast gradient back to the operand's shape.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::scalar(grad.sum())
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

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_input(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_input(Op::Constant, value)
    }

    fn push_input(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::DanglingNode {
                id: id.0,
                len: self.nodes.len(),
            })
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn record(&mut self, op: Op, name: &'static str) -> Result<NodeId> {
        let ids = inputs(&op);
        for &id in &ids {
            self.check(id)?;
        }
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i.0].value).collect();
        let value = eval(&op, &vals)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b), "mul")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(a), "relu")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(a), "mean")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols needs at least one input".into()));
        }
        self.record(Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// Dispatch form of the elementwise primitives. Binary ops take two
    /// arguments, unary ops one.
    pub fn elementwise(&mut self, op: Elementwise, args: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Dimension(format!(
                "{op:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Relu => self.relu(args[0]),
        }
    }

    /// Recompute every derived node from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => {
                    let args: Vec<&Tensor> = inputs(op).iter().map(|i| &vals[i.0]).collect();
                    eval(op, &args)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_val.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let push = |grads: &mut Vec<Option<Tensor>>, id: NodeId, contrib: Tensor| -> Result<()> {
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    push(&mut grads, *a, g.matmul(&bv.transpose())?)?;
                    push(&mut grads, *b, av.transpose().matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    push(&mut grads, *a, unbroadcast(g.clone(), self.value(*a)))?;
                    push(&mut grads, *b, unbroadcast(g, self.value(*b)))?;
                }
                Op::Sub(a, b) => {
                    push(&mut grads, *a, unbroadcast(g.clone(), self.value(*a)))?;
                    push(&mut grads, *b, unbroadcast(g.map(|v| -v), self.value(*b)))?;
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.zip_with(bv, "mul", |x, y| x * y)?;
                    let gb = g.zip_with(av, "mul", |x, y| x * y)?;
                    push(&mut grads, *a, unbroadcast(ga, av))?;
                    push(&mut grads, *b, unbroadcast(gb, bv))?;
                }
                Op::Tanh(a) => {
                    let d = g.zip_with(&node.value, "tanh", |x, y| x * (1.0 - y * y))?;
                    push(&mut grads, *a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_with(&node.value, "sigmoid", |x, y| x * y * (1.0 - y))?;
                    push(&mut grads, *a, d)?;
                }
                Op::Relu(a) => {
                    let d = g.zip_with(self.value(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?;
                    push(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    push(&mut grads, *a, Tensor::full(self.value(*a).shape(), s))?;
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0] / av.len() as f64;
                    push(&mut grads, *a, Tensor::full(av.shape(), s))?;
                }
                Op::ConcatCols(ids) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for id in ids {
                        let c = self.value(*id).cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        push(&mut grads, *id, Tensor::new(self.value(*id).shape().to_vec(), data)?)?;
                        offset += c;
                    }
                }
            }
        }

        // Only leaves carry meaningful adjoints for callers.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}
