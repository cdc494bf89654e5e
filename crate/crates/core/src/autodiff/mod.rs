//! Define-by-run reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep visits each node once in reverse topological order.
//!
//! ```
//! use hirnet_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! A graph supports exactly one [`Graph::backward`] call; build a fresh graph
//! for every forward pass.

mod check;
mod tensor;

pub use check::{grad_check, numeric_gradient};
pub use tensor::Tensor;

use crate::error::{HirError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: NodeId,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    SumCols(NodeId),
    SelectRows(NodeId, Vec<usize>),
    PickCols(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by node id.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.rows, var.cols))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value, true)
    }

    /// Non-differentiable leaf (inputs, masks, fixed coefficients).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::MatMul(a.id, b.id), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a.id]);
        self.push(Op::Transpose(a.id), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::Add(a.id, b.id), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::Sub(a.id, b.id), value, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::Mul(a.id, b.id), value, rg))
    }

    /// Adds a `1 x n` bias row to every row of an `m x n` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        if bias.rows != 1 || bias.cols != x.cols {
            return Err(HirError::Shape(format!(
                "bias {}x{} does not broadcast over {}x{}",
                bias.rows, bias.cols, x.rows, x.cols
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        let cols = x.cols;
        for row in value.data_mut().chunks_exact_mut(cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.needs(&[x.id, bias.id]);
        Ok(self.push(Op::AddRowBias(x.id, bias.id), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.needs(&[a.id]);
        self.push(Op::Scale(a.id, factor), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.needs(&[a.id]);
        self.push(Op::Relu(a.id), value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.needs(&[a.id]);
        self.push(Op::Exp(a.id), value, rg)
    }

    /// Row-wise log-softmax. Requires at least two columns.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        if logits.cols < 2 {
            return Err(HirError::Contract(format!(
                "log_softmax needs at least 2 classes, got {}",
                logits.cols
            )));
        }
        let value = self.value(logits).log_softmax();
        let rg = self.needs(&[logits.id]);
        Ok(self.push(Op::LogSoftmax(logits.id), value, rg))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a.id]);
        self.push(Op::Sum(a.id), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums across columns: `m x n` to `m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Tensor::new(a.rows, 1, data).expect("row sums match row count");
        let rg = self.needs(&[a.id]);
        self.push(Op::SumCols(a.id), value, rg)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.rows) {
            return Err(HirError::Shape(format!(
                "row index {bad} out of range for {} rows",
                a.rows
            )));
        }
        let value = self.value(a).select_rows(indices);
        let rg = self.needs(&[a.id]);
        Ok(self.push(Op::SelectRows(a.id, indices.to_vec()), value, rg))
    }

    /// Entry `cols[i]` of every row `i`, as an `n x 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        if cols.len() != a.rows {
            return Err(HirError::Shape(format!("{} column indices for {} rows", cols.len(), a.rows)));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= a.cols) {
            return Err(HirError::Shape(format!("column index {bad} out of range for {} columns", a.cols)));
        }
        let src = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &c)| src.get(i, c)).collect();
        let value = Tensor::new(a.rows, 1, data)?;
        let rg = self.needs(&[a.id]);
        Ok(self.push(Op::PickCols(a.id, cols.to_vec()), value, rg))
    }

    /// Reverse sweep from a scalar loss. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(HirError::Contract(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if loss.shape() != (1, 1) {
            return Err(HirError::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        if loss.id.0 >= self.nodes.len() {
            return Err(HirError::Contract("loss is not on this graph".into()));
        }
        self.backward_done = true;

        let mut slots: Vec<Option<Tensor>> = vec![None; loss.id.0 + 1];
        slots[loss.id.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.id.0).rev() {
            let Some(upstream) = slots[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &upstream)?;
            for (parent, grad) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut slots[parent.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            slots[idx] = Some(upstream);
        }

        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { slots })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let grads = match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let da = up.matmul(&val(*b).transpose())?;
                let db = val(*a).transpose().matmul(up)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, up.transpose())],
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|v| -v))],
            Op::Mul(a, b) => {
                let da = up.zip_map(val(*b), |g, y| g * y)?;
                let db = up.zip_map(val(*a), |g, x| g * x)?;
                vec![(*a, da), (*b, db)]
            }
            Op::AddRowBias(x, bias) => {
                let cols = up.cols();
                let mut db = vec![0.0; cols];
                for row in up.iter_rows() {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                vec![(*x, up.clone()), (*bias, Tensor::new(1, cols, db)?)]
            }
            Op::Scale(a, factor) => vec![(*a, up.map(|g| g * factor))],
            Op::Relu(a) => {
                let dx = up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                vec![(*a, dx)]
            }
            Op::Exp(a) => vec![(*a, up.zip_map(&node.value, |g, y| g * y)?)],
            Op::LogSoftmax(a) => {
                // dx = dy - softmax * rowsum(dy)
                let y = &node.value;
                let mut dx = up.clone();
                let cols = y.cols();
                for r in 0..y.rows() {
                    let row_sum: f64 = up.row(r).iter().sum();
                    for c in 0..cols {
                        let v = dx.get(r, c) - y.get(r, c).exp() * row_sum;
                        dx.set(r, c, v);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, up.item()?))]
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let g = up.get(i, 0);
                    for j in 0..c {
                        dx.set(i, j, g);
                    }
                }
                vec![(*a, dx)]
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor::zeros(r, c);
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        let v = dx.get(src, j) + up.get(k, j);
                        dx.set(src, j, v);
                    }
                }
                vec![(*a, dx)]
            }
            Op::PickCols(a, cols) => {
                let (r, c) = val(*a).shape();
                let mut dx = Tensor::zeros(r, c);
                for (i, &j) in cols.iter().enumerate() {
                    dx.set(i, j, up.get(i, 0));
                }
                vec![(*a, dx)]
            }
        };
        Ok(grads)
    }
}
