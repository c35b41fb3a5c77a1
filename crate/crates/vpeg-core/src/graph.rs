//! Define-by-run reverse-mode differentiation over dense f64 matrices.
//!
//! A `Tape` owns the nodes of one computation graph. Ops append nodes in
//! construction order, which is also a valid topological order, so the
//! backward pass is a single reverse sweep. Graphs are rebuilt per training
//! step; recurrent rollouts of any horizon fall out naturally.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Reduction / concatenation axis. `Rows` collapses across rows (the result
/// keeps one row); `Cols` collapses across columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    MeanAxis(NodeId, Axis),
    VarAxis(NodeId, Axis),
    Sum(NodeId),
    SqNorm(NodeId),
    Concat(Vec<NodeId>, Axis),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
        stop: usize,
    },
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    /// True when `id` is a leaf (holds data, no parents).
    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.idx()].op, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        id
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter binding).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    fn unary(&mut self, op: Op, input: NodeId, value: Tensor) -> NodeId {
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (la, lb) = (self.value(a).shape(), self.value(b).shape());
        if la != lb {
            return Err(Error::ShapeMismatch {
                op,
                left: la,
                right: lb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = Tensor::zeros(m, n);
        matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let (r, c) = self.value(a).shape();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(r, c, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.value(a).shape();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(r, c, data), Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let (r, c) = self.value(a).shape();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(r, c, data), Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let (r, cl) = self.value(a).shape();
        self.unary(Op::Scale(a, c), a, Tensor::from_vec(r, cl, data))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let (r, cl) = self.value(a).shape();
        self.unary(Op::AddScalar(a), a, Tensor::from_vec(r, cl, data))
    }

    fn map_unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let (r, c) = self.value(a).shape();
        self.unary(op, a, Tensor::from_vec(r, c, data))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Tanh(a), libm::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + libm::exp(-x)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Exp(a), libm::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Log(a), libm::log)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map_unary(a, Op::Sqrt(a), libm::sqrt)
    }

    /// Mean across the given axis with the population convention.
    pub fn mean_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let v = self.value(a);
        let (r, c) = v.shape();
        let out = match axis {
            Axis::Rows => {
                let mut out = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[j] += v.at(i, j);
                    }
                }
                out.scale_in_place(1.0 / r as f64);
                out
            }
            Axis::Cols => {
                let mut out = Tensor::zeros(r, 1);
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += v.at(i, j);
                    }
                    out.data_mut()[i] = acc / c as f64;
                }
                out
            }
        };
        self.unary(Op::MeanAxis(a, axis), a, out)
    }

    /// Population variance (divide by count) across the given axis.
    pub fn var_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let v = self.value(a);
        let (r, c) = v.shape();
        let out = match axis {
            Axis::Rows => {
                let mut mean = alloc::vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        mean[j] += v.at(i, j);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut out = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        let d = v.at(i, j) - mean[j];
                        out.data_mut()[j] += d * d;
                    }
                }
                out.scale_in_place(1.0 / r as f64);
                out
            }
            Axis::Cols => {
                let mut out = Tensor::zeros(r, 1);
                for i in 0..r {
                    let row = v.row(i);
                    let mean: f64 = row.iter().sum::<f64>() / c as f64;
                    let var: f64 =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    out.data_mut()[i] = var;
                }
                out
            }
        };
        self.unary(Op::VarAxis(a, axis), a, out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.unary(Op::Sum(a), a, Tensor::scalar(total))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        self.unary(Op::SqNorm(a), a, Tensor::scalar(total))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: (0, 0),
                right: (0, 0),
            });
        }
        let first = self.value(parts[0]).shape();
        let out = match axis {
            Axis::Rows => {
                let cols = first.1;
                let mut rows = 0;
                for &p in parts {
                    let s = self.value(p).shape();
                    if s.1 != cols {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            left: first,
                            right: s,
                        });
                    }
                    rows += s.0;
                }
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_vec(rows, cols, data)
            }
            Axis::Cols => {
                let rows = first.0;
                let mut cols = 0;
                for &p in parts {
                    let s = self.value(p).shape();
                    if s.0 != rows {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            left: first,
                            right: s,
                        });
                    }
                    cols += s.1;
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(rows, cols, data)
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous row or column range [start, stop).
    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, stop: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).shape();
        let bound = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start >= stop || stop > bound {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: (r, c),
                right: (start, stop),
            });
        }
        let out = match axis {
            Axis::Rows => self.value(a).slice_rows(start, stop),
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (stop - start));
                for i in 0..r {
                    data.extend_from_slice(&self.value(a).row(i)[start..stop]);
                }
                Tensor::from_vec(r, stop - start, data)
            }
        };
        Ok(self.unary(
            Op::Slice {
                input: a,
                axis,
                start,
                stop,
            },
            a,
            out,
        ))
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape(),
                right: (rows, cols),
            });
        }
        let out = Tensor::from_vec(rows, cols, v.data().to_vec());
        Ok(self.unary(Op::Reshape(a), a, out))
    }

    /// Accumulate gradients for every node reachable from `root` that
    /// requires them. Each call propagates a fresh unit seed through scratch
    /// buffers and adds the result onto the persistent gradients, so calling
    /// twice without zeroing doubles every gradient exactly.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape(),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = alloc::vec![None; self.nodes.len()];
        scratch[root.idx()] = Some(alloc::vec![1.0]);
        for i in (0..=root.idx()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let up = match scratch[i].take() {
                Some(u) => u,
                None => continue,
            };
            for (g, d) in self.nodes[i].grad.data_mut().iter_mut().zip(&up) {
                *g += d;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &up, &mut scratch);
        }
        Ok(())
    }

    fn scatter(&self, scratch: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.idx()].requires_grad {
            return;
        }
        match &mut scratch[id.idx()] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), delta.len());
                for (a, b) in acc.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, op: &Op, up: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(a).shape();
                let n = self.value(b).cols();
                if self.rg(a) {
                    let mut da = alloc::vec![0.0; m * k];
                    matmul_nt(up, self.value(b).data(), &mut da, m, n, k);
                    self.scatter(scratch, a, da);
                }
                if self.rg(b) {
                    let mut db = alloc::vec![0.0; k * n];
                    matmul_tn(self.value(a).data(), up, &mut db, m, k, n);
                    self.scatter(scratch, b, db);
                }
            }
            Op::Add(a, b) => {
                self.scatter(scratch, a, up.to_vec());
                self.scatter(scratch, b, up.to_vec());
            }
            Op::Sub(a, b) => {
                self.scatter(scratch, a, up.to_vec());
                self.scatter(scratch, b, up.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let da = up
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.scatter(scratch, a, da);
                }
                if self.rg(b) {
                    let db = up
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.scatter(scratch, b, db);
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let da = up
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, y)| g / y)
                        .collect();
                    self.scatter(scratch, a, da);
                }
                if self.rg(b) {
                    let out = self.nodes[idx].value.data();
                    let db = up
                        .iter()
                        .zip(out.iter().zip(self.value(b).data()))
                        .map(|(g, (c, y))| -g * c / y)
                        .collect();
                    self.scatter(scratch, b, db);
                }
            }
            Op::Scale(a, c) => {
                self.scatter(scratch, a, up.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(a) => {
                self.scatter(scratch, a, up.to_vec());
            }
            Op::Tanh(a) => {
                let da = up
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::Relu(a) => {
                let da = up
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::Sigmoid(a) => {
                let da = up
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::Exp(a) => {
                let da = up
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::Log(a) => {
                let da = up
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::Sqrt(a) => {
                let da = up
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect();
                self.scatter(scratch, a, da);
            }
            Op::MeanAxis(a, axis) => {
                let (r, c) = self.value(a).shape();
                let mut da = alloc::vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = up[j] / r as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = up[i] / c as f64;
                            }
                        }
                    }
                }
                self.scatter(scratch, a, da);
            }
            Op::VarAxis(a, axis) => {
                let v = self.value(a);
                let (r, c) = v.shape();
                let mut da = alloc::vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        let mut mean = alloc::vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                mean[j] += v.at(i, j);
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= r as f64);
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = up[j] * 2.0 * (v.at(i, j) - mean[j]) / r as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            let row = v.row(i);
                            let mean: f64 = row.iter().sum::<f64>() / c as f64;
                            for j in 0..c {
                                da[i * c + j] = up[i] * 2.0 * (row[j] - mean) / c as f64;
                            }
                        }
                    }
                }
                self.scatter(scratch, a, da);
            }
            Op::Sum(a) => {
                let g = up[0];
                self.scatter(scratch, a, alloc::vec![g; self.value(a).numel()]);
            }
            Op::SqNorm(a) => {
                let g = up[0];
                let da = self.value(a).data().iter().map(|x| 2.0 * x * g).collect();
                self.scatter(scratch, a, da);
            }
            Op::Concat(ref parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let (pr, pc) = self.value(p).shape();
                        let d = up[offset..offset + pr * pc].to_vec();
                        self.scatter(scratch, p, d);
                        offset += pr * pc;
                    }
                }
                Axis::Cols => {
                    let rows = self.nodes[idx].value.rows();
                    let total = self.nodes[idx].value.cols();
                    let mut col = 0;
                    for &p in parts.iter() {
                        let (pr, pc) = self.value(p).shape();
                        debug_assert_eq!(pr, rows);
                        let mut d = Vec::with_capacity(pr * pc);
                        for i in 0..rows {
                            d.extend_from_slice(&up[i * total + col..i * total + col + pc]);
                        }
                        self.scatter(scratch, p, d);
                        col += pc;
                    }
                }
            },
            Op::Slice {
                input,
                axis,
                start,
                stop,
            } => {
                let (r, c) = self.value(input).shape();
                let mut da = alloc::vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        da[start * c..stop * c].copy_from_slice(up);
                    }
                    Axis::Cols => {
                        let w = stop - start;
                        for i in 0..r {
                            da[i * c + start..i * c + stop].copy_from_slice(&up[i * w..(i + 1) * w]);
                        }
                    }
                }
                self.scatter(scratch, input, da);
            }
            Op::Reshape(a) => {
                self.scatter(scratch, a, up.to_vec());
            }
        }
    }
}
