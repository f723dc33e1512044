//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Every tensor is two-dimensional (`rows x cols`); scalars are `1 x 1`.
//! Values are recorded on a [`Tape`] as [`Var`] handles. A node either
//! requires a gradient (a trainable leaf or anything computed from one) or
//! is a constant; [`Tape::backward`] only ever propagates into the former.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{NccError, Result};

/// Default row-norm floor for [`Var::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
/// Variance floor used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NccError::Dimension(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    /// A `1 x n` tensor.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len()],
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NccError::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.shape[0]).map(move |i| self.row(i))
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Option<f64> {
        (self.shape == [1, 1]).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, index: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(index.len() * self.cols());
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: [index.len(), self.cols()],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return Err(NccError::Dimension(format!(
                "matmul {n}x{k} by {k2}x{m}"
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.shape;
        let [m, k2] = other.shape;
        if k != k2 {
            return Err(NccError::Dimension(format!(
                "matmul_t {n}x{k} by ({m}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = dot(a, other.row(j));
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [k, n] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return Err(NccError::Dimension(format!(
                "t_matmul ({k}x{n})ᵀ by {k2}x{m}"
            )));
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = self.row(p);
            let brow = other.row(p);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reduction axis for [`Var::logsumexp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down each column, producing `1 x cols`.
    Rows,
    /// Reduce across each row, producing `rows x 1`.
    Cols,
}

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
        eps: f64,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    LogSumExp(NodeId, Axis),
    Gather {
        input: NodeId,
        index: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    Fill {
        input: NodeId,
        mask: Vec<bool>,
    },
    MseRows(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Running statistics for one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the old running value in each update.
    pub momentum: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.9,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf: receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.shape() != [1, 1] {
            return Err(NccError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if out.requires_grad {
            grads[output.id] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |target: NodeId, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: NodeId| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul_t(val(*b))?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, val(*a).t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul(val(*b))?);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, g.t_matmul(val(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_with(val(*b), |x, y| x * y));
                    send(*b, g.zip_with(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, r) => {
                    if nodes[*r].requires_grad {
                        let mut acc = vec![0.0; g.cols()];
                        for row in g.iter_rows() {
                            for (s, v) in acc.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        send(*r, Tensor::row_vector(acc));
                    }
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
                Op::Relu(a) => send(
                    *a,
                    g.zip_with(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                ),
                Op::L2Normalize { input, norms, eps } => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for (r, &n) in norms.iter().enumerate() {
                        let gr = g.row(r);
                        let out = dx.row_mut(r);
                        if n > *eps {
                            let u = y.row(r);
                            let proj = dot(u, gr);
                            for ((o, gv), uv) in out.iter_mut().zip(gr).zip(u) {
                                *o = (gv - uv * proj) / n;
                            }
                        } else {
                            for (o, gv) in out.iter_mut().zip(gr) {
                                *o = gv / eps;
                            }
                        }
                    }
                    send(*input, dx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let [n, d] = g.shape();
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let gv = g.get(i, j);
                            dbeta[j] += gv;
                            dgamma[j] += gv * xhat.get(i, j);
                        }
                    }
                    if nodes[*input].requires_grad {
                        let mut dx = Tensor::zeros(n, d);
                        let nf = n as f64;
                        for j in 0..d {
                            let gj = gam.data()[j];
                            if *batch_stats {
                                // dxhat = g*gamma; dx = inv_std/n (n dxhat - Σdxhat - xhat Σ dxhat xhat)
                                let sum_dxhat = dbeta[j] * gj;
                                let sum_dxhat_xhat = dgamma[j] * gj;
                                for i in 0..n {
                                    let dxh = g.get(i, j) * gj;
                                    dx.data_mut()[i * d + j] = inv_std[j] / nf
                                        * (nf * dxh - sum_dxhat - xhat.get(i, j) * sum_dxhat_xhat);
                                }
                            } else {
                                for i in 0..n {
                                    dx.data_mut()[i * d + j] = g.get(i, j) * gj * inv_std[j];
                                }
                            }
                        }
                        send(*input, dx);
                    }
                    send(*gamma, Tensor::row_vector(dgamma));
                    send(*beta, Tensor::row_vector(dbeta));
                }
                Op::Sum(a) => {
                    let s = g.data[0];
                    let shape = val(*a).shape();
                    send(*a, Tensor::full(shape[0], shape[1], s));
                }
                Op::Mean(a) => {
                    let shape = val(*a).shape();
                    let s = g.data[0] / (shape[0] * shape[1]) as f64;
                    send(*a, Tensor::full(shape[0], shape[1], s));
                }
                Op::SumCols(a) => {
                    let [n, m] = val(*a).shape();
                    let mut dx = Tensor::zeros(n, m);
                    for i in 0..n {
                        let gv = g.data[i];
                        dx.row_mut(i).iter_mut().for_each(|v| *v = gv);
                    }
                    send(*a, dx);
                }
                Op::LogSumExp(a, axis) => {
                    let x = val(*a);
                    let y = &node.value;
                    let [n, m] = x.shape();
                    let mut dx = Tensor::zeros(n, m);
                    for i in 0..n {
                        for j in 0..m {
                            let k = match axis {
                                Axis::Cols => i,
                                Axis::Rows => j,
                            };
                            dx.data[i * m + j] = g.data[k] * (x.get(i, j) - y.data[k]).exp();
                        }
                    }
                    send(*a, dx);
                }
                Op::Gather { input, index } => {
                    let [n, m] = val(*input).shape();
                    let mut dx = Tensor::zeros(n, m);
                    for (gv, &src) in g.data.iter().zip(index) {
                        dx.data[src] += gv;
                    }
                    send(*input, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    let n = g.rows();
                    let mut da = Tensor::zeros(n, ca);
                    let mut db = Tensor::zeros(n, cb);
                    for i in 0..n {
                        let gr = g.row(i);
                        da.row_mut(i).copy_from_slice(&gr[..ca]);
                        db.row_mut(i).copy_from_slice(&gr[ca..]);
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Fill { input, mask } => {
                    let mut dx = g;
                    for (v, &m) in dx.data.iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    send(*input, dx);
                }
                Op::MseRows(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let c = 2.0 * g.data[0] / av.rows() as f64;
                    let diff = av.zip_with(bv, |x, y| c * (x - y));
                    if nodes[*b].requires_grad {
                        send(*b, diff.map(|v| -v));
                    }
                    send(*a, diff);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| {
            let [r, c] = var.shape();
            Tensor::zeros(r, c)
        })
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NccError::Dimension(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn logsumexp_slice(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        self.value().data[0]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_t(&other.value())?;
        Ok(self.binary(other, v, Op::MatMulT(self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let v = a.zip_with(&b, |x, y| x + y);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let v = a.zip_with(&b, |x, y| x - y);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let v = a.zip_with(&b, |x, y| x * y);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(NccError::Dimension(format!(
                "add_row: {:?} + {:?}",
                a.shape(),
                r.shape()
            )));
        }
        let mut v = (*a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let mut v = (*x).clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = norm(x.row(i));
            let denom = n.max(eps);
            v.row_mut(i).iter_mut().for_each(|e| *e /= denom);
            norms.push(n);
        }
        self.unary(
            v,
            Op::L2Normalize {
                input: self.id,
                norms,
                eps,
            },
        )
    }

    /// Per-feature batch normalization with learnable `gamma`/`beta` rows.
    ///
    /// In training mode batch statistics are used and `state` is updated;
    /// otherwise the running statistics in `state` are applied.
    pub fn batchnorm1d(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let [n, d] = x.shape();
        if gamma.shape() != [1, d] || beta.shape() != [1, d] {
            return Err(NccError::Dimension(format!(
                "batchnorm1d: input {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let (mean, var) = if training {
            if n < 2 {
                return Err(NccError::BatchSize(n));
            }
            let nf = n as f64;
            let mut mean = vec![0.0; d];
            for row in x.iter_rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut var = vec![0.0; d];
            for row in x.iter_rows() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);
            let mom = state.momentum;
            for j in 0..d {
                let unbiased = var[j] * nf / (nf - 1.0);
                state.running_mean[j] = mom * state.running_mean[j] + (1.0 - mom) * mean[j];
                state.running_var[j] = mom * state.running_var[j] + (1.0 - mom) * unbiased;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                xhat.data[i * d + j] = (x.get(i, j) - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (gamma.value(), beta.value());
        let mut y = xhat.clone();
        for i in 0..n {
            for j in 0..d {
                y.data[i * d + j] = y.data[i * d + j] * g.data[j] + b.data[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            y,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: training,
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.value().data.iter().sum();
        self.unary(Tensor::scalar(v), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let v = x.data.iter().sum::<f64>() / x.len() as f64;
        self.unary(Tensor::scalar(v), Op::Mean(self.id))
    }

    /// Sums across each row: `n x m -> n x 1`.
    pub fn sum_cols(&self) -> Var<'t> {
        let x = self.value();
        let v: Vec<f64> = x.iter_rows().map(|r| r.iter().sum()).collect();
        let n = v.len();
        self.unary(Tensor { shape: [n, 1], data: v }, Op::SumCols(self.id))
    }

    /// Max-shifted `log Σ exp` along `axis`.
    pub fn logsumexp(&self, axis: Axis) -> Result<Var<'t>> {
        let x = self.value();
        let [n, m] = x.shape();
        let v = match axis {
            Axis::Cols => {
                if m == 0 {
                    return Err(NccError::Dimension("logsumexp over an empty row".into()));
                }
                let data = x.iter_rows().map(|r| logsumexp_slice(r.iter().copied())).collect();
                Tensor { shape: [n, 1], data }
            }
            Axis::Rows => {
                if n == 0 {
                    return Err(NccError::Dimension("logsumexp over an empty column".into()));
                }
                let data = (0..m)
                    .map(|j| logsumexp_slice((0..n).map(|i| x.get(i, j))))
                    .collect();
                Tensor { shape: [1, m], data }
            }
        };
        Ok(self.unary(v, Op::LogSumExp(self.id, axis)))
    }

    /// Output element `i` is input element `index[i]` (flat row-major).
    pub fn gather(&self, rows: usize, cols: usize, index: Vec<usize>) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != rows * cols {
            return Err(NccError::Dimension(format!(
                "gather: {} indices for a {rows}x{cols} output",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(NccError::Dimension(format!(
                "gather: index {bad} out of range for {} values",
                x.len()
            )));
        }
        let data = index.iter().map(|&i| x.data[i]).collect();
        Ok(self.unary(
            Tensor { shape: [rows, cols], data },
            Op::Gather { input: self.id, index },
        ))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rows() != b.rows() {
            return Err(NccError::Dimension(format!(
                "concat_cols: {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let cols = a.cols() + b.cols();
        let mut data = Vec::with_capacity(a.rows() * cols);
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(self.binary(
            other,
            Tensor { shape: [a.rows(), cols], data },
            Op::ConcatCols(self.id, other.id),
        ))
    }

    /// Replaces masked elements with `value`; they pass no gradient back.
    pub fn fill(&self, mask: Vec<bool>, value: f64) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.len() {
            return Err(NccError::Dimension(format!(
                "fill: mask of {} for {} values",
                mask.len(),
                x.len()
            )));
        }
        let mut v = (*x).clone();
        for (e, &m) in v.data.iter_mut().zip(&mask) {
            if m {
                *e = value;
            }
        }
        Ok(self.unary(v, Op::Fill { input: self.id, mask }))
    }

    /// Mean over rows of the squared row distance `‖aᵢ − bᵢ‖²`.
    pub fn mse_rowwise(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mse_rowwise", &a, &b)?;
        if a.rows() == 0 {
            return Err(NccError::Dimension("mse_rowwise over zero rows".into()));
        }
        let total: f64 = a
            .iter_rows()
            .zip(b.iter_rows())
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum();
        let v = Tensor::scalar(total / a.rows() as f64);
        Ok(self.binary(other, v, Op::MseRows(self.id, other.id)))
    }

    /// Copies the value into a constant node (stop-gradient).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

/// Checks the gradient of a scalar function of several inputs against
/// central differences. Returns the max over all input components of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape() != [1, 1] {
        return Err(NccError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let x0 = input.data[e];
            probe[k].data[e] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data[e] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}
