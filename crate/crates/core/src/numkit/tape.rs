//! Define-by-run reverse-mode differentiation.
//!
//! Every operation applied through a [`Tape`] appends a node holding its
//! output value. Parameters are read from a borrowed [`ParamStore`], so the
//! store cannot change while a tape is alive; gradients come back as an owned
//! [`Grads`] that the caller folds into the store afterwards.

use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    SelectRows { src: usize, rows: Vec<usize> },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum { src: usize, axis: usize },
    Mean { src: usize, axis: usize },
    SumAll(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SqNorm(usize),
    Dot(usize, usize),
    Cosine(usize, usize),
    LayerNorm { src: usize, gain: usize, bias: usize },
    NeighborSum { src: usize, adj: Vec<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Concat(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::SqNorm(_) => "sq_norm",
            Op::Dot(..) => "dot",
            Op::Cosine(..) => "cosine",
            Op::LayerNorm { .. } => "layer_norm",
            Op::NeighborSum { .. } => "neighbor_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation over `f64` tensors.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    checked: bool,
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only leaves are available.
    pub fn new() -> Self {
        Tape { store: None, nodes: Vec::new(), checked: true }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape { store: Some(store), nodes: Vec::new(), checked: true }
    }

    /// Toggles the non-finite check performed on every op output.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn store(&self) -> Result<&'p ParamStore> {
        self.store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::Numeric(op.name().to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            Op::Param(id) | Op::Gather { param: id, .. } => self.store()?.get(*id).requires_grad,
            _ => self.inputs(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        let mut value = value;
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => vec![],
            Op::SelectRows { src, .. }
            | Op::Transpose(src)
            | Op::Reshape(src)
            | Op::Scale(src, _)
            | Op::SliceCols(src, _)
            | Op::SliceRows(src, _)
            | Op::Sum { src, .. }
            | Op::Mean { src, .. }
            | Op::SumAll(src)
            | Op::Sigmoid(src)
            | Op::Tanh(src)
            | Op::Relu(src)
            | Op::Exp(src)
            | Op::Log(src)
            | Op::Softmax(src)
            | Op::LogSoftmax(src)
            | Op::SqNorm(src)
            | Op::NeighborSum { src, .. } => vec![*src],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScaleBy(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Concat(v) | Op::ConcatRows(v) => v.clone(),
            Op::LayerNorm { src, gain, bias } => vec![*src, *gain, *bias],
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Records `t` as a leaf. It is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Shape of a parameter without recording it.
    pub fn param_shape(&self, id: ParamId) -> Result<&'p [usize]> {
        Ok(self.store()?.get(id).shape())
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let value = self.store()?.get(id).clone();
        self.push(Op::Param(id), value)
    }

    /// Embedding lookup: selects `rows` of a rank-2 parameter table.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.store()?.get(id);
        if table.rank() != 2 {
            return Err(Error::shape("gather", "table must be rank 2"));
        }
        let value = select(table, rows, "gather")?;
        self.push(Op::Gather { param: id, rows: rows.to_vec() }, value)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.rank() != 2 {
            return Err(Error::shape("select_rows", "input must be rank 2"));
        }
        let value = select(src, rows, "select_rows")?;
        self.push(Op::SelectRows { src: a.0, rows: rows.to_vec() }, value)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", x.shape(), y.shape()),
            ));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(x.data(), y.data(), &mut out, n, k, m);
        self.push(Op::MatMul(a.0, b.0), Tensor::new(vec![n, m], out)?)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(a.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("transpose", "input must be rank 2"));
        }
        let value = transpose(x);
        self.push(Op::Transpose(a.0), value)
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        let data = x.data().iter().map(|v| f(*v)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push(Op::Mul(a.0, b.0), v)
    }

    /// Adds a length-`d` row to every row of `a` (`[n, d]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let d = x.last_dim();
        if x.rank() == 0 || r.len() != d {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, v) in chunk.iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        self.push(Op::AddRow(a.0, row.0), out)
    }

    /// Scales row `i` of `a` (`[n, d]`) by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if x.rank() == 0 || c.len() != x.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", x.shape(), c.shape()),
            ));
        }
        let d = x.last_dim();
        let mut out = x.clone();
        for (chunk, s) in out.data_mut().chunks_mut(d).zip(c.data()) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        self.push(Op::MulCol(a.0, col.0), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.map(a, |x| x * s);
        self.push(Op::Scale(a.0, s), v)
    }

    /// Multiplies `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale must hold one value"));
        }
        let k = self.item(s);
        let v = self.map(a, |x| x * k);
        self.push(Op::ScaleBy(a.0, s.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::ln);
        self.push(Op::Log(a.0), v)
    }

    // ---- structural ---------------------------------------------------

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len().saturating_sub(1)];
        let lead = lead.to_vec();
        let rows = self.value(*first).rows();
        let mut width = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rank() == 0 || t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {:?} vs {:?}", lead, t.shape()),
                ));
            }
            width += t.last_dim();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let v = Tensor::new(shape, out)?;
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Stacks rank-2 inputs of equal width along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let width = self.value(*first).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.last_dim() != width {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {:?}", width, t.shape()),
                ));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, width], out)?;
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start > end || end > x.shape()[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("{:?}[.., {start}..{end}]", x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let v = Tensor::new(vec![x.rows(), end - start], out)?;
        self.push(Op::SliceCols(a.0, start), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start > end || end > x.shape()[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("{:?}[{start}..{end}]", x.shape()),
            ));
        }
        let w = x.shape()[1];
        let v = Tensor::new(vec![end - start, w], x.data()[start * w..end * w].to_vec())?;
        self.push(Op::SliceRows(a.0, start), v)
    }

    // ---- reductions ---------------------------------------------------

    fn axis_reduce(&self, op: &'static str, a: Var, axis: usize) -> Result<(Tensor, usize)> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape(op, format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, n))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (v, _) = self.axis_reduce("sum", a, axis)?;
        self.push(Op::Sum { src: a.0, axis }, v)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut v, n) = self.axis_reduce("mean", a, axis)?;
        if n == 0 {
            return Err(Error::shape("mean", "empty axis"));
        }
        v.data_mut().iter_mut().for_each(|x| *x /= n as f64);
        self.push(Op::Mean { src: a.0, axis }, v)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a.0), Tensor::scalar(s))
    }

    fn last_axis_map(&self, a: Var, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let x = self.value(a);
        let d = x.last_dim();
        let data: Vec<f64> = x.data().chunks(d).map(f).collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        Tensor::new(shape, data).expect("reduced shape")
    }

    /// Squared L2 norm along the last axis.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.last_axis_map(a, |r| r.iter().map(|x| x * x).sum());
        self.push(Op::SqNorm(a.0), v)
    }

    /// Inner product along the last axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let d = x.last_dim();
        let data = x
            .data()
            .chunks(d)
            .zip(y.data().chunks(d))
            .map(|(p, q)| dot(p, q))
            .collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let v = Tensor::new(shape, data)?;
        self.push(Op::Dot(a.0, b.0), v)
    }

    /// Cosine similarity along the last axis.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let d = x.last_dim();
        let data = x
            .data()
            .chunks(d)
            .zip(y.data().chunks(d))
            .map(|(p, q)| dot(p, q) / (norm(p).max(NORM_FLOOR) * norm(q).max(NORM_FLOOR)))
            .collect();
        let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
        let v = Tensor::new(shape, data)?;
        self.push(Op::Cosine(a.0, b.0), v)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(Op::Softmax(a.0), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        let d = v.last_dim();
        for row in v.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Op::LogSoftmax(a.0), v)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", "gain/bias width mismatch"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let (mu, rstd) = moments(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rstd * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { src: a.0, gain: gain.0, bias: bias.0 }, out)
    }

    /// Row `i` of the output is the sum of rows `adj[i]` of `a`.
    pub fn neighbor_sum(&mut self, a: Var, adj: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("neighbor_sum", "input must be rank 2"));
        }
        let d = x.last_dim();
        let mut out = vec![0.0; adj.len() * d];
        for (i, nbrs) in adj.iter().enumerate() {
            for &j in nbrs {
                if j >= x.rows() {
                    return Err(Error::shape("neighbor_sum", format!("row {j} out of range")));
                }
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(x.row(j)) {
                    *o += v;
                }
            }
        }
        let v = Tensor::new(vec![adj.len(), d], out)?;
        self.push(Op::NeighborSum { src: a.0, adj }, v)
    }

    // ---- backward -----------------------------------------------------

    fn check_scalar(&self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.check_scalar(loss)?;
        let adj = self.adjoints(loss, 0);
        let store = self.store;
        let mut grads = Grads::with_len(store.map_or(0, ParamStore::len));
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Some(g) = &adj[i] else { continue };
            match &node.op {
                Op::Param(id) => {
                    let buf = grads.buf(*id, g.len());
                    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
                }
                Op::Gather { param, rows } => {
                    let table = store.expect("gather implies store").get(*param);
                    let d = table.last_dim();
                    let buf = grads.buf(*param, table.len());
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += g[k * d + j];
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to arbitrary nodes on this tape.
    ///
    /// Nodes that do not influence `loss` get a zero gradient.
    pub fn grad_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check_scalar(loss)?;
        let stop = wrt.iter().map(|v| v.0).min().unwrap_or(loss.0);
        let adj = self.adjoints(loss, stop);
        wrt.iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                match adj.get(v.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::new(shape, g),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect()
    }

    fn adjoints(&self, loss: Var, stop: usize) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (stop..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        adj
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let wants = |k: usize| nodes[k].needs_grad;
        let mut acc = |k: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[k].needs_grad {
                let len = nodes[k].value.len();
                let buf = adj[k].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => {}
            Op::SelectRows { src, rows } => {
                let d = out.last_dim();
                acc(*src, &mut |buf| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += g[k * d + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (x, y) = (&nodes[*a].value, &nodes[*b].value);
                let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if wants(*a) {
                    acc(*a, &mut |buf| {
                        for r in 0..n {
                            for p in 0..k {
                                let yrow = &y.data()[p * m..(p + 1) * m];
                                buf[r * k + p] += dot(&g[r * m..(r + 1) * m], yrow);
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |buf| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for p in 0..k {
                                let xv = x.data()[r * k + p];
                                if xv == 0.0 {
                                    continue;
                                }
                                for (bv, gv) in buf[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *bv += xv * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                acc(*a, &mut |buf| {
                    for r in 0..n {
                        for c in 0..m {
                            buf[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * y[j];
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * x[j];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let d = out.last_dim();
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*r, &mut |buf| {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::MulCol(a, c) => {
                let d = out.last_dim();
                let (x, col) = (nodes[*a].value.data(), nodes[*c].value.data());
                acc(*a, &mut |buf| {
                    for (r, s) in col.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += g[r * d + j] * s;
                        }
                    }
                });
                acc(*c, &mut |buf| {
                    for r in 0..buf.len() {
                        buf[r] += dot(&g[r * d..(r + 1) * d], &x[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
            }),
            Op::ScaleBy(a, s) => {
                let k = nodes[*s].value.item();
                let x = nodes[*a].value.data();
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * k));
                acc(*s, &mut |buf| buf[0] += dot(g, x));
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let w = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pw = nodes[p].value.last_dim();
                    acc(p, &mut |buf| {
                        for r in 0..rows {
                            for j in 0..pw {
                                buf[r * pw + j] += g[r * w + offset + j];
                            }
                        }
                    });
                    offset += pw;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let w_out = out.last_dim();
                let w_in = nodes[*a].value.last_dim();
                acc(*a, &mut |buf| {
                    for r in 0..out.rows() {
                        for j in 0..w_out {
                            buf[r * w_in + start + j] += g[r * w_out + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let w = out.last_dim();
                acc(*a, &mut |buf| add_into(&mut buf[start * w..start * w + g.len()], g));
            }
            Op::Sum { src, axis } | Op::Mean { src, axis } => {
                let shape = nodes[*src].value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                acc(*src, &mut |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for i2 in 0..inner {
                                buf[base + i2] += g[o * inner + i2] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for (j, y) in out.data().iter().enumerate() {
                    buf[j] += g[j] * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for (j, y) in out.data().iter().enumerate() {
                    buf[j] += g[j] * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if x[j] > 0.0 {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |buf| {
                for (j, y) in out.data().iter().enumerate() {
                    buf[j] += g[j] * y;
                }
            }),
            Op::Log(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] / x[j];
                    }
                });
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                acc(*a, &mut |buf| {
                    for (r, y) in out.data().chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let s = dot(gr, y);
                        for j in 0..d {
                            buf[r * d + j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = out.last_dim();
                acc(*a, &mut |buf| {
                    for (r, y) in out.data().chunks(d).enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = gr.iter().sum();
                        for j in 0..d {
                            buf[r * d + j] += gr[j] - y[j].exp() * s;
                        }
                    }
                });
            }
            Op::SqNorm(a) => {
                let x = nodes[*a].value.data();
                let d = nodes[*a].value.last_dim();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += 2.0 * x[j] * g[j / d];
                    }
                });
            }
            Op::Dot(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                let d = nodes[*a].value.last_dim();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += y[j] * g[j / d];
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += x[j] * g[j / d];
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (x, y) = (nodes[*a].value.data(), nodes[*b].value.data());
                let d = nodes[*a].value.last_dim();
                let c = out.data();
                for (this, other) in [(*a, y), (*b, x)] {
                    let mine = nodes[this].value.data();
                    acc(this, &mut |buf| {
                        for r in 0..c.len() {
                            let p = &mine[r * d..(r + 1) * d];
                            let q = &other[r * d..(r + 1) * d];
                            let np = norm(p).max(NORM_FLOOR);
                            let nq = norm(q).max(NORM_FLOOR);
                            for j in 0..d {
                                buf[r * d + j] +=
                                    g[r] * (q[j] / (np * nq) - c[r] * p[j] / (np * np));
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { src, gain, bias } => {
                let x = nodes[*src].value.data();
                let d = out.last_dim();
                let gn = nodes[*gain].value.data();
                let rows = out.rows();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, rstd) = moments(xr);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * rstd).collect();
                    let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * gn[j]).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2 = dot(&dxhat, &xhat);
                    for j in 0..d {
                        dx[r * d + j] =
                            rstd / d as f64 * (d as f64 * dxhat[j] - s1 - xhat[j] * s2);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                acc(*src, &mut |buf| add_into(buf, &dx));
                acc(*gain, &mut |buf| add_into(buf, &dgain));
                acc(*bias, &mut |buf| add_into(buf, &dbias));
            }
            Op::NeighborSum { src, adj: nbrs } => {
                let d = out.last_dim();
                acc(*src, &mut |buf| {
                    for (r, list) in nbrs.iter().enumerate() {
                        for &j in list {
                            add_into(&mut buf[j * d..(j + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
}

fn moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn select(src: &Tensor, rows: &[usize], op: &'static str) -> Result<Tensor> {
    let d = src.last_dim();
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= src.rows() {
            return Err(Error::shape(op, format!("row {r} out of range {}", src.rows())));
        }
        out.extend_from_slice(src.row(r));
    }
    Tensor::new(vec![rows.len(), d], out)
}

fn transpose(x: &Tensor) -> Tensor {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            out[c * n + r] = x.data()[r * m + c];
        }
    }
    Tensor::new(vec![m, n], out).expect("transpose shape")
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}
