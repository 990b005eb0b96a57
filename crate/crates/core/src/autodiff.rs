//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs were created earlier, so the
//! creation order is already a topological order and `backward` is a single
//! reverse sweep. Leaves are either parameters (`param`, gradient tracked) or
//! constants (`constant`, never differentiated). Anything that must stay off
//! the gradient path, such as teacher-encoder outputs, enters as a constant.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
        }
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows with a smaller Euclidean norm are rejected by `l2_normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    BroadcastRows(Var),
    SoftmaxLast(Var),
    LogSumExpLast(Var),
    L2NormalizeRows(Var),
    Dot(Var, Var),
    Sum(Var),
    SumLast(Var),
    Mean(Var),
    Reshape(Var),
    GatherLast(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // per-row norms for L2NormalizeRows
    aux: Vec<f64>,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, as returned by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when no path connects it to the loss.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).unwrap())
    }

    /// Gradient of `var`, zero-filled when disconnected.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&n, lead)) => (lead.iter().product(), n),
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// g[m,n] . b[k,n]^T -> [m,k]
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[m,k]^T . g[m,n] -> [k,n]
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_kernel(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn logsumexp_slice(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
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

    /// Number of gradient-tracked leaves on the tape.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
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
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_kernel(self.value(x).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Hadamard(a, b), rg))
    }

    /// `a[.., n] + row[n]`, broadcasting `row` over the leading axes.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = split_last(ta.shape());
        if tr.rank() != 1 || tr.numel() != n || ta.rank() == 0 {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(n.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if kind == Unary::Log {
            if let Some((i, v)) = tx.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("entry {i} is {v}, log needs positive input"),
                });
            }
        }
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Unary(kind, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).unwrap()
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).unwrap()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).unwrap()
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).unwrap()
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", sa, sb));
        }
        let (outer, p) = split_last(sa);
        let (_, q) = split_last(sb);
        let mut data = Vec::with_capacity(outer * (p + q));
        for i in 0..outer {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ConcatLast(a, b), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n) = split_last(tx.shape());
        if tx.rank() == 0 || start + len > n {
            return Err(Error::dim("slice_last", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(outer * len);
        for i in 0..outer {
            data.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceLast { x, start }, rg))
    }

    /// Stacks rank-1 `[n]` or rank-2 `[k, n]` inputs along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let n = self.value(*first).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.rank() > 2 || t.last_dim() != n {
                return Err(Error::dim("concat_rows", &[rows, n], t.shape()));
            }
            rows += if t.rank() == 1 { 1 } else { t.shape()[0] };
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row `i` of a rank-2 tensor, as a rank-1 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || i >= tx.shape()[0] {
            return Err(Error::Index(format!("row {i} of shape {:?}", tx.shape())));
        }
        let t = Tensor::vector(tx.row(i).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Row(x, i), rg))
    }

    /// Repeats a rank-1 `[n]` tensor into `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let tv = self.value(v);
        if tv.rank() != 1 {
            return Err(Error::dim("broadcast_rows", tv.shape(), &[rows]));
        }
        let n = tv.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(tv.data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(&[v]);
        Ok(self.push(t, Op::BroadcastRows(v), rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n) = split_last(tx.shape());
        if tx.rank() == 0 || n == 0 {
            return Err(Error::dim("softmax_last", tx.shape(), &[1]));
        }
        let mut data = vec![0.0; tx.numel()];
        for i in 0..outer {
            softmax_slice(&tx.data()[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SoftmaxLast(x), rg))
    }

    /// `log(sum(exp(x)))` over the last axis, with max-subtraction.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n) = split_last(tx.shape());
        if tx.rank() == 0 || n == 0 {
            return Err(Error::dim("logsumexp_last", tx.shape(), &[1]));
        }
        let data = (0..outer)
            .map(|i| logsumexp_slice(&tx.data()[i * n..(i + 1) * n]))
            .collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSumExpLast(x), rg))
    }

    /// Divides every last-axis slice by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n) = split_last(tx.shape());
        if tx.rank() == 0 {
            return Err(Error::dim("l2_normalize_rows", tx.shape(), &[1]));
        }
        let mut norms = Vec::with_capacity(outer);
        let mut data = tx.data().to_vec();
        for i in 0..outer {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= NORM_EPS) {
                return Err(Error::DegenerateEmbedding {
                    row: i,
                    norm,
                    eps: NORM_EPS,
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push_aux(t, Op::L2NormalizeRows(x), rg, norms))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(Error::dim("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (outer, n) = split_last(tx.shape());
        if tx.rank() == 0 {
            return Err(Error::dim("sum_last", tx.shape(), &[1]));
        }
        let data = (0..outer)
            .map(|i| tx.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let t = Tensor::new(tx.shape()[..tx.rank() - 1].to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumLast(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[i] = x[i, index[i]]` for `x` of shape `[B, C]`.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] != index.len() {
            return Err(Error::dim("gather_last", tx.shape(), &[index.len()]));
        }
        let c = tx.shape()[1];
        let mut data = Vec::with_capacity(index.len());
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(Error::Index(format!("label {j} with {c} classes")));
            }
            data.push(tx.data()[i * c + j]);
        }
        let t = Tensor::vector(data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherLast(x, index.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let da = matmul_bt_kernel(g, val(*b).data(), m, k, n);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_at_kernel(val(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let s = val(*x).shape();
                // g has shape [c, r]
                let dx = transpose_kernel(g, s[1], s[0]);
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.to_vec());
                let n = val(*row).numel();
                self.accumulate_with(grads, *row, |buf| {
                    for chunk in g.chunks_exact(n.max(1)) {
                        for (b, &v) in buf.iter_mut().zip(chunk) {
                            *b += v;
                        }
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * f).collect());
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Unary(kind, x) => {
                let (xs, ys) = (val(*x).data(), node.value.data());
                let dx: Vec<f64> = match kind {
                    Unary::Sigmoid => g
                        .iter()
                        .zip(ys)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                    Unary::Tanh => g.iter().zip(ys).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xs)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Exp => g.iter().zip(ys).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatLast(a, b) => {
                let (outer, p) = split_last(val(*a).shape());
                let (_, q) = split_last(val(*b).shape());
                let w = p + q;
                let mut da = Vec::with_capacity(outer * p);
                let mut db = Vec::with_capacity(outer * q);
                for i in 0..outer {
                    da.extend_from_slice(&g[i * w..i * w + p]);
                    db.extend_from_slice(&g[i * w + p..(i + 1) * w]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SliceLast { x, start } => {
                let (outer, n) = split_last(val(*x).shape());
                let len = node.value.last_dim();
                self.accumulate_with(grads, *x, |buf| {
                    for i in 0..outer {
                        for j in 0..len {
                            buf[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).numel();
                    self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Row(x, i) => {
                let n = g.len();
                self.accumulate_with(grads, *x, |buf| {
                    for (b, &v) in buf[i * n..(i + 1) * n].iter_mut().zip(g) {
                        *b += v;
                    }
                });
            }
            Op::BroadcastRows(v) => {
                let n = val(*v).numel();
                self.accumulate_with(grads, *v, |buf| {
                    for chunk in g.chunks_exact(n.max(1)) {
                        for (b, &c) in buf.iter_mut().zip(chunk) {
                            *b += c;
                        }
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let (outer, n) = split_last(node.value.shape());
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..outer {
                    let (ys, gs) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = ys[j] * (gs[j] - inner);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSumExpLast(x) => {
                let xs = val(*x).data();
                let (outer, n) = split_last(val(*x).shape());
                let out = node.value.data();
                let mut dx = vec![0.0; xs.len()];
                for i in 0..outer {
                    for j in 0..n {
                        dx[i * n + j] = g[i] * (xs[i * n + j] - out[i]).exp();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows(x) => {
                let (outer, n) = split_last(node.value.shape());
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..outer {
                    let (ys, gs) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    let norm = node.aux[i];
                    for j in 0..n {
                        dx[i * n + j] = (gs[j] - ys[j] * inner) / norm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dot(a, b) => {
                let s = g[0];
                let (ta, tb) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, tb.iter().map(|v| v * s).collect());
                self.accumulate(grads, *b, ta.iter().map(|v| v * s).collect());
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumLast(x) => {
                let (_, n) = split_last(val(*x).shape());
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::GatherLast(x, index) => {
                let c = val(*x).shape()[1];
                self.accumulate_with(grads, *x, |buf| {
                    for (i, &j) in index.iter().enumerate() {
                        buf[i * c + j] += g[i];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Compares tape gradients of `build` against central differences for
    /// every input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            let numeric = central_difference(&inputs[k], 1e-5, |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.param(if j == k { probe.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut t, &vs).unwrap();
                t.value(l).item()
            });
            worst = worst.max(max_rel_err(analytic.data(), numeric.data()));
        }
        worst
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = t.constant(Tensor::zeros(&[2, 1]));
        let p = t.matmul(i2, z).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let err = check(vec![a, b], |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn unary_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 1.0, -2.0, 3.0]));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        let th = t.tanh(x);
        assert!((t.value(th).data()[1] - 0.761594).abs() < 1e-6);
        let r = t.relu(x);
        assert_eq!(&t.value(r).data()[2..], &[0.0, 3.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [Unary::Sigmoid, Unary::Tanh, Unary::Relu, Unary::Exp] {
            let x = rand_tensor(&mut rng, &[6]);
            let err = check(vec![x], |t, v| {
                let y = t.unary(kind, v[0])?;
                let w = t.hadamard(y, y)?;
                Ok(t.sum(w))
            });
            assert!(err <= 1e-6, "{kind:?}: {err}");
        }
        let x = Tensor::vector((0..6).map(|i| 0.5 + i as f64 * 0.3).collect());
        let err = check(vec![x], |t, v| {
            let y = t.log(v[0])?;
            let w = t.hadamard(y, y)?;
            Ok(t.sum(w))
        });
        assert!(err <= 1e-6, "log: {err}");
    }

    #[test]
    fn hadamard_examples_and_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let h = t.hadamard(a, b).unwrap();
        assert_eq!(t.value(h).data(), &[3.0, 8.0]);
        let ones = t.constant(Tensor::full(&[2], 1.0));
        let h = t.hadamard(a, ones).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 2.0]);
        let c = t.constant(Tensor::zeros(&[3]));
        assert!(t.hadamard(a, c).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[8]);
        let y = rand_tensor(&mut rng, &[8]);
        let err = check(vec![x, y], |t, v| {
            let h = t.hadamard(v[0], v[1])?;
            let e = t.tanh(h);
            Ok(t.sum(e))
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn concat_examples_and_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0]));
        let c = t.concat_last(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let empty = t.constant(Tensor::zeros(&[0]));
        let c = t.concat_last(a, empty).unwrap();
        assert_eq!(t.value(c), t.value(a));
        let m = t.constant(Tensor::zeros(&[3, 2]));
        let n = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.concat_last(m, n).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let y = rand_tensor(&mut rng, &[2, 2]);
        let w = rand_tensor(&mut rng, &[2, 5]);
        let err = check(vec![x, y], move |t, v| {
            let c = t.concat_last(v[0], v[1])?;
            let wc = t.constant(w.clone());
            let h = t.hadamard(c, wc)?;
            let s = t.sigmoid(h);
            Ok(t.sum(s))
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax_last(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = t.softmax_last(x).unwrap();
        assert!((t.value(s).data()[0] - 0.731059).abs() < 1e-6);
        assert!((t.value(s).data()[1] - 0.268941).abs() < 1e-6);
        let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = t.softmax_last(x).unwrap();
        assert!((t.value(s).data()[0] - 1.0).abs() <= 1e-12);
        assert!(t.value(s).data()[1].abs() <= 1e-12);
        assert!(t.value(s).is_finite());
    }

    #[test]
    fn softmax_and_logsumexp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let err = check(vec![x.clone()], move |t, v| {
            let s = t.softmax_last(v[0])?;
            let wc = t.constant(w.clone());
            let h = t.hadamard(s, wc)?;
            Ok(t.sum(h))
        });
        assert!(err <= 1e-6, "softmax: {err}");
        let err = check(vec![x], |t, v| {
            let l = t.logsumexp_last(v[0])?;
            let sq = t.hadamard(l, l)?;
            Ok(t.sum(sq))
        });
        assert!(err <= 1e-6, "lse: {err}");
    }

    #[test]
    fn l2_normalize_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap());
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.6, 0.8, 0.0, 1.0]);
        let z = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            t.l2_normalize_rows(z),
            Err(Error::DegenerateEmbedding { row: 0, .. })
        ));
    }

    #[test]
    fn l2_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let err = check(vec![x], move |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            let wc = t.constant(w.clone());
            let h = t.hadamard(y, wc)?;
            Ok(t.sum(h))
        });
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn dot_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.value(d).item(), 0.0);
        let d = t.dot(a, a).unwrap();
        assert_eq!(t.value(d).item(), 1.0);
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.value(d).item(), 11.0);
        let c = t.constant(Tensor::vector(vec![1.0]));
        assert!(t.dot(a, c).is_err());
    }

    #[test]
    fn backward_linear_and_disconnected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 9.0]));
        let w = t.param(Tensor::vector(vec![7.0, 7.0]));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 5]);
        assert!(g.get(w).is_none());
        assert_eq!(g.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let d = t.dot(x, c).unwrap();
        let g = t.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
        assert_eq!(t.param_count(), 1);
    }

    #[test]
    fn backward_is_bitwise_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let a = t.param(rand_tensor(&mut rng, &[4, 5]));
            let b = t.param(rand_tensor(&mut rng, &[5, 3]));
            let p = t.matmul(a, b).unwrap();
            let s = t.softmax_last(p).unwrap();
            let l = t.logsumexp_last(s).unwrap();
            let l = t.sum(l);
            let g = t.backward(l).unwrap();
            let mut bits: Vec<u64> = g.wrt(a).data().iter().map(|v| v.to_bits()).collect();
            bits.extend(g.wrt(b).data().iter().map(|v| v.to_bits()));
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let v = rand_tensor(&mut rng, &[4]);
        let err = check(vec![x, v], |t, vs| {
            let b = t.broadcast_rows(vs[1], 3)?;
            let s = t.add(vs[0], b)?;
            let s = t.add_row(s, vs[1])?;
            let r1 = t.row(s, 1)?;
            let sl = t.slice_last(s, 1, 2)?;
            let tr = t.transpose(sl)?;
            let flat = t.reshape(tr, &[6])?;
            let e = t.exp(flat);
            let q = t.scale(r1, -0.5);
            let q = t.add_scalar(q, 0.3);
            let stacked = t.concat_rows(&[q, r1])?;
            let g = t.gather_last(stacked, &[0, 3])?;
            let sl2 = t.sum_last(stacked)?;
            let m = t.mean(e)?;
            let parts = [t.sum(g), t.sum(sl2), m];
            let mut acc = parts[0];
            for p in &parts[1..] {
                let hp = t.hadamard(*p, *p)?;
                acc = t.sub(acc, hp)?;
            }
            Ok(acc)
        });
        assert!(err <= 1e-6, "{err}");
    }
}
