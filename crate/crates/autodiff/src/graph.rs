//! Tape of recorded operations and reverse-mode gradient propagation.
//!
//! Every operation appends one node whose inputs were appended before it, so
//! node order is a topological order and backward is a single reverse sweep.
//! A graph lives for one forward pass and is dropped after backward.

use std::cell::RefCell;

use crate::kernels;
use crate::{AutodiffError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    CausalConv {
        x: Var,
        kernel: Var,
        dilation: usize,
        batch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`, or `None` when no path led to it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, materialising zeros when it was unreachable.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Adds an input tensor to the tape.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf initialised from `value`.
    pub fn param(&self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf, cutting the
    /// gradient path through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.with_value(v, |t| {
            if t.is_scalar() {
                Ok(t.data()[0])
            } else {
                Err(AutodiffError::NotScalar(t.shape().to_vec()))
            }
        })
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(op, ta, tb)?;
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, record, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`C` vector to every row of a `[R, C]` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let cols = ta.cols();
            if tb.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_row",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                });
            }
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(cols) {
                for (x, &b) in row.iter_mut().zip(tb.data()) {
                    *x += b;
                }
            }
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let rg = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.with_value(a, |t| t.map(|x| scale * x + shift));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Affine(a, scale), rg))
    }

    pub fn scale(&self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = matrix("matmul", ta)?;
            let (k2, n) = matrix("matmul", tb)?;
            if k != k2 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    left: ta.shape().to_vec(),
                    right: tb.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument("empty concat".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut total = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rows() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        left: nodes[parts[0].0].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with_value(a, |t| {
            let (rows, cols) = (t.rows(), t.cols());
            if len == 0 || start + len > cols {
                return Err(AutodiffError::InvalidArgument(format!(
                    "column slice {start}..{} out of {cols}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::new(vec![rows, len], data)
        })?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument("empty concat".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_rows",
                        left: nodes[parts[0].0].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with_value(a, |t| {
            let (rows, cols) = (t.rows(), t.cols());
            if len == 0 || start + len > rows {
                return Err(AutodiffError::InvalidArgument(format!(
                    "row slice {start}..{} out of {rows}",
                    start + len
                )));
            }
            Tensor::new(
                vec![len, cols],
                t.data()[start * cols..(start + len) * cols].to_vec(),
            )
        })?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = self.with_value(a, |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        });
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Sums each row of a `[R, C]` matrix into `[R, 1]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let value = self.with_value(a, |t| {
            let data = t
                .data()
                .chunks(t.cols())
                .map(|r| r.iter().sum())
                .collect();
            Tensor::new(vec![t.rows(), 1], data)
        })?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::RowSum(a), rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.with_value(a, |t| t.map(f));
        let rg = self.needs(&[a]);
        Ok(self.push(value, op, rg))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// ELU with unit scale.
    pub fn elu(&self, a: Var) -> Result<Var> {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    fn softmax_impl(&self, a: Var, log: bool) -> Result<Var> {
        let value = self.with_value(a, |t| {
            if !t.is_finite() {
                return Err(AutodiffError::NonFinite("softmax"));
            }
            let cols = t.shape()[t.shape().len() - 1];
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(cols) {
                kernels::softmax_row(row, log);
            }
            Tensor::new(t.shape().to_vec(), data)
        })?;
        let rg = self.needs(&[a]);
        let op = if log {
            Op::LogSoftmax(a)
        } else {
            Op::Softmax(a)
        };
        Ok(self.push(value, op, rg))
    }

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with_value(table, |t| {
            let (rows, cols) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![indices.len(), cols], data)
        })?;
        let rg = self.needs(&[table]);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Dilated causal convolution over a batch of sequences.
    ///
    /// `x` is `[T * batch, C_in]` in time-major row order (row `t * batch + b`),
    /// `kernel` is `[k, C_in, C_out]`; tap `k - 1` reads the current step and tap
    /// `j` reads `(k - 1 - j) * dilation` steps back, with zeros before the start.
    pub fn causal_conv(&self, x: Var, kernel: Var, dilation: usize, batch: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(AutodiffError::InvalidArgument(
                "dilation must be at least 1".into(),
            ));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (rows, cin) = matrix("causal_conv", tx)?;
            if tk.shape().len() != 3 || tk.shape()[1] != cin || batch == 0 || rows % batch != 0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "causal_conv",
                    left: tx.shape().to_vec(),
                    right: tk.shape().to_vec(),
                });
            }
            let (k, cout) = (tk.shape()[0], tk.shape()[2]);
            let mut out = vec![0.0; rows * cout];
            for j in 0..k {
                let shift = (k - 1 - j) * dilation * batch;
                if shift >= rows {
                    continue;
                }
                let w = &tk.data()[j * cin * cout..(j + 1) * cin * cout];
                kernels::matmul_acc(
                    &tx.data()[..(rows - shift) * cin],
                    w,
                    &mut out[shift * cout..],
                    rows - shift,
                    cin,
                    cout,
                );
            }
            Tensor::new(vec![rows, cout], out)?
        };
        let rg = self.needs(&[x, kernel]);
        Ok(self.push(
            value,
            Op::CausalConv {
                x,
                kernel,
                dilation,
                batch,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            {
                let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
                    if !nodes[v.0].requires_grad {
                        return;
                    }
                    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                    contrib(slot);
                };
                let val = |v: Var| &nodes[v.0].value;
                match &node.op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        acc(*a, &|s| kernels::axpy(s, &g, 1.0));
                        acc(*b, &|s| kernels::axpy(s, &g, 1.0));
                    }
                    Op::Sub(a, b) => {
                        acc(*a, &|s| kernels::axpy(s, &g, 1.0));
                        acc(*b, &|s| kernels::axpy(s, &g, -1.0));
                    }
                    Op::Mul(a, b) => {
                        let (va, vb) = (val(*a).data(), val(*b).data());
                        acc(*a, &|s| {
                            for ((s, &gi), &y) in s.iter_mut().zip(&g).zip(vb) {
                                *s += gi * y;
                            }
                        });
                        acc(*b, &|s| {
                            for ((s, &gi), &x) in s.iter_mut().zip(&g).zip(va) {
                                *s += gi * x;
                            }
                        });
                    }
                    Op::AddRow(a, bias) => {
                        acc(*a, &|s| kernels::axpy(s, &g, 1.0));
                        let cols = out.cols();
                        acc(*bias, &|s| {
                            for row in g.chunks(cols) {
                                kernels::axpy(s, row, 1.0);
                            }
                        });
                    }
                    Op::Affine(a, scale) => acc(*a, &|s| kernels::axpy(s, &g, *scale)),
                    Op::MatMul(a, b) => {
                        let (ta, tb) = (val(*a), val(*b));
                        let (m, k) = (ta.shape()[0], ta.shape()[1]);
                        let n = tb.shape()[1];
                        acc(*a, &|s| kernels::matmul_bt_acc(&g, tb.data(), s, m, n, k));
                        acc(*b, &|s| kernels::matmul_at_acc(ta.data(), &g, s, m, k, n));
                    }
                    Op::ConcatCols(parts) => {
                        let (rows, total) = (out.rows(), out.cols());
                        let mut offset = 0;
                        for p in parts {
                            let w = val(*p).cols();
                            acc(*p, &|s| {
                                for r in 0..rows {
                                    let src = &g[r * total + offset..r * total + offset + w];
                                    kernels::axpy(&mut s[r * w..(r + 1) * w], src, 1.0);
                                }
                            });
                            offset += w;
                        }
                    }
                    Op::SliceCols(a, start) => {
                        let (rows, w) = (out.rows(), out.cols());
                        let cols = val(*a).cols();
                        acc(*a, &|s| {
                            for r in 0..rows {
                                let dst = &mut s[r * cols + start..r * cols + start + w];
                                kernels::axpy(dst, &g[r * w..(r + 1) * w], 1.0);
                            }
                        });
                    }
                    Op::ConcatRows(parts) => {
                        let mut offset = 0;
                        for p in parts {
                            let n = val(*p).len();
                            acc(*p, &|s| kernels::axpy(s, &g[offset..offset + n], 1.0));
                            offset += n;
                        }
                    }
                    Op::SliceRows(a, start) => {
                        let cols = out.cols();
                        acc(*a, &|s| {
                            kernels::axpy(&mut s[start * cols..start * cols + g.len()], &g, 1.0)
                        });
                    }
                    Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
                    Op::Mean(a) => {
                        let scale = g[0] / val(*a).len() as f64;
                        acc(*a, &|s| s.iter_mut().for_each(|x| *x += scale));
                    }
                    Op::RowSum(a) => {
                        let cols = val(*a).cols();
                        acc(*a, &|s| {
                            for (row, &gi) in s.chunks_mut(cols).zip(&g) {
                                row.iter_mut().for_each(|x| *x += gi);
                            }
                        });
                    }
                    Op::Sigmoid(a) => acc(*a, &|s| {
                        for ((s, &gi), &y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += gi * y * (1.0 - y);
                        }
                    }),
                    Op::Tanh(a) => acc(*a, &|s| {
                        for ((s, &gi), &y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += gi * (1.0 - y * y);
                        }
                    }),
                    Op::Elu(a) => {
                        let x = val(*a).data();
                        acc(*a, &|s| {
                            for (((s, &gi), &y), &xi) in s.iter_mut().zip(&g).zip(out.data()).zip(x)
                            {
                                *s += if xi > 0.0 { gi } else { gi * (y + 1.0) };
                            }
                        });
                    }
                    Op::Log(a) => {
                        let x = val(*a).data();
                        acc(*a, &|s| {
                            for ((s, &gi), &xi) in s.iter_mut().zip(&g).zip(x) {
                                *s += gi / xi;
                            }
                        });
                    }
                    Op::Exp(a) => acc(*a, &|s| {
                        for ((s, &gi), &y) in s.iter_mut().zip(&g).zip(out.data()) {
                            *s += gi * y;
                        }
                    }),
                    Op::Square(a) => {
                        let x = val(*a).data();
                        acc(*a, &|s| {
                            for ((s, &gi), &xi) in s.iter_mut().zip(&g).zip(x) {
                                *s += 2.0 * gi * xi;
                            }
                        });
                    }
                    Op::Softmax(a) => {
                        let cols = out.shape()[out.shape().len() - 1];
                        acc(*a, &|s| {
                            for ((s, gr), yr) in s
                                .chunks_mut(cols)
                                .zip(g.chunks(cols))
                                .zip(out.data().chunks(cols))
                            {
                                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for ((s, &gi), &y) in s.iter_mut().zip(gr).zip(yr) {
                                    *s += y * (gi - dot);
                                }
                            }
                        });
                    }
                    Op::LogSoftmax(a) => {
                        let cols = out.shape()[out.shape().len() - 1];
                        acc(*a, &|s| {
                            for ((s, gr), yr) in s
                                .chunks_mut(cols)
                                .zip(g.chunks(cols))
                                .zip(out.data().chunks(cols))
                            {
                                let total: f64 = gr.iter().sum();
                                for ((s, &gi), &y) in s.iter_mut().zip(gr).zip(yr) {
                                    *s += gi - y.exp() * total;
                                }
                            }
                        });
                    }
                    Op::Gather(table, indices) => {
                        let cols = out.cols();
                        acc(*table, &|s| {
                            for (i, &row) in indices.iter().enumerate() {
                                kernels::axpy(
                                    &mut s[row * cols..(row + 1) * cols],
                                    &g[i * cols..(i + 1) * cols],
                                    1.0,
                                );
                            }
                        });
                    }
                    Op::CausalConv {
                        x,
                        kernel,
                        dilation,
                        batch,
                    } => {
                        let (tx, tk) = (val(*x), val(*kernel));
                        let (rows, cin) = (tx.shape()[0], tx.shape()[1]);
                        let (k, cout) = (tk.shape()[0], tk.shape()[2]);
                        let taps = |j: usize| (k - 1 - j) * dilation * batch;
                        acc(*x, &|s| {
                            for j in 0..k {
                                let shift = taps(j);
                                if shift >= rows {
                                    continue;
                                }
                                let w = &tk.data()[j * cin * cout..(j + 1) * cin * cout];
                                kernels::matmul_bt_acc(
                                    &g[shift * cout..],
                                    w,
                                    &mut s[..(rows - shift) * cin],
                                    rows - shift,
                                    cout,
                                    cin,
                                );
                            }
                        });
                        acc(*kernel, &|s| {
                            for j in 0..k {
                                let shift = taps(j);
                                if shift >= rows {
                                    continue;
                                }
                                kernels::matmul_at_acc(
                                    &tx.data()[..(rows - shift) * cin],
                                    &g[shift * cout..],
                                    &mut s[j * cin * cout..(j + 1) * cin * cout],
                                    rows - shift,
                                    cin,
                                    cout,
                                );
                            }
                        });
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        for (input, want) in [
            (vec![0.0, 0.0], [0.5, 0.5]),
            (vec![1000.0, 1000.0], [0.5, 0.5]),
            (vec![1f64.ln(), 3f64.ln()], [0.25, 0.75]),
        ] {
            let x = g.constant(Tensor::new(vec![1, 2], input).unwrap());
            let y = g.value(g.softmax(x).unwrap());
            assert!(close(y.data()[0], want[0], 1e-12), "{:?}", y.data());
            assert!(close(y.data()[1], want[1], 1e-12));
        }
        let bad = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(bad), Err(AutodiffError::NonFinite(_))));
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let loss = g.square(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        let s = g.sigmoid(x).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn reused_input_accumulates() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(d, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let g = Graph::new();
        let x = Tensor::new(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
        let kernel = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for dilation in [1, 2, 7] {
            let xv = g.constant(x.clone());
            let kv = g.constant(kernel.clone());
            let y = g.causal_conv(xv, kv, dilation, 1).unwrap();
            assert_eq!(g.value(y), x);
        }
        let xv = g.constant(x);
        let kv = g.constant(kernel);
        assert!(g.causal_conv(xv, kv, 0, 1).is_err());
    }

    #[test]
    fn conv_is_causal() {
        let kernel = Tensor::new(vec![3, 1, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let base: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |data: Vec<f64>| {
            let g = Graph::new();
            let x = g.constant(Tensor::new(vec![8, 1], data).unwrap());
            let k = g.constant(kernel.clone());
            g.value(g.causal_conv(x, k, 2, 1).unwrap()).into_data()
        };
        let reference = run(base.clone());
        let mut bumped = base;
        bumped[5] += 10.0;
        let changed = run(bumped);
        assert_eq!(&reference[..5], &changed[..5]);
        assert_ne!(reference[5], changed[5]);
    }
}
