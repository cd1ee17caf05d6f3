//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its forward value. A node is
//! differentiable when any of its inputs is; constants and everything computed
//! purely from constants carry no gradient rule and are skipped by
//! [`Tape::backward`]. Leaf gradients accumulate across backward calls until
//! [`Tape::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    SumGroups(Var, usize),
    RowSums(Var),
    MulCol(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Square(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = match op {
            Op::Leaf => (Op::Leaf, requires_grad),
            // Nothing below a constant-only subgraph needs a gradient rule.
            _ if !requires_grad => (Op::Const, false),
            op => (op, true),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        // One-element tensors combine regardless of rank.
        if sa != sb && !(self.value(a).is_scalar() && self.value(b).is_scalar()) {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, p) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, p],
            });
        }
        let mut out = vec![0.0; m * p];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, p, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    /// Adds a `[1, c]` row to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("add_row", a)?;
        let (rr, rc) = self.require_matrix("add_row", row)?;
        if rr != 1 || rc != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![rr, rc],
            });
        }
        let (ta, tb) = (self.value(a), self.value(row));
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Domain {
                op: "concat",
                reason: format!("need at least one input and axis 0 or 1, got axis {axis}"),
            });
        }
        let (r0, c0) = self.require_matrix("concat", parts[0])?;
        for &p in &parts[1..] {
            let (r, c) = self.require_matrix("concat", p)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
        }
        let value = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("slice", a)?;
        if start >= end || end > r {
            return Err(Error::Domain {
                op: "slice",
                reason: format!("row range {start}..{end} out of bounds for {r} rows"),
            });
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(end - start, c, data)?, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("slice", a)?;
        if start >= end || end > c {
            return Err(Error::Domain {
                op: "slice",
                reason: format!("column range {start}..{end} out of bounds for {c} columns"),
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&t.row_slice(row)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, end - start, data)?, Op::SliceCols(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("transpose", a)?;
        let t = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.get(i, j);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(a), rg))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Repeats every row `k` times in place: `[r, c]` → `[r·k, c]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.require_matrix("repeat_rows", a)?;
        if k == 0 {
            return Err(Error::Domain {
                op: "repeat_rows",
                reason: "repeat count must be positive".into(),
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * k * c);
        for row in 0..r {
            for _ in 0..k {
                data.extend_from_slice(t.row_slice(row));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r * k, c, data)?, Op::RepeatRows(a, k), rg))
    }

    /// Sums consecutive groups of `k` rows: `[r·k, c]` → `[r, c]`.
    pub fn sum_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rk, c) = self.require_matrix("sum_groups", a)?;
        if k == 0 || rk % k != 0 {
            return Err(Error::Domain {
                op: "sum_groups",
                reason: format!("{rk} rows do not split into groups of {k}"),
            });
        }
        let t = self.value(a);
        let mut data = vec![0.0; rk / k * c];
        for row in 0..rk {
            let dst = &mut data[(row / k) * c..(row / k + 1) * c];
            for (o, x) in dst.iter_mut().zip(t.row_slice(row)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rk / k, c, data)?, Op::SumGroups(a, k), rg))
    }

    /// Sum of each row: `[r, c]` → `[r, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.require_matrix("row_sums", a)?;
        let t = self.value(a);
        let data = (0..r).map(|row| t.row_slice(row).iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::RowSums(a), rg))
    }

    /// Scales row `i` of an `[r, c]` matrix by `col[i]` of an `[r, 1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("mul_col", a)?;
        let (cr, cc) = self.require_matrix("mul_col", col)?;
        if cr != r || cc != 1 {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: vec![r, c],
                rhs: vec![cr, cc],
            });
        }
        let (ta, tc) = (self.value(a), self.value(col));
        let mut data = ta.data().to_vec();
        for (chunk, s) in data.chunks_mut(c).zip(tc.data()) {
            chunk.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MulCol(a, col), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column-wise mean of a matrix, giving a `[1, cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("mean_rows", a)?;
        let t = self.value(a);
        let mut out = vec![0.0; c];
        for row in 0..r {
            for (o, x) in out.iter_mut().zip(t.row_slice(row)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("input {bad} is not strictly positive"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix("softmax", a)?;
        let t = self.value(a);
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = t.row_slice(row);
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[row * c..(row + 1) * c];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(x) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Softmax(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Back-propagates from a one-element `output`, adding into leaf gradients.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                lhs: out.value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !out.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Leaf => match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, p) = (ta.rows(), ta.cols(), tb.cols());
                    if self.nodes[a.0].requires_grad {
                        let buf = slot(&mut grads, *a, ta.shape());
                        matmul_nt_acc(g.data(), tb.data(), buf, m, p, k);
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = slot(&mut grads, *b, tb.shape());
                        matmul_tn_acc(ta.data(), g.data(), buf, m, k, p);
                    }
                }
                Op::Add(a, b) => {
                    self.axpy(&mut grads, *a, 1.0, &g);
                    self.axpy(&mut grads, *b, 1.0, &g);
                }
                Op::AddRow(a, row) => {
                    self.axpy(&mut grads, *a, 1.0, &g);
                    if self.nodes[row.0].requires_grad {
                        let c = y.cols();
                        let buf = slot(&mut grads, *row, &[1, c]);
                        for chunk in g.data().chunks(c) {
                            for (o, s) in buf.iter_mut().zip(chunk) {
                                *o += s;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    self.axpy(&mut grads, *a, 1.0, &g);
                    self.axpy(&mut grads, *b, -1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].requires_grad {
                        let buf = slot(&mut grads, *a, ta.shape());
                        for ((o, gv), bv) in buf.iter_mut().zip(g.data()).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = slot(&mut grads, *b, tb.shape());
                        for ((o, gv), av) in buf.iter_mut().zip(g.data()).zip(ta.data()) {
                            *o += gv * av;
                        }
                    }
                }
                Op::Scale(a, s) => self.axpy(&mut grads, *a, *s, &g),
                Op::AddScalar(a) => self.axpy(&mut grads, *a, 1.0, &g),
                Op::Concat(parts, axis) => {
                    let cols = y.cols();
                    let mut offset = 0;
                    for p in parts {
                        let tp = &self.nodes[p.0].value;
                        let (pr, pc) = (tp.rows(), tp.cols());
                        if self.nodes[p.0].requires_grad {
                            let buf = slot(&mut grads, *p, tp.shape());
                            if *axis == 0 {
                                let src = &g.data()[offset * cols..(offset + pr) * cols];
                                for (o, s) in buf.iter_mut().zip(src) {
                                    *o += s;
                                }
                            } else {
                                for r in 0..pr {
                                    let src = &g.data()[r * cols + offset..r * cols + offset + pc];
                                    for (o, s) in buf[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                        *o += s;
                                    }
                                }
                            }
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::SliceRows(a, start) => {
                    let ta = &self.nodes[a.0].value;
                    let c = ta.cols();
                    let buf = slot(&mut grads, *a, ta.shape());
                    for (o, s) in buf[start * c..].iter_mut().zip(g.data()) {
                        *o += s;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = &self.nodes[a.0].value;
                    let (c, w) = (ta.cols(), y.cols());
                    let buf = slot(&mut grads, *a, ta.shape());
                    for r in 0..ta.rows() {
                        let dst = &mut buf[r * c + start..r * c + start + w];
                        for (o, s) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                            *o += s;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (r, c) = (ta.rows(), ta.cols());
                    let buf = slot(&mut grads, *a, ta.shape());
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g.data()[j * r + i];
                        }
                    }
                }
                Op::Reshape(a) => self.axpy(&mut grads, *a, 1.0, &g),
                Op::RepeatRows(a, k) => {
                    let ta = &self.nodes[a.0].value;
                    let c = ta.cols();
                    let buf = slot(&mut grads, *a, ta.shape());
                    for (row, src) in g.data().chunks(c).enumerate() {
                        let dst = &mut buf[(row / k) * c..(row / k + 1) * c];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                Op::SumGroups(a, k) => {
                    let ta = &self.nodes[a.0].value;
                    let c = ta.cols();
                    let buf = slot(&mut grads, *a, ta.shape());
                    for (row, dst) in buf.chunks_mut(c).enumerate() {
                        let src = &g.data()[(row / k) * c..(row / k + 1) * c];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                Op::RowSums(a) => {
                    let ta = &self.nodes[a.0].value;
                    let c = ta.cols();
                    let buf = slot(&mut grads, *a, ta.shape());
                    for (dst, gv) in buf.chunks_mut(c).zip(g.data()) {
                        dst.iter_mut().for_each(|o| *o += gv);
                    }
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
                    let c = ta.cols();
                    if self.nodes[a.0].requires_grad {
                        let buf = slot(&mut grads, *a, ta.shape());
                        for ((dst, src), s) in buf.chunks_mut(c).zip(g.data().chunks(c)).zip(tc.data()) {
                            for (o, gv) in dst.iter_mut().zip(src) {
                                *o += gv * s;
                            }
                        }
                    }
                    if self.nodes[col.0].requires_grad {
                        let buf = slot(&mut grads, *col, tc.shape());
                        for ((o, src), av) in buf.iter_mut().zip(g.data().chunks(c)).zip(ta.data().chunks(c)) {
                            *o += dot(src, av);
                        }
                    }
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    let buf = slot(&mut grads, *a, self.nodes[a.0].value.shape());
                    buf.iter_mut().for_each(|o| *o += gv);
                }
                Op::Mean(a) => {
                    let ta = &self.nodes[a.0].value;
                    let gv = g.item() / ta.len() as f64;
                    let buf = slot(&mut grads, *a, ta.shape());
                    buf.iter_mut().for_each(|o| *o += gv);
                }
                Op::MeanRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (r, c) = (ta.rows(), ta.cols());
                    let inv = 1.0 / r as f64;
                    let buf = slot(&mut grads, *a, ta.shape());
                    for row in 0..r {
                        for (o, s) in buf[row * c..(row + 1) * c].iter_mut().zip(g.data()) {
                            *o += s * inv;
                        }
                    }
                }
                Op::Sigmoid(a) => self.chain(&mut grads, *a, &g, y, |_, y| y * (1.0 - y)),
                Op::Tanh(a) => self.chain(&mut grads, *a, &g, y, |_, y| 1.0 - y * y),
                Op::Exp(a) => self.chain(&mut grads, *a, &g, y, |_, y| y),
                Op::Log(a) => self.chain(&mut grads, *a, &g, y, |x, _| 1.0 / x),
                Op::Square(a) => self.chain(&mut grads, *a, &g, y, |x, _| 2.0 * x),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    self.chain(
                        &mut grads,
                        *a,
                        &g,
                        y,
                        |x, _| {
                            if (lo..=hi).contains(&x) {
                                1.0
                            } else {
                                0.0
                            }
                        },
                    )
                }
                Op::Softmax(a) => {
                    let ta = &self.nodes[a.0].value;
                    let (r, c) = (ta.rows(), ta.cols());
                    let buf = slot(&mut grads, *a, ta.shape());
                    for row in 0..r {
                        let ys = &y.data()[row * c..(row + 1) * c];
                        let gs = &g.data()[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in buf[row * c..(row + 1) * c].iter_mut().zip(ys).zip(gs) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn axpy(&self, grads: &mut [Option<Tensor>], a: Var, s: f64, g: &Tensor) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let buf = slot(grads, a, self.nodes[a.0].value.shape());
        for (o, gv) in buf.iter_mut().zip(g.data()) {
            *o += s * gv;
        }
    }

    /// Elementwise chain rule with local derivative `d(x, y)` for input `x`
    /// and output `y`.
    fn chain(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, y: &Tensor, d: impl Fn(f64, f64) -> f64) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = &self.nodes[a.0].value;
        let buf = slot(grads, a, x.shape());
        for (((o, gv), xv), yv) in buf.iter_mut().zip(g.data()).zip(x.data()).zip(y.data()) {
            *o += gv * d(*xv, *yv);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
