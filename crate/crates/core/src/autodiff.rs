//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] owns every node created during a forward pass. Nodes are
//! appended in creation order, so the tape order is already a topological
//! order and [`Tape::backward`] just walks it in reverse.
//!
//! ```
//! use precond_attn::autodiff::Tape;
//! use precond_attn::linalg::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::filled(1, 1, 2.0));
//! let y = tape.scale(x, 3.0);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).get(0, 0), 3.0);
//! ```

use crate::error::{Error, Result};
use crate::linalg::{self, matmul_nt, matmul_tn, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
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
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        input: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    MeanRows(Var),
    SumAll(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.live(v)
    }

    /// Accumulated gradient; zeros when nothing has flowed into `v`.
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let live = self.live(a) || self.live(b);
        Ok(self.push(value, Op::Add(a, b), live))
    }

    /// Adds a 1×cols row vector to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.broadcast_rows(a, row, "add_row_broadcast", |x, r| x + r)?;
        let live = self.live(a) || self.live(row);
        Ok(self.push(value, Op::AddRowBroadcast(a, row), live))
    }

    /// Multiplies every row of `a` elementwise by a 1×cols row vector.
    pub fn mul_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.broadcast_rows(a, row, "mul_row_broadcast", |x, r| x * r)?;
        let live = self.live(a) || self.live(row);
        Ok(self.push(value, Op::MulRowBroadcast(a, row), live))
    }

    fn broadcast_rows(
        &self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::shape(op, am.shape(), rm.shape()));
        }
        let mut out = am.clone();
        let r = rm.row(0);
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(r) {
                *x = f(*x, b);
            }
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::matmul(self.value(a), self.value(b))?;
        let live = self.live(a) || self.live(b);
        Ok(self.push(value, Op::MatMul(a, b), live))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let live = self.live(a);
        self.push(value, Op::Transpose(a), live)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let live = self.live(a);
        self.push(value, Op::Scale(a, s), live)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = linalg::softmax_rows(self.value(a));
        let live = self.live(a);
        self.push(value, Op::Softmax(a), live)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let live = self.live(a);
        self.push(value, Op::Gelu(a), live)
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = normalized.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let live = self.live(a);
        self.push(
            normalized.clone(),
            Op::LayerNorm {
                input: a,
                normalized,
                inv_std,
            },
            live,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let dst = out.row_mut(i);
            let mut offset = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let live = parts.iter().any(|&p| self.live(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), live))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let live = parts.iter().any(|&p| self.live(p));
        Ok(self.push(
            Matrix::from_raw(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            live,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", (rows, cols), (start + len, cols)));
        }
        let value = self.value(a).slice_rows(start, len);
        let live = self.live(a);
        Ok(self.push(value, Op::SliceRows { input: a, start }, live))
    }

    /// Column means, as a 1×cols row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for row in x.iter_rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        let live = self.live(a);
        self.push(out, Op::MeanRows(a), live)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let live = self.live(a);
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a), live)
    }

    /// Row lookup: output row r is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::Input(format!(
                "row id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let value = Matrix::from_raw(ids.len(), t.cols(), data);
        let live = self.live(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            live,
        ))
    }

    /// Mean over rows of `-ln softmax(logits)[target]`, fused with the
    /// softmax.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(Error::shape("cross_entropy_loss", l.shape(), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::Input(format!(
                "target {bad} out of range for {} classes",
                l.cols()
            )));
        }
        let probs = linalg::softmax_rows(l);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            // log-sum-exp form keeps the loss finite when probs underflow.
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let live = self.live(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            live,
        ))
    }

    /// Forwards the value of `a` unchanged; nothing flows back into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Propagates d(loss)/d(node) to every live ancestor of `loss`, adding
    /// into the gradients left by earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut upstream: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = upstream[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut upstream)?;
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        upstream: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut send = |v: Var, grad: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut upstream[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRowBroadcast(a, row) => {
                send(*a, g.clone());
                send(*row, column_sums(g));
            }
            Op::MulRowBroadcast(a, row) => {
                let r = self.value(*row);
                let x = self.value(*a);
                let mut ga = g.clone();
                let mut gr = Matrix::zeros(1, r.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, j, g.get(i, j) * r.get(0, j));
                        gr.data_mut()[j] += g.get(i, j) * x.get(i, j);
                    }
                }
                send(*a, ga);
                send(*row, gr);
            }
            Op::MatMul(a, b) => {
                if self.live(*a) {
                    send(*a, matmul_nt(g, self.value(*b))?);
                }
                if self.live(*b) {
                    send(*b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Softmax(a) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, dy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (j, dst) in gx.row_mut(i).iter_mut().enumerate() {
                        *dst = y[j] * (dy[j] - dot);
                    }
                }
                send(*a, gx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut gx = g.clone();
                for (d, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    *d *= gelu_derivative(xv);
                }
                send(*a, gx);
            }
            Op::LayerNorm {
                input,
                normalized,
                inv_std,
            } => {
                let cols = normalized.cols() as f64;
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for (i, &inv) in inv_std.iter().enumerate() {
                    let (xh, dy) = (normalized.row(i), g.row(i));
                    let mean_dy = dy.iter().sum::<f64>() / cols;
                    let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for (j, dst) in gx.row_mut(i).iter_mut().enumerate() {
                        *dst = inv * (dy[j] - mean_dy - xh[j] * mean_dy_xh);
                    }
                }
                send(*input, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.live(p) {
                        send(p, Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j)));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.live(p) {
                        send(p, g.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::SliceRows { input, start } => {
                let (rows, cols) = self.shape(*input);
                let mut gx = Matrix::zeros(rows, cols);
                for i in 0..g.rows() {
                    gx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                send(*input, gx);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let n = rows as f64;
                send(*a, Matrix::from_fn(rows, cols, |_, j| g.get(0, j) / n));
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                send(*a, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut gt = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                send(*table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(i);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, gl);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
