//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Operations are recorded in execution order on a [`Tape`]; [`Tape::backward`]
//! replays them in reverse and returns [`Gradients`] keyed by node and by
//! parameter. Parameters are borrowed, not copied, so a tape must be dropped
//! before the gradients are applied to the owning model.

use std::borrow::Cow;
use std::collections::HashMap;

use super::matrix::{self, gemm_nn, gemm_nt, gemm_tn, Matrix, NORM_EPS};
use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    Fuse { w: Var, s: Var, q: Var },
    Softmax(Var, f64),
    L2Normalize(Var),
    Mse(Var, Var),
    ColMean(Var),
    Abs(Var),
    MeanAll(Var),
    SumAll(Var),
    Interpolate(Var, Vec<(usize, usize, f64)>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Records differentiable operations. Single-threaded; one per forward pass.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported in [`Gradients::wrt`].
    pub fn variable(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Borrows a parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, p: &'p Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value()),
            op: if p.is_trainable() { Op::Param(p.id()) } else { Op::Leaf },
            needs_grad: p.is_trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id(), v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matrix::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm_nt(va, vb, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.as_slice()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::Shift(a), ng)
    }

    /// Multiplies every element of `a` by the 1x1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(a),
                rhs: self.shape(s),
            });
        }
        let k = self.scalar(s);
        let out = self.value(a).map(|x| x * k);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    /// `w · s + (1 − w) · q` for a 1x1 weight `w`.
    pub fn fuse(&mut self, w: Var, s: Var, q: Var) -> Result<Var> {
        self.same_shape("fuse", s, q)?;
        if self.shape(w) != (1, 1) {
            return Err(Error::Shape(format!(
                "fusion weight must be 1x1, got {:?}",
                self.shape(w)
            )));
        }
        let k = self.scalar(w);
        let out = self.value(s).zip_map(self.value(q), |a, b| k * a + (1.0 - k) * b);
        let ng = self.needs(w) || self.needs(s) || self.needs(q);
        Ok(self.push(out, Op::Fuse { w, s, q }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let out = matrix::softmax_rows(self.value(a), temperature)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a, temperature), ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let out = matrix::l2_normalize_rows(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::L2Normalize(a), ng)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matrix::mse(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Matrix::scalar(out), Op::Mse(a, b), ng))
    }

    pub fn column_mean(&mut self, a: Var) -> Var {
        let out = matrix::column_mean(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::ColMean(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.sum() / v.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(Matrix::scalar(out), Op::MeanAll(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Matrix::scalar(out), Op::SumAll(a), ng)
    }

    /// Mean absolute difference between the column means of `a` and `b`.
    pub fn l1_of_means(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 || sa.0 == 0 || sb.0 == 0 {
            return Err(Error::Dimension {
                op: "l1_of_means",
                lhs: sa,
                rhs: sb,
            });
        }
        let ma = self.column_mean(a);
        let mb = self.column_mean(b);
        let d = self.sub(ma, mb)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    pub fn interpolate_rows(&mut self, a: Var, target_len: usize) -> Result<Var> {
        let src = self.value(a);
        let out = matrix::interpolate_rows(src, target_len)?;
        let plan = matrix::interpolation_plan(src.rows(), target_len);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Interpolate(a, plan), ng))
    }

    /// Row-wise layer normalisation with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        for p in [gamma, beta] {
            if self.shape(p) != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vx.shape(),
                    rhs: self.shape(p),
                });
            }
        }
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let mut xhat = vx.clone();
        let mut out = vx.clone();
        let mut rstd = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[c] * xhat.get(r, c) + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                v.shape()
            )));
        }
        let mut out = Matrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols needs equal row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape(format!("row {bad} out of range for {:?}", v.shape())));
        }
        let out = v.select_rows(idx);
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::Shape("concat_rows needs equal column counts".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.rows() || targets.iter().any(|&t| t >= v.cols()) {
            return Err(Error::Shape(format!(
                "cross entropy targets do not fit logits {:?}",
                v.shape()
            )));
        }
        let probs = matrix::softmax_rows(v, 1.0)?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = v.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / targets.len().max(1) as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm_nt(g, vb, &mut da);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(va, g, &mut db);
                    acc(*b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm_nn(g, vb, &mut da);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm_tn(g, va, &mut db);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in dr.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*row, dr);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                let va = self.value(*a);
                acc(*a, g.map(|x| x * k));
                let ds: f64 = g.as_slice().iter().zip(va.as_slice()).map(|(x, y)| x * y).sum();
                acc(*s, Matrix::scalar(ds));
            }
            Op::Fuse { w, s, q } => {
                let k = self.scalar(*w);
                let (vs, vq) = (self.value(*s), self.value(*q));
                acc(*s, g.map(|x| x * k));
                acc(*q, g.map(|x| x * (1.0 - k)));
                let dw: f64 = g
                    .as_slice()
                    .iter()
                    .zip(vs.as_slice().iter().zip(vq.as_slice()))
                    .map(|(x, (a, b))| x * (a - b))
                    .sum();
                acc(*w, Matrix::scalar(dw));
            }
            Op::Softmax(a, tau) => {
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yi, gi)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *d = yi * (gi - dot) / tau;
                    }
                }
                acc(*a, da);
            }
            Op::L2Normalize(a) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let norm = va.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    if norm > NORM_EPS {
                        let y = out.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (yi, gi)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                            *d = (gi - yi * dot) / norm;
                        }
                    } else {
                        for (d, gi) in da.row_mut(r).iter_mut().zip(gr) {
                            *d = gi / NORM_EPS;
                        }
                    }
                }
                acc(*a, da);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / va.len() as f64;
                let da = va.zip_map(vb, |x, y| k * (x - y));
                acc(*b, da.map(|x| -x));
                acc(*a, da);
            }
            Op::ColMean(a) => {
                let va = self.value(*a);
                let n = va.rows() as f64;
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *d = x / n;
                    }
                }
                acc(*a, da);
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |x, v| if v > 0.0 { x } else if v < 0.0 { -x } else { 0.0 }));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                acc(*a, Matrix::filled(va.rows(), va.cols(), g.item() / va.len() as f64));
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                acc(*a, Matrix::filled(va.rows(), va.cols(), g.item()));
            }
            Op::Interpolate(a, plan) => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for (i, &(lo, hi, t)) in plan.iter().enumerate() {
                    for c in 0..va.cols() {
                        let gi = g.get(i, c);
                        da.row_mut(lo)[c] += (1.0 - t) * gi;
                        if t != 0.0 {
                            da.row_mut(hi)[c] += t * gi;
                        }
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).as_slice();
                let cols = xhat.cols();
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(xhat.rows(), cols);
                for r in 0..xhat.rows() {
                    let (gr, xh) = (g.row(r), xhat.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dgamma.as_mut_slice()[c] += gr[c] * xh[c];
                        dbeta.as_mut_slice()[c] += gr[c];
                        let d = gr[c] * gm[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (gr[c] * gm[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |x, v| x * gelu_grad(v)));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut dp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(p, dp);
                }
            }
            Op::SelectRows { x, idx } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let slice = g.as_slice()[off * cols..(off + rows) * cols].to_vec();
                    off += rows;
                    acc(p, Matrix::new(rows, cols, slice).expect("shape"));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = g.item() / targets.len().max(1) as f64;
                let mut d = probs.map(|p| p * k);
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= k;
                }
                acc(*logits, d);
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it needs one.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn for_param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, i)| self.nodes[i].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{sample_indices, worst_discrepancy};
    use crate::numeric::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_against_zero_closed_form() {
        let p = Parameter::new(Matrix::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let z = tape.constant(Matrix::zeros(1, 1));
        let loss = tape.mse(x, z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.for_param(p.id()).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut p = Parameter::new(Matrix::from_rows(&[[1.0, -2.0]]));
        for _ in 0..2 {
            let grads = {
                let mut tape = Tape::new();
                let x = tape.param(&p);
                let sq = tape.mul(x, x).unwrap();
                let loss = tape.sum(sq);
                tape.backward(loss).unwrap()
            };
            p.accumulate(&grads);
        }
        assert_eq!(p.grad().as_slice(), &[4.0, -8.0]);
        p.zero_grad();
        assert_eq!(p.grad().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let mut frozen = Parameter::frozen(Matrix::from_rows(&[[1.0, 2.0]]));
        let mut live = Parameter::new(Matrix::from_rows(&[[0.5], [0.25]]));
        let grads = {
            let mut tape = Tape::new();
            let a = tape.param(&frozen);
            let b = tape.param(&live);
            let y = tape.matmul(a, b).unwrap();
            tape.backward(y).unwrap()
        };
        frozen.accumulate(&grads);
        live.accumulate(&grads);
        assert!(frozen.grad().as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(live.grad().as_slice(), &[1.0, 2.0]);
        assert_eq!(frozen.parameter_count(), 0);
    }

    #[test]
    fn same_parameter_used_twice_shares_one_node() {
        let p = Parameter::new(Matrix::scalar(2.0));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.for_param(p.id()).unwrap().item(), 4.0);
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Matrix::uniform(3, 6, 1.0, &mut rng);
        let gamma = Matrix::uniform(1, 6, 1.0, &mut rng);
        let beta = Matrix::uniform(1, 6, 1.0, &mut rng);
        let w = Matrix::uniform(3, 6, 1.0, &mut rng);
        let mut f = |x: &Matrix| {
            let mut t = Tape::new();
            let x = t.variable(x.clone());
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let w = t.constant(w.clone());
            let y = t.layer_norm(x, g, b).unwrap();
            let y = t.gelu(y);
            let y = t.mul(y, w).unwrap();
            let s = t.sum(y);
            t.scalar(s)
        };
        let analytic = {
            let mut t = Tape::new();
            let x = t.variable(x0.clone());
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let wv = t.constant(w.clone());
            let y = t.layer_norm(x, g, b).unwrap();
            let y = t.gelu(y);
            let y = t.mul(y, wv).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap().wrt(x).unwrap().clone()
        };
        let d = worst_discrepancy(&mut f, &x0, &analytic, &sample_indices(18, 18), 1e-4);
        assert!(d.error() < 1e-6, "{d:?}");
    }
}
