//! Tape-based reverse-mode differentiation over batched matrices.
//!
//! Every op appends one node holding its output value. Node inputs always
//! precede the node, so a single reverse sweep over the node list visits the
//! graph in topological order. [`Tape::backward`] borrows the tape immutably:
//! the same tape can be differentiated from several scalar roots (the tip
//! Jacobian does this) and extended afterwards. Call [`Tape::clear`] to reuse
//! the allocation for a new computation.

use super::{gemm, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LinComb(Vec<(f64, Var)>),
    Mul(Var, Var),
    ColAffine {
        x: Var,
        scale: Rc<[f64]>,
    },
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    RowNorm(Var),
    RowSum(Var),
    SumAll(Var),
    Cols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Select {
        new: Var,
        old: Var,
        take_new: Rc<[bool]>,
    },
    ClampRowNorm(Var, f64),
    RowMin {
        x: Var,
        argmin: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::LinComb(_) => "lincomb",
            Op::Mul(..) => "mul",
            Op::ColAffine { .. } => "col_affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::RowNorm(_) => "row_norm",
            Op::RowSum(_) => "row_sum",
            Op::SumAll(_) => "sum_all",
            Op::Cols { .. } => "cols",
            Op::Concat(_) => "concat",
            Op::Select { .. } => "select",
            Op::ClampRowNorm(..) => "clamp_row_norm",
            Op::RowMin { .. } => "row_min",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves that required gradients.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[like.rows(), like.cols()]))
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = value.as_matrix();
            value.reshape_matrix(r, c)
        };
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs_need_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite entry",
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad: inputs_need_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix()
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Dimension(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    /// `x · w (+ b)` with `x: n×i`, `w: i×o`, `b: 1×o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.dims(x);
        let (wi, o) = self.dims(w);
        if i != wi {
            return Err(Error::Dimension(format!(
                "affine: input width {i} does not match weight rows {wi}"
            )));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            if self.dims(b) != (1, o) {
                return Err(Error::Dimension(format!(
                    "affine: bias {:?} does not match output width {o}",
                    self.dims(b)
                )));
            }
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            beta,
            &mut out,
        );
        let ng = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|b| self.requires_grad(b));
        self.push(Op::Affine { x, w, b }, Tensor::new(vec![n, o], out)?, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.affine(a, b, None)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::Contract("lincomb of zero terms".into()));
        };
        let (r, c) = self.dims(first);
        let mut out = vec![0.0; r * c];
        let mut ng = false;
        for &(coef, v) in terms {
            if self.dims(v) != (r, c) {
                return Err(Error::Dimension(format!(
                    "lincomb: {:?} vs {:?}",
                    self.dims(v),
                    (r, c)
                )));
            }
            ng |= self.requires_grad(v);
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += coef * x;
            }
        }
        self.push(
            Op::LinComb(terms.to_vec()),
            Tensor::new(vec![r, c], out)?,
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(1.0, a), (1.0, b)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(1.0, a), (-1.0, b)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.lincomb(&[(c, a)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.requires_grad(a) || self.requires_grad(b);
        self.push(Op::Mul(a, b), Tensor::new(vec![r, c], out)?, ng)
    }

    /// Per-column `x·scale + offset` with constant row vectors.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if scale.len() != c || offset.len() != c {
            return Err(Error::Dimension(format!(
                "col_affine: width {c}, scale {}, offset {}",
                scale.len(),
                offset.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for ((v, s), o) in row.iter_mut().zip(scale).zip(offset) {
                *v = *v * s + o;
            }
        }
        let ng = self.requires_grad(x);
        self.push(
            Op::ColAffine {
                x,
                scale: scale.into(),
            },
            Tensor::new(vec![r, c], out)?,
            ng,
        )
    }

    pub fn scale_cols(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let zeros = vec![0.0; scale.len()];
        self.col_affine(x, scale, &zeros)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        let ng = self.requires_grad(x);
        self.push(op, out, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    /// Euclidean norm of every row, `n×1`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let n = out.len();
        let ng = self.requires_grad(x);
        self.push(Op::RowNorm(x), Tensor::new(vec![n, 1], out)?, ng)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let n = out.len();
        let ng = self.requires_grad(x);
        self.push(Op::RowSum(x), Tensor::new(vec![n, 1], out)?, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let ng = self.requires_grad(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Columns `start..end`.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(Error::Dimension(format!(
                "cols {start}..{end} out of width {c}"
            )));
        }
        let w = end - start;
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.requires_grad(x);
        self.push(Op::Cols { x, start }, Tensor::new(vec![r, w], out)?, ng)
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero parts".into()));
        };
        let r = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::Dimension(format!("concat: {pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.requires_grad(p));
        self.push(
            Op::Concat(parts.to_vec()),
            Tensor::new(vec![r, total], out)?,
            ng,
        )
    }

    /// Row `i` from `new` where `take_new[i]`, otherwise from `old`.
    pub fn select_rows(&mut self, take_new: &[bool], new: Var, old: Var) -> Result<Var> {
        let (r, c) = self.same_dims(new, old, "select_rows")?;
        if take_new.len() != r {
            return Err(Error::Dimension(format!(
                "select_rows: mask of {} for {r} rows",
                take_new.len()
            )));
        }
        let mut out = Vec::with_capacity(r * c);
        for (i, &t) in take_new.iter().enumerate() {
            let src = if t { new } else { old };
            out.extend_from_slice(self.value(src).row(i));
        }
        let ng = self.requires_grad(new) || self.requires_grad(old);
        self.push(
            Op::Select {
                new,
                old,
                take_new: take_new.into(),
            },
            Tensor::new(vec![r, c], out)?,
            ng,
        )
    }

    /// Rescales rows whose norm exceeds `max` onto the ball of radius `max`.
    pub fn clamp_row_norm(&mut self, x: Var, max: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > max {
                row.iter_mut().for_each(|v| *v *= max / n);
            }
        }
        let ng = self.requires_grad(x);
        self.push(Op::ClampRowNorm(x, max), out, ng)
    }

    /// Minimum of every row, `n×1`.
    pub fn row_min(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::Dimension("row_min of zero columns".into()));
        }
        let mut argmin = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let (j, v) =
                t.row(i)
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::INFINITY),
                        |(bj, bv), (j, &v)| {
                            if v < bv {
                                (j, v)
                            } else {
                                (bj, bv)
                            }
                        },
                    );
            argmin.push(j);
            out.push(v);
        }
        let n = out.len();
        let ng = self.requires_grad(x);
        self.push(Op::RowMin { x, argmin }, Tensor::new(vec![n, 1], out)?, ng)
    }

    /// Adjoints of `loss` (a 1×1 node) with respect to every leaf that
    /// requires gradients. Intermediate adjoints are released as the sweep
    /// passes them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.dims(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(&[r, c]))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, i) = self.dims(*x);
                let o = self.dims(*w).1;
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let slot = self.slot(grads, *x);
                    gemm(n, o, i, gd, false, wv, true, 1.0, slot.data_mut());
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data();
                    let slot = self.slot(grads, *w);
                    gemm(i, n, o, xv, true, gd, false, 1.0, slot.data_mut());
                }
                if let Some(b) = b.filter(|b| self.requires_grad(*b)) {
                    let slot = self.slot(grads, b);
                    let sd = slot.data_mut();
                    for row in gd.chunks_exact(o) {
                        for (s, v) in sd.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(coef, v) in terms {
                    if self.requires_grad(v) {
                        let slot = self.slot(grads, v);
                        for (s, x) in slot.data_mut().iter_mut().zip(gd) {
                            *s += coef * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(this) {
                        let ov = self.value(other).data();
                        let slot = self.slot(grads, this);
                        for ((s, x), y) in slot.data_mut().iter_mut().zip(gd).zip(ov) {
                            *s += x * y;
                        }
                    }
                }
            }
            Op::ColAffine { x, scale } => {
                let c = scale.len();
                let slot = self.slot(grads, *x);
                for (srow, grow) in slot.data_mut().chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                    for ((s, v), k) in srow.iter_mut().zip(grow).zip(scale.iter()) {
                        *s += v * k;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let slot = self.slot(grads, *x);
                for ((s, v), y) in slot.data_mut().iter_mut().zip(gd).zip(y) {
                    *s += v * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let slot = self.slot(grads, *x);
                for ((s, v), y) in slot.data_mut().iter_mut().zip(gd).zip(y) {
                    *s += v * y * (1.0 - y);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let slot = self.slot(grads, *x);
                for ((s, v), xi) in slot.data_mut().iter_mut().zip(gd).zip(xv) {
                    *s += if *xi >= 0.0 { *v } else { slope * v };
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let norms = node.value.data();
                let slot = self.slot(grads, *x);
                for (i, srow) in slot.data_mut().chunks_exact_mut(c).enumerate() {
                    if norms[i] > 0.0 {
                        let k = gd[i] / norms[i];
                        for (s, v) in srow.iter_mut().zip(xv.row(i)) {
                            *s += k * v;
                        }
                    }
                }
            }
            Op::RowSum(x) => {
                let c = self.dims(*x).1;
                let slot = self.slot(grads, *x);
                for (i, srow) in slot.data_mut().chunks_exact_mut(c).enumerate() {
                    srow.iter_mut().for_each(|s| *s += gd[i]);
                }
            }
            Op::SumAll(x) => {
                let slot = self.slot(grads, *x);
                slot.data_mut().iter_mut().for_each(|s| *s += gd[0]);
            }
            Op::Cols { x, start } => {
                let c = self.dims(*x).1;
                let w = g.cols();
                let slot = self.slot(grads, *x);
                for (srow, grow) in slot.data_mut().chunks_exact_mut(c).zip(gd.chunks_exact(w)) {
                    for (s, v) in srow[*start..*start + w].iter_mut().zip(grow) {
                        *s += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.requires_grad(p) {
                        let slot = self.slot(grads, p);
                        for (srow, grow) in slot
                            .data_mut()
                            .chunks_exact_mut(w.max(1))
                            .zip(gd.chunks_exact(total.max(1)))
                        {
                            for (s, v) in srow.iter_mut().zip(&grow[offset..offset + w]) {
                                *s += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Select { new, old, take_new } => {
                let c = g.cols();
                for (v, want) in [(*new, true), (*old, false)] {
                    if self.requires_grad(v) {
                        let slot = self.slot(grads, v);
                        for (i, srow) in slot.data_mut().chunks_exact_mut(c).enumerate() {
                            if take_new[i] == want {
                                for (s, gv) in srow.iter_mut().zip(g.row(i)) {
                                    *s += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ClampRowNorm(x, max) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let slot = self.slot(grads, *x);
                for (i, srow) in slot.data_mut().chunks_exact_mut(c).enumerate() {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > *max {
                        // d(m·x/|x|) = (m/|x|)(I − x̂x̂ᵀ)
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((s, gv), xvv) in srow.iter_mut().zip(gr).zip(xr) {
                            *s += max / n * (gv - dot * xvv / n);
                        }
                    } else {
                        for (s, gv) in srow.iter_mut().zip(gr) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::RowMin { x, argmin } => {
                let c = self.dims(*x).1;
                let slot = self.slot(grads, *x);
                let sd = slot.data_mut();
                for (i, &j) in argmin.iter().enumerate() {
                    sd[i * c + j] += gd[i];
                }
            }
        }
    }
}
