//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its output value, so node order is
//! a topological order by construction. `backward` walks the tape once in
//! reverse and only touches nodes that depend on a leaf marked trainable.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, MIN_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// GELU formulation. The exact form uses the Gaussian CDF via `erf`; the tanh
/// form is `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GeluKind {
    #[default]
    Exact,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var, GeluKind),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when no gradient
    /// reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| Error::Dimension {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn gelu_value(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
        GeluKind::Tanh => {
            let c = libm::sqrt(2.0 / core::f64::consts::PI);
            0.5 * x * (1.0 + libm::tanh(c * (x + 0.044715 * x * x * x)))
        }
    }
}

fn gelu_slope(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
            let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
            cdf + x * pdf
        }
        GeluKind::Tanh => {
            let c = libm::sqrt(2.0 / core::f64::consts::PI);
            let t = libm::tanh(c * (x + 0.044715 * x * x * x));
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
        }
    }
}

/// Elementwise GELU outside the tape.
pub fn gelu(x: &Tensor, kind: GeluKind) -> Tensor {
    x.map(|v| gelu_value(v, kind))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new node that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul_nt")?;
        let (n, k2) = dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`d` vector to every row of an `[n×d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = dims(self.value(x), "add_row")?;
        if self.value(bias).len() != d {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = dims(self.value(x), "softmax")?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            tensor::softmax_in_place(row)?;
        }
        self.push("softmax", value, Op::SoftmaxRows(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims(self.value(x), "layernorm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: vec![r, c],
                rhs: vec![self.value(gamma).len(), self.value(beta).len()],
            });
        }
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(r);
        for row in xhat.chunks_mut(c) {
            let (mean, rs) = tensor::row_moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layernorm", value, op, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Result<Var> {
        let value = gelu(self.value(x), kind);
        self.push("gelu", value, Op::Gelu(x, kind), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(idx)?;
        self.push("gather_rows", value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, c) = dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c2) = dims(self.value(*p), "concat_rows")?;
            if c2 != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, c2],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x), "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::OutOfRange {
                what: "columns",
                index: end,
                len: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![r, end - start], data)?;
        self.push("slice_cols", value, Op::SliceCols(x, start, end), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (r, _) = dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r2, c) = dims(self.value(*p), "concat_cols")?;
            if r2 != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![r2],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column means, as a `[1×d]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).mean_rows()?;
        self.push("mean_rows", value, Op::MeanRows(x), &[x])
    }

    /// Column maxima, as a `[1×d]` row. Ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "max_rows")?;
        let src = self.value(x).data();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                if src[i * c + j] > src[arg[j] * c + j] {
                    arg[j] = i;
                }
            }
        }
        let data = (0..c).map(|j| src[arg[j] * c + j]).collect();
        let value = Tensor::new(vec![1, c], data)?;
        self.push("max_rows", value, Op::MaxRows(x, arg), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = dims(self.value(x), "l2_normalize")?;
        let mut value = self.value(x).clone();
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(c) {
            let n = libm::sqrt(tensor::dot(row, row));
            if n < MIN_NORM {
                return Err(Error::Degenerate("l2_normalize"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push("l2_normalize", value, Op::L2NormalizeRows(x, norms), &[x])
    }

    /// Populates `∂loss/∂v` for every node that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| tensor::matmul_nt(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| tensor::matmul_tn(ad, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                self.accumulate(grads, *a, |ga| tensor::matmul_nn(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| tensor::matmul_tn(g, ad, gb, m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2().unwrap();
                let gt = tensor::transpose(g, r, c);
                self.accumulate(grads, *x, |gx| add_into(gx, &gt));
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = out.dims2().unwrap();
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let inner = tensor::dot(gr, yr);
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (_, c) = out.dims2().unwrap();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    let mut dyh = vec![0.0; c];
                    for (i, (gxr, gr)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dyh[j] = gr[j] * gam[j];
                        }
                        let mean_d = dyh.iter().sum::<f64>() / c as f64;
                        let mean_dx = tensor::dot(&dyh, xh) / c as f64;
                        for j in 0..c {
                            gxr[j] += rstd[i] * (dyh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Gelu(x, kind) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_slope(xd[i], *kind);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = out.dims2().unwrap().1;
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, *p, |gp| add_into(gp, slice));
                    offset += len;
                }
            }
            Op::SliceCols(x, start, end) => {
                let c = self.value(*x).dims2().unwrap().1;
                let w = end - start;
                self.accumulate(grads, *x, |gx| {
                    for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut gxr[*start..*end], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.dims2().unwrap().1;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().unwrap().1;
                    self.accumulate(grads, *p, |gp| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(gpr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                let (r, _) = self.value(*x).dims2().unwrap();
                let inv = 1.0 / r as f64;
                self.accumulate(grads, *x, |gx| {
                    for row in gx.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                    }
                });
            }
            Op::MaxRows(x, arg) => {
                let c = arg.len();
                self.accumulate(grads, *x, |gx| {
                    for (j, &i) in arg.iter().enumerate() {
                        gx[i * c + j] += g[j];
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::SumSquares(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * xd[i] * g[0];
                    }
                });
            }
            Op::L2NormalizeRows(x, norms) => {
                let (_, c) = out.dims2().unwrap();
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for (i, gxr) in gx.chunks_mut(c).enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = tensor::dot(yr, gr);
                        for j in 0..c {
                            gxr[j] += (gr[j] - yr[j] * inner) / norms[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row_vector(v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, -2.0, 3.5]), true);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, -2.0, 3.5]), true);
        let s = t.sum_squares(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]), true);
        let c = t.constant(row(&[3.0, 4.0]));
        let d = t.detach(x);
        let p = t.mul(x, c).unwrap();
        let q = t.mul(p, d).unwrap();
        let s = t.sum(q).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
        // d/dx (x·c·stop(x)) = c·x
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 8.0]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[2.0]), true);
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap();
        let s = t.sum(z).unwrap();
        let g = t.backward(s).unwrap();
        // z = 2x², dz/dx = 4x
        assert_eq!(g.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn gelu_reference_values() {
        let x = row(&[0.0, 1.0, 12.0, -12.0]);
        let exact = gelu(&x, GeluKind::Exact);
        assert_eq!(exact.data()[0], 0.0);
        assert!((exact.data()[1] - 0.841_344_746).abs() < 1e-8);
        assert!((exact.data()[2] - 12.0).abs() < 1e-12);
        assert!(exact.data()[3].abs() < 1e-12);
        let approx = gelu(&x, GeluKind::Tanh);
        assert!((approx.data()[1] - 0.841_192).abs() < 1e-6);
    }
}
