//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation in execution order, so
//! the node list is already topologically sorted and a backward sweep is a
//! single reverse pass. Parameters are referenced from a borrowed
//! [`ParamStore`] instead of copied, which keeps per-sample tapes cheap to
//! build in parallel.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound on the norm product inside [`Tape::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddOuter(Var, Var),
    Gelu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    WeightedMeanRows(Var, Vec<f64>),
    Sum(Var),
    Embedding(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    Cosine(Var, Var),
}

#[derive(Debug, Clone)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations (the computation tape).
#[derive(Debug, Clone)]
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    /// Accumulated gradients of leaf nodes, indexed by node.
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            param_nodes: vec![None; store.len()],
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.validate_finite("constant")?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Differentiable input leaf; its gradient is readable via [`Tape::grad`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        t.validate_finite("input")?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::contract("tape has no parameter store"))?;
        if id.0 >= store.len() {
            return Err(Error::contract(format!("unknown parameter {}", id.0)));
        }
        if let Some(v) = self.param_nodes[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        self.leaf_grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").get(*id),
        }
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(op, a, b));
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

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.dims(b)? != (1, n) {
            return Err(self.shape_err("add_row", a, b));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, x) in row.iter_mut().zip(&bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, b), rg))
    }

    /// Broadcast sum of an `m×1` column and a `1×n` row into `m×n`.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let (m, c1) = self.dims(col)?;
        let (r1, n) = self.dims(row)?;
        if c1 != 1 || r1 != 1 {
            return Err(self.shape_err("add_outer", col, row));
        }
        let (cv, rv) = (self.value(col).data(), self.value(row).data());
        let mut out = Vec::with_capacity(m * n);
        for &c in cv {
            out.extend(rv.iter().map(|r| c + r));
        }
        let rg = self.rg(&[col, row]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddOuter(col, row), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, op, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let ta = self.value(a);
        ta.validate_finite("softmax input")?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if d < 2 {
            return Err(Error::contract("layer_norm needs width >= 2"));
        }
        if self.dims(gain)? != (1, d) {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.dims(bias)? != (1, d) {
            return Err(self.shape_err("layer_norm bias", x, bias));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(m, d, out)?, op, rg))
    }

    /// Stacks matrices along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, n) = self.dims(first)?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if width == 0 || start + width > n {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of {n}",
                start + width
            )));
        }
        let ta = self.value(a);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, width, data)?, Op::SliceCols(a, start), rg))
    }

    /// Mean over the token axis, optionally restricted to rows where `mask` is true.
    pub fn mean_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let weights = match mask {
            None => vec![1.0 / m as f64; m],
            Some(mask) => {
                if mask.len() != m {
                    return Err(Error::Shape {
                        op: "mean_rows mask",
                        lhs: vec![m, n],
                        rhs: vec![mask.len()],
                    });
                }
                let k = mask.iter().filter(|&&b| b).count();
                if k == 0 {
                    return Err(Error::contract("mean over fully masked rows"));
                }
                mask.iter().map(|&b| if b { 1.0 / k as f64 } else { 0.0 }).collect()
            }
        };
        let ta = self.value(a);
        let mut out = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(ta.row(i)) {
                *o += w * v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::WeightedMeanRows(a, weights), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of no ids"));
        }
        let t = self.value(table).select_rows(ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Mean over classes of sigmoid binary cross-entropy, in the stable
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))` form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != target.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let loss = tl
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, target.to_vec()), rg))
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors. The
    /// norm product is floored at [`COSINE_EPS`] and the value clamped to
    /// `[-1, 1]`.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.len() != tv.len() {
            return Err(self.shape_err("cosine_similarity", u, v));
        }
        let (dot, nu, nv) = cosine_parts(tu.data(), tv.data());
        let c = (dot / (nu * nv).max(COSINE_EPS)).clamp(-1.0, 1.0);
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?;
        self.backward_seeded(&[(loss, &seed)])
    }

    /// Reverse sweep starting from arbitrary output cotangents.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::contract("seed not on this tape"));
            }
            if self.value(*v).shape() != g.shape() {
                return Err(self.shape_err_t("backward seed", *v, g));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(g.data()) {
                *a += b;
            }
            top = top.max(v.0 + 1);
        }
        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Param) {
                match &mut self.leaf_grads[idx] {
                    Some(slot) => add_into(slot, &g),
                    slot @ None => *slot = Some(g),
                }
            } else {
                self.propagate(idx, &self.nodes[idx].op, &g, &mut grads)?;
            }
        }
        Ok(())
    }

    fn shape_err_t(&self, op: &'static str, v: Var, t: &Tensor) -> Error {
        Error::Shape {
            op,
            lhs: self.value(v).shape().to_vec(),
            rhs: t.shape().to_vec(),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = self.value(Var(idx));
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nn(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(g, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a)?;
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dv) = self.slot(grads, v) {
                        add_into(dv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddRow(a, b) => {
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::AddOuter(c, r) => {
                let n = out.cols();
                if let Some(dc) = self.slot(grads, *c) {
                    for (d, row) in dc.iter_mut().zip(g.chunks(n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                if let Some(dr) = self.slot(grads, *r) {
                    for row in g.chunks(n) {
                        add_into(dr, row);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), &x) in da.iter_mut().zip(g).zip(xv) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Elu(a) => {
                let xv = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), &x) in da.iter_mut().zip(g).zip(xv) {
                        *d += if x > 0.0 { *g } else { g * x.exp() };
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), &x) in da.iter_mut().zip(g).zip(xv) {
                        *d += if x > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let y = out.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, g), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *acc += g * h;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
                let gv = self.value(*gain).data().to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_d = 1.0 / d as f64;
                    for (i, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let drow = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            drow[j] += inv_std[i] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut col = 0;
                for &p in parts {
                    let (_, c) = self.dims(p)?;
                    if let Some(dp) = self.slot(grads, p) {
                        for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(n)) {
                            add_into(drow, &grow[col..col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols(a, start) => {
                let w = out.cols();
                let (_, n) = self.dims(*a)?;
                if let Some(da) = self.slot(grads, *a) {
                    for (drow, grow) in da.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut drow[*start..*start + w], grow);
                    }
                }
            }
            Op::WeightedMeanRows(a, weights) => {
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (drow, &w) in da.chunks_mut(n).zip(weights) {
                        if w != 0.0 {
                            drow.iter_mut().zip(g).for_each(|(d, g)| *d += w * g);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Embedding(table, ids) => {
                let n = out.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::BceWithLogits(logits, target) => {
                let zs = self.value(*logits).data();
                let inv = 1.0 / target.len() as f64;
                if let Some(dz) = self.slot(grads, *logits) {
                    for ((d, &z), &y) in dz.iter_mut().zip(zs).zip(target) {
                        *d += g[0] * (sigmoid(z) - y) * inv;
                    }
                }
            }
            Op::Cosine(u, v) => {
                let (uv, vv) = (self.value(*u).data(), self.value(*v).data());
                let (dot, nu, nv) = cosine_parts(uv, vv);
                let denom = nu * nv;
                if denom > COSINE_EPS {
                    let c = dot / denom;
                    if let Some(du) = self.slot(grads, *u) {
                        for ((d, &a), &b) in du.iter_mut().zip(uv).zip(vv) {
                            *d += g[0] * (b / denom - c * a / (nu * nu));
                        }
                    }
                    if let Some(dv) = self.slot(grads, *v) {
                        for ((d, &a), &b) in dv.iter_mut().zip(uv).zip(vv) {
                            *d += g[0] * (a / denom - c * b / (nv * nv));
                        }
                    }
                } else {
                    if let Some(du) = self.slot(grads, *u) {
                        du.iter_mut().zip(vv).for_each(|(d, b)| *d += g[0] * b / COSINE_EPS);
                    }
                    if let Some(dv) = self.slot(grads, *v) {
                        dv.iter_mut().zip(uv).for_each(|(d, a)| *d += g[0] * a / COSINE_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf (input or parameter node).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("shape"))
    }

    /// Gradient of `v`, or zeros when none has reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| self.value(v).zeros_like())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds every parameter gradient on this tape into `out`.
    pub fn accumulate_param_grads(&self, out: &mut GradStore) {
        for (i, node) in self.param_nodes.iter().enumerate() {
            let Some(v) = node else { continue };
            if let Some(g) = self.grad(*v) {
                out.accumulate(ParamId(i), &g);
            }
        }
    }

    /// Consumes the tape, moving its parameter gradients out without copying.
    pub fn into_param_grads(mut self) -> GradStore {
        let mut gs = GradStore::new(self.param_nodes.len());
        for (i, node) in self.param_nodes.iter().enumerate() {
            let Some(v) = node else { continue };
            if let Some(g) = self.leaf_grads[v.0].take() {
                let shape = self.value(*v).shape().to_vec();
                gs.accumulate_owned(ParamId(i), Tensor::new(shape, g).expect("shape"));
            }
        }
        gs
    }

    pub fn param_grads(&self) -> GradStore {
        let mut gs = GradStore::new(self.param_nodes.len());
        self.accumulate_param_grads(&mut gs);
        gs
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let dot = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    (dot, nu, nv)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
