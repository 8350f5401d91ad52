//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends one
//! node holding its output value and enough of its inputs to evaluate the
//! local vector-Jacobian product; [`Tape::backward`] walks the nodes once in
//! reverse append order.

use std::ops::Index;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Lower clamp applied to the argument of `ln`, to denominators and to norms.
pub const EPS: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    BatchMatVec { keys: Var, query: Var, group: usize },
    BatchVecMat { weights: Var, values: Var, group: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape variables for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl Index<ParamId> for BoundParams {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Execution,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
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

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Snapshots every parameter onto the tape as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> BoundParams {
        let vars = store.values().iter().map(|t| self.leaf(t.clone())).collect();
        BoundParams { vars }
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.exec,
            (m, k, n),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            &mut out,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_2d("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    fn zip_with(
        &self,
        a: Var,
        b: Var,
        n: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        (0..n)
            .map(|i| f(da[if da.len() == 1 { 0 } else { i }], db[if db.len() == 1 { 0 } else { i }]))
            .collect()
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("add", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x + y);
        self.push("add", shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("mul", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x * y);
        self.push("mul", shape, out, Op::Mul(a, b), &[a, b])
    }

    /// `a / max(b, EPS)`; the denominator is expected to be positive.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("div", a, b)?;
        let n = shape.iter().product();
        let out = self.zip_with(a, b, n, |x, y| x / y.max(EPS));
        self.push("div", shape, out, Op::Div(a, b), &[a, b])
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push("offset", shape, out, Op::Offset(x), &[x])
    }

    /// Multiplies row `i` of `x` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (row, f) in out.chunks_mut(cols).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let shape = t.shape().to_vec();
        self.push("scale_rows", shape, out, Op::ScaleRows(x, factors), &[x])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, out, op, &[x])
    }

    /// `max(0, x)` elementwise; on a one-element tensor this is the scalar hinge.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    /// `ln(max(x, EPS))`.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, Op::Ln(x), |v| v.max(EPS).ln())
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary("cos", x, Op::Cos(x), f64::cos)
    }

    // ---- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Concatenation along the last axis. All parts share their leading axes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.value(first).shape();
        let lead = lead[..lead.len() - 1].to_vec();
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err("concat", first, p));
            }
        }
        let rows = self.value(first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("reshape", shape, data, Op::Reshape(x), &[x])
    }

    /// Rows of `x` (leading axes flattened) at `idx`, as `[idx.len(), cols]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::invalid(format!(
                "select_rows: indices {idx:?} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "select_rows",
            vec![idx.len(), cols],
            out,
            Op::SelectRows(x, idx.to_vec()),
            &[x],
        )
    }

    // ---- row-wise normalizations ---------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Divides each row by `max(||row||, EPS)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let shape = t.shape().to_vec();
        self.push("l2_normalize", shape, out, Op::L2Normalize(x), &[x])
    }

    // ---- grouped attention primitives ----------------------------------

    /// `keys: [G*group, d]`, `query: [G, d]` -> `[G, group]` of dot products
    /// between each query row and the keys of its group.
    pub fn batch_matvec(&mut self, keys: Var, query: Var, group: usize) -> Result<Var> {
        let (kr, d) = self.require_2d("batch_matvec", keys)?;
        let (g, d2) = self.require_2d("batch_matvec", query)?;
        if d != d2 || group == 0 || kr != g * group {
            return Err(self.shape_err("batch_matvec", keys, query));
        }
        let (kd, qd) = (self.value(keys).data(), self.value(query).data());
        let mut out = vec![0.0; g * group];
        for gi in 0..g {
            let q = &qd[gi * d..(gi + 1) * d];
            for s in 0..group {
                let r = gi * group + s;
                out[r] = dot(&kd[r * d..(r + 1) * d], q);
            }
        }
        self.push(
            "batch_matvec",
            vec![g, group],
            out,
            Op::BatchMatVec { keys, query, group },
            &[keys, query],
        )
    }

    /// `weights: [G, group]`, `values: [G*group, d]` -> `[G, d]` of
    /// weighted sums of each group's value rows.
    pub fn batch_vecmat(&mut self, weights: Var, values: Var, group: usize) -> Result<Var> {
        let (g, s) = self.require_2d("batch_vecmat", weights)?;
        let (vr, d) = self.require_2d("batch_vecmat", values)?;
        if s != group || vr != g * group {
            return Err(self.shape_err("batch_vecmat", weights, values));
        }
        let (wd, vd) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            let o = &mut out[gi * d..(gi + 1) * d];
            for si in 0..group {
                let r = gi * group + si;
                let w = wd[r];
                if w != 0.0 {
                    axpy(w, &vd[r * d..(r + 1) * d], o);
                }
            }
        }
        self.push(
            "batch_vecmat",
            vec![g, d],
            out,
            Op::BatchVecMat { weights, values, group },
            &[weights, values],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                lhs: lt.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.needs_grad => {
                    g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    gemm(self.exec, (m, n, k), (g, n as isize, 1), (self.value(*b).data(), 1, n as isize), &mut da);
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    gemm(self.exec, (k, m, n), (self.value(*a).data(), 1, k as isize), (g, n as isize, 1), &mut db);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, reduce_broadcast(self.value(v).len(), g.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                let n = g.len();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], i: usize| d[if d.len() == 1 { 0 } else { i }];
                let ga = (0..n).map(|i| g[i] * pick(db, i)).collect();
                let gb = (0..n).map(|i| g[i] * pick(da, i)).collect();
                acc(*a, reduce_broadcast(da.len(), ga));
                acc(*b, reduce_broadcast(db.len(), gb));
            }
            Op::Div(a, b) => {
                let n = g.len();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], i: usize| d[if d.len() == 1 { 0 } else { i }];
                let ga = (0..n).map(|i| g[i] / pick(db, i).max(EPS)).collect();
                let gb = (0..n)
                    .map(|i| {
                        let y = pick(db, i);
                        if y >= EPS {
                            -g[i] * pick(da, i) / (y * y)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*a, reduce_broadcast(da.len(), ga));
                acc(*b, reduce_broadcast(db.len(), gb));
            }
            Op::AddBias(x, b) => {
                let cols = self.value(*b).len();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Offset(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::ScaleRows(x, f) => {
                let cols = node.value.cols();
                let mut d = g.to_vec();
                for (row, s) in d.chunks_mut(cols).zip(f) {
                    row.iter_mut().for_each(|v| *v *= s);
                }
                acc(*x, d);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &x)| g * sign(x)).collect());
            }
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Ln(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, &x)| if x >= EPS { g / x } else { 0.0 }).collect());
            }
            Op::Cos(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(g, x)| -g * x.sin()).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let s = dot(gr, yr);
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*x, d);
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, d);
            }
            Op::L2Normalize(x) => {
                let cols = node.value.cols();
                let xd = self.value(*x).data();
                let mut d = vec![0.0; g.len()];
                for r in 0..g.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let (xr, yr, gr) = (&xd[span.clone()], &out[span.clone()], &g[span.clone()]);
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dr = &mut d[span];
                    if n >= EPS {
                        let proj = dot(yr, gr);
                        for j in 0..cols {
                            dr[j] = (gr[j] - yr[j] * proj) / n;
                        }
                    } else {
                        for j in 0..cols {
                            dr[j] = gr[j] / EPS;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::SelectRows(x, idx) => {
                let cols = node.value.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g[k * cols + j];
                    }
                }
                acc(*x, d);
            }
            Op::BatchMatVec { keys, query, group } => {
                let (kd, qd) = (self.value(*keys).data(), self.value(*query).data());
                let d = self.value(*query).cols();
                let groups = self.value(*query).rows();
                if self.nodes[keys.0].needs_grad {
                    let mut dk = vec![0.0; kd.len()];
                    for gi in 0..groups {
                        let q = &qd[gi * d..(gi + 1) * d];
                        for s in 0..*group {
                            let r = gi * group + s;
                            if g[r] != 0.0 {
                                axpy(g[r], q, &mut dk[r * d..(r + 1) * d]);
                            }
                        }
                    }
                    acc(*keys, dk);
                }
                if self.nodes[query.0].needs_grad {
                    let mut dq = vec![0.0; qd.len()];
                    for gi in 0..groups {
                        let o = &mut dq[gi * d..(gi + 1) * d];
                        for s in 0..*group {
                            let r = gi * group + s;
                            if g[r] != 0.0 {
                                axpy(g[r], &kd[r * d..(r + 1) * d], o);
                            }
                        }
                    }
                    acc(*query, dq);
                }
            }
            Op::BatchVecMat { weights, values, group } => {
                let (wd, vd) = (self.value(*weights).data(), self.value(*values).data());
                let d = node.value.cols();
                let groups = node.value.rows();
                if self.nodes[weights.0].needs_grad {
                    let mut dw = vec![0.0; wd.len()];
                    for gi in 0..groups {
                        let go = &g[gi * d..(gi + 1) * d];
                        for s in 0..*group {
                            let r = gi * group + s;
                            dw[r] = dot(go, &vd[r * d..(r + 1) * d]);
                        }
                    }
                    acc(*weights, dw);
                }
                if self.nodes[values.0].needs_grad {
                    let mut dv = vec![0.0; vd.len()];
                    for gi in 0..groups {
                        let go = &g[gi * d..(gi + 1) * d];
                        for s in 0..*group {
                            let r = gi * group + s;
                            if wd[r] != 0.0 {
                                axpy(wd[r], go, &mut dv[r * d..(r + 1) * d]);
                            }
                        }
                    }
                    acc(*values, dv);
                }
            }
        }
    }
}

/// Gradients of the differentiable leaves reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// One gradient per stored parameter, in store order.
    pub fn for_params(&self, tape: &Tape, bound: &BoundParams) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| self.wrt(tape, v)).collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduce_broadcast(target_len: usize, g: Vec<f64>) -> Vec<f64> {
    if target_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Below this many multiply-adds a product stays on the calling thread.
const PARALLEL_GEMM_WORK: usize = 1 << 20;

/// `c[m, n] = a[m, k] * b[k, n]` with arbitrary strides for `a` and `b`;
/// `c` is dense row-major and overwritten.
fn gemm(
    exec: Execution,
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let block = |row0: usize, rows: usize, c: &mut [f64]| {
        // SAFETY: the strides describe in-bounds views of `a` (rows
        // row0..row0+rows), `b` and `c`, which are valid for the call.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if exec.is_parallel() && m * k * n >= PARALLEL_GEMM_WORK && m > 1 {
        let rows_per = m.div_ceil(4 * current_threads()).max(1);
        parallel::for_each_chunk_mut(exec, c, rows_per * n, |i, chunk| {
            block(i * rows_per, chunk.len() / n, chunk);
        });
    } else {
        block(0, m, c);
    }
}

fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
