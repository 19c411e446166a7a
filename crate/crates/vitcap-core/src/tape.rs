//! Reverse-mode autodiff on a flat tape.
//!
//! Every op appends a node holding its output tensor; node order is already
//! topological, so backward is a single reverse sweep. Parameters live in a
//! [`ParamSet`](crate::params::ParamSet) and are bound onto the tape as
//! leaves; after `backward` their gradients are pulled out with
//! [`Tape::grads_into`] or [`Tape::into_param_grads`].
//!
//! Ops only cover what the model needs: rank-1/rank-2 tensors, no views
//! (slice and transpose copy). Forward values are checked for finiteness
//! after every op so a NaN surfaces where it was produced, not three layers
//! later.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Boolean attention pattern; `allow[r * cols + c]` says row `r` may attend
/// to column `c`. Rows with nothing allowed are rejected up front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<BoolMask> {
        if allow.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask buffer has {} entries, expected {rows}x{cols}",
                allow.len()
            )));
        }
        for r in 0..rows {
            if !allow[r * cols..(r + 1) * cols].iter().any(|&a| a) {
                return Err(Error::shape(format!("mask row {r} allows nothing")));
            }
        }
        Ok(BoolMask { rows, cols, allow })
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.cols + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarRhs,
    RowRhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add(Broadcast),
    Sub(Broadcast),
    Mul(Broadcast),
    Concat { axis: usize, splits: Vec<usize> },
    Slice { r0: usize, c0: usize },
    Transpose,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    Pow { exponent: f64 },
    Mean,
    Sum,
    Embedding { ids: Arc<Vec<u32>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Pow { .. } => "pow",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Embedding { .. } => "embedding",
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<VarId>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Vec<Vec<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<usize, VarId>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one reached it.
    pub fn grad(&self, v: VarId) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, vec![], value, false, vec![])
    }

    pub fn constant_scalar(&mut self, value: f64) -> VarId {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    /// Differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, vec![], value, true, vec![])
    }

    /// Binds a parameter by name; repeated binds return the same node so
    /// tied weights accumulate into one gradient.
    pub fn param(&mut self, set: &ParamSet<T>, name: &str) -> Result<VarId> {
        let idx = set
            .index_of(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        if let Some(&id) = self.bound.get(&idx) {
            return Ok(id);
        }
        let value = set.get_at(idx).tensor.clone();
        let id = self.push(Op::Leaf, vec![], value, true, vec![]);
        self.bound.insert(idx, id);
        Ok(id)
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<VarId>,
        value: Tensor<T>,
        requires_grad: bool,
        saved: Vec<Vec<T>>,
    ) -> VarId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        op: Op,
        inputs: Vec<VarId>,
        value: Tensor<T>,
        saved: Vec<Vec<T>>,
    ) -> Result<VarId> {
        if !value.is_all_finite() {
            return Err(Error::numeric(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs, value, requires, saved))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k) = self.value(a).rows_cols()?;
        let (k2, n) = self.value(b).rows_cols()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op(Op::MatMul, vec![a, b], value, vec![])
    }

    fn broadcast_kind(&self, a: VarId, b: VarId, op: &str) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Broadcast::ScalarRhs);
        }
        let (_, ca) = self.value(a).rows_cols()?;
        let (rb, cb) = self.value(b).rows_cols()?;
        if rb == 1 && cb == ca {
            return Ok(Broadcast::RowRhs);
        }
        Err(Error::shape(format!(
            "{op} cannot broadcast {sb:?} onto {sa:?}"
        )))
    }

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        kind: fn(Broadcast) -> Op,
        f: fn(T, T) -> T,
    ) -> Result<VarId> {
        let op = kind(Broadcast::Same);
        let bc = self.broadcast_kind(a, b, op.name())?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (rows, cols) = self.value(a).rows_cols()?;
        let mut out = Vec::with_capacity(av.len());
        match bc {
            Broadcast::Same => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            Broadcast::ScalarRhs => out.extend(av.iter().map(|&x| f(x, bv[0]))),
            Broadcast::RowRhs => {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(f(av[r * cols + c], bv[c]));
                    }
                }
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(kind(bc), vec![a, b], value, vec![])
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    /// Multiply by a compile-time constant (builds a constant scalar node).
    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let k = self.constant_scalar(c);
        self.mul(a, k)
    }

    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat needs at least one input".to_string()));
        }
        if axis > 1 {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).rows_cols())
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let mut splits = Vec::with_capacity(parts.len());
        for (i, &(r, c)) in dims.iter().enumerate() {
            let (fixed_ok, split) = if axis == 0 { (c == c0, r) } else { (r == r0, c) };
            if !fixed_ok {
                return Err(Error::shape(format!(
                    "concat input {i} has shape {:?}, incompatible along axis {axis}",
                    self.shape(parts[i])
                )));
            }
            splits.push(split);
        }
        let total: usize = splits.iter().sum();
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut out = vec![T::zero(); rows * cols];
        if axis == 0 {
            let mut row = 0;
            for &p in parts {
                let v = self.value(p).data();
                out[row * cols..row * cols + v.len()].copy_from_slice(v);
                row += self.value(p).rows_cols()?.0;
            }
        } else {
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&splits) {
                let v = self.value(p).data();
                for r in 0..rows {
                    out[r * cols + col..r * cols + col + w].copy_from_slice(&v[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push_op(Op::Concat { axis, splits }, parts.to_vec(), value, vec![])
    }

    /// Copies the half-open row/column window `[r0, r1) x [c0, c1)`.
    pub fn slice(&mut self, a: VarId, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<VarId> {
        let (rows, cols) = self.value(a).rows_cols()?;
        if r1 > rows || c1 > cols || r0 >= r1 || c0 >= c1 {
            return Err(Error::shape(format!(
                "slice [{r0}..{r1}, {c0}..{c1}] out of bounds for {rows}x{cols}"
            )));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            out.extend_from_slice(&v[r * cols + c0..r * cols + c1]);
        }
        let value = Tensor::new(vec![r1 - r0, c1 - c0], out)?;
        self.push_op(Op::Slice { r0, c0 }, vec![a], value, vec![])
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.value(a).rows_cols()?;
        let v = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        self.push_op(Op::Transpose, vec![a], value, vec![])
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        self.softmax_impl(a, None)
    }

    /// Softmax where disallowed entries come out exactly zero; the row is
    /// normalized over allowed entries only.
    pub fn masked_softmax(&mut self, a: VarId, mask: &Arc<BoolMask>) -> Result<VarId> {
        let (rows, cols) = self.value(a).rows_cols()?;
        if mask.rows != rows || mask.cols != cols {
            return Err(Error::shape(format!(
                "mask {}x{} does not fit input {rows}x{cols}",
                mask.rows, mask.cols
            )));
        }
        self.softmax_impl(a, Some(Arc::clone(mask)))
    }

    fn softmax_impl(&mut self, a: VarId, mask: Option<Arc<BoolMask>>) -> Result<VarId> {
        let (rows, cols) = self.value(a).rows_cols()?;
        let v = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let allow = |c: usize| mask.as_ref().map_or(true, |m| m.allows(r, c));
            let mut maxv = T::neg_infinity();
            for c in 0..cols {
                if allow(c) && row[c] > maxv {
                    maxv = row[c];
                }
            }
            let mut sum = T::zero();
            for c in 0..cols {
                if allow(c) {
                    let e = (row[c] - maxv).exp();
                    out[r * cols + c] = e;
                    sum = sum + e;
                }
            }
            for c in 0..cols {
                if allow(c) {
                    out[r * cols + c] = out[r * cols + c] / sum;
                }
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Softmax, vec![a], value, vec![])
    }

    pub fn log_softmax(&mut self, a: VarId) -> Result<VarId> {
        let (rows, cols) = self.value(a).rows_cols()?;
        let v = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            log_softmax_row(&v[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::LogSoftmax, vec![a], value, vec![])
    }

    /// Normalizes each row of `x`, then scales by `gamma` and shifts by
    /// `beta` (both rank-1 of the row width). Variance is biased.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (rows, cols) = self.value(x).rows_cols()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != cols || self.value(v).rank() != 1 {
                return Err(Error::shape(format!(
                    "layer_norm {name} must be rank-1 of length {cols}, got {:?}",
                    self.shape(v)
                )));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut invstd = vec![T::zero(); rows];
        let n = T::from_f64(cols as f64);
        let epsv = T::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let is = T::one() / (var + epsv).sqrt();
            invstd[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push_op(
            Op::LayerNorm,
            vec![x, gamma, beta],
            value,
            vec![xhat, invstd],
        )
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Gelu, vec![a], value, vec![])
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Sigmoid, vec![a], value, vec![])
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Log, vec![a], value, vec![])
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if !(lo < hi) {
            return Err(Error::config(format!("clamp needs lo < hi, got [{lo}, {hi}]")));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x < l { l } else if x > h { h } else { x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Clamp { lo, hi }, vec![a], value, vec![])
    }

    pub fn pow(&mut self, a: VarId, exponent: f64) -> Result<VarId> {
        let e = T::from_f64(exponent);
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.powf(e)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_op(Op::Pow { exponent }, vec![a], value, vec![])
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor".to_string()));
        }
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let value = Tensor::scalar(s / T::from_f64(n as f64));
        self.push_op(Op::Mean, vec![a], value, vec![])
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let value = Tensor::scalar(s);
        self.push_op(Op::Sum, vec![a], value, vec![])
    }

    /// Gathers rows of `weight` (shape `[vocab, dim]`) by token id.
    pub fn embedding(&mut self, weight: VarId, ids: &[u32]) -> Result<VarId> {
        let (vocab, dim) = self.value(weight).rows_cols()?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids".to_string()));
        }
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::shape(format!(
                    "token id {id} out of range for vocab of {vocab}"
                )));
            }
        }
        let w = self.value(weight).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let r = id as usize;
            out.extend_from_slice(&w[r * dim..(r + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        self.push_op(
            Op::Embedding {
                ids: Arc::new(ids.to_vec()),
            },
            vec![weight],
            value,
            vec![],
        )
    }

    /// `x @ w + b` with `b` added to every row.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    fn grad_buf(&mut self, v: VarId) -> &mut Vec<T> {
        let numel = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn add_grad(&mut self, v: VarId, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(v);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst = *dst + *src;
        }
    }

    /// Reverse sweep from a scalar node. May only run once per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::config(
                "backward already ran on this tape".to_string(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.node_backward(i, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn node_backward(&mut self, i: usize, dy: &[T]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let inputs = self.nodes[i].inputs.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = self.value(a).rows_cols()?;
                let n = self.value(b).rows_cols()?.1;
                if self.nodes[a.0].requires_grad {
                    // dA = dC . B^T
                    let bv = self.value(b).data();
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let d = dy[r * n + j];
                            if d != T::zero() {
                                for c in 0..k {
                                    da[r * k + c] = da[r * k + c] + d * bv[c * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T . dC
                    let av = self.value(a).data();
                    let mut db = vec![T::zero(); k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let x = av[r * k + c];
                            if x != T::zero() {
                                for j in 0..n {
                                    db[c * n + j] = db[c * n + j] + x * dy[r * n + j];
                                }
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Add(bc) => {
                self.add_grad(inputs[0], dy);
                self.reduce_rhs_grad(inputs[0], inputs[1], dy, bc, false, None)?;
            }
            Op::Sub(bc) => {
                self.add_grad(inputs[0], dy);
                self.reduce_rhs_grad(inputs[0], inputs[1], dy, bc, true, None)?;
            }
            Op::Mul(bc) => {
                let (a, b) = (inputs[0], inputs[1]);
                let (rows, cols) = self.value(a).rows_cols()?;
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(b).data();
                    let da: Vec<T> = match bc {
                        Broadcast::Same => dy.iter().zip(bv).map(|(&d, &y)| d * y).collect(),
                        Broadcast::ScalarRhs => dy.iter().map(|&d| d * bv[0]).collect(),
                        Broadcast::RowRhs => (0..rows * cols)
                            .map(|idx| dy[idx] * bv[idx % cols])
                            .collect(),
                    };
                    self.add_grad(a, &da);
                }
                let av = self.value(a).data().to_vec();
                self.reduce_rhs_grad(a, b, dy, bc, false, Some(&av))?;
            }
            Op::Concat { axis, splits } => {
                let cols = self.value(VarId(i)).rows_cols()?.1;
                if axis == 0 {
                    let mut row = 0;
                    for (&p, &h) in inputs.iter().zip(&splits) {
                        let start = row * cols;
                        self.add_grad(p, &dy[start..start + h * cols]);
                        row += h;
                    }
                } else {
                    let rows = self.value(VarId(i)).rows_cols()?.0;
                    let mut col = 0;
                    for (&p, &w) in inputs.iter().zip(&splits) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * cols + col..r * cols + col + w]);
                        }
                        self.add_grad(p, &dp);
                        col += w;
                    }
                }
            }
            Op::Slice { r0, c0 } => {
                let a = inputs[0];
                let (_, in_cols) = self.value(a).rows_cols()?;
                let (out_rows, out_cols) = self.value(VarId(i)).rows_cols()?;
                let mut da = vec![T::zero(); self.value(a).numel()];
                for r in 0..out_rows {
                    for c in 0..out_cols {
                        da[(r + r0) * in_cols + (c + c0)] = dy[r * out_cols + c];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Transpose => {
                let a = inputs[0];
                let (rows, cols) = self.value(a).rows_cols()?;
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = dy[c * rows + r];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Softmax => {
                let a = inputs[0];
                let (rows, cols) = self.value(VarId(i)).rows_cols()?;
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut s = T::zero();
                    for c in 0..cols {
                        s = s + dy[r * cols + c] * y[r * cols + c];
                    }
                    for c in 0..cols {
                        da[r * cols + c] = y[r * cols + c] * (dy[r * cols + c] - s);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LogSoftmax => {
                let a = inputs[0];
                let (rows, cols) = self.value(VarId(i)).rows_cols()?;
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut s = T::zero();
                    for c in 0..cols {
                        s = s + dy[r * cols + c];
                    }
                    for c in 0..cols {
                        let p = y[r * cols + c].exp();
                        da[r * cols + c] = dy[r * cols + c] - p * s;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let (rows, cols) = self.value(x).rows_cols()?;
                let xhat = &self.nodes[i].saved[0];
                let invstd = &self.nodes[i].saved[1];
                let gv = self.value(gamma).data();
                let n = T::from_f64(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    let mut gsum = T::zero();
                    let mut gxsum = T::zero();
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let g = dy[idx] * gv[c];
                        gsum = gsum + g;
                        gxsum = gxsum + g * xhat[idx];
                        dg[c] = dg[c] + dy[idx] * xhat[idx];
                        db[c] = db[c] + dy[idx];
                    }
                    let gmean = gsum / n;
                    let gxmean = gxsum / n;
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let g = dy[idx] * gv[c];
                        dx[idx] = invstd[r] * (g - gmean - xhat[idx] * gxmean);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dg);
                self.add_grad(beta, &db);
            }
            Op::Gelu => {
                let a = inputs[0];
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| d * gelu_grad_scalar(x))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid => {
                let y = self.nodes[i].value.data();
                let da: Vec<T> = y
                    .iter()
                    .zip(dy)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                self.add_grad(inputs[0], &da);
            }
            Op::Log => {
                let a = inputs[0];
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| d / x)
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Clamp { lo, hi } => {
                let a = inputs[0];
                let (l, h) = (T::from_f64(lo), T::from_f64(hi));
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > l && x < h { d } else { T::zero() })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Pow { exponent } => {
                let a = inputs[0];
                if exponent != 0.0 {
                    let e = T::from_f64(exponent);
                    let da: Vec<T> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &d)| d * e * x.powf(e - T::one()))
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Mean => {
                let a = inputs[0];
                let n = T::from_f64(self.value(a).numel() as f64);
                let g = dy[0] / n;
                let da = vec![g; self.value(a).numel()];
                self.add_grad(a, &da);
            }
            Op::Sum => {
                let a = inputs[0];
                let da = vec![dy[0]; self.value(a).numel()];
                self.add_grad(a, &da);
            }
            Op::Embedding { ids } => {
                let w = inputs[0];
                let (_, dim) = self.value(w).rows_cols()?;
                let mut dw = vec![T::zero(); self.value(w).numel()];
                for (l, &id) in ids.iter().enumerate() {
                    let r = id as usize;
                    for c in 0..dim {
                        dw[r * dim + c] = dw[r * dim + c] + dy[l * dim + c];
                    }
                }
                self.add_grad(w, &dw);
            }
        }
        Ok(())
    }

    fn reduce_rhs_grad(
        &mut self,
        a: VarId,
        b: VarId,
        dy: &[T],
        bc: Broadcast,
        negate: bool,
        mul_lhs: Option<&[T]>,
    ) -> Result<()> {
        if !self.nodes[b.0].requires_grad {
            return Ok(());
        }
        let (rows, cols) = self.value(a).rows_cols()?;
        let term = |idx: usize| -> T {
            let d = match mul_lhs {
                Some(av) => dy[idx] * av[idx],
                None => dy[idx],
            };
            if negate {
                -d
            } else {
                d
            }
        };
        let db: Vec<T> = match bc {
            Broadcast::Same => (0..rows * cols).map(term).collect(),
            Broadcast::ScalarRhs => {
                let mut s = T::zero();
                for idx in 0..rows * cols {
                    s = s + term(idx);
                }
                vec![s]
            }
            Broadcast::RowRhs => {
                let mut out = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[c] = out[c] + term(r * cols + c);
                    }
                }
                out
            }
        };
        self.add_grad(b, &db);
        Ok(())
    }

    /// Accumulates gradients of bound parameters into the set.
    pub fn grads_into(&self, set: &mut ParamSet<T>) -> Result<()> {
        for (&idx, &var) in &self.bound {
            if let Some(g) = self.grads[var.0].as_deref() {
                set.get_at_mut(idx).tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Consumes the tape, returning `(param index, gradient)` pairs sorted
    /// by parameter index so batch reduction order is fixed.
    pub fn into_param_grads(mut self) -> Vec<(usize, Vec<T>)> {
        let bound = std::mem::take(&mut self.bound);
        let mut out: Vec<(usize, Vec<T>)> = bound
            .into_iter()
            .filter_map(|(idx, var)| self.grads[var.0].take().map(|g| (idx, g)))
            .collect();
        out.sort_by_key(|(idx, _)| *idx);
        out
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let x = a[i * k + kk];
            if x == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + x * brow[j];
            }
        }
    }
}

/// Numerically stable log-softmax of one row. The decoder's scoring paths
/// reuse this exact routine so tape and plain evaluations agree bit for bit.
pub fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut maxv = T::neg_infinity();
    for &v in row {
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let s = v - maxv;
        *o = s;
        sum = sum + s.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o = *o - lse;
    }
}

pub fn log_softmax_vec<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); row.len()];
    log_softmax_row(row, &mut out);
    out
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_equal_logits_are_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]));
        let s = tape.softmax(a).unwrap();
        let v = tape.value(s).data();
        for r in 0..2 {
            let sum: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((v[c] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_exactly() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[100.0, 1.0, 2.0, 0.0, 0.0, 0.0]));
        let mask = Arc::new(
            BoolMask::new(2, 3, vec![false, true, true, true, true, false]).unwrap(),
        );
        let s = tape.masked_softmax(a, &mask).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-12 && (v[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mask_rejects_empty_row() {
        let err = BoolMask::new(1, 2, vec![false, false]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![0.0f64, 1.0]).unwrap());
        let g = tape.gelu(a).unwrap();
        let v = tape.value(g).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.8411919906082768).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let b = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1], vec![0.0f64]).unwrap());
        assert!(matches!(tape.log(a), Err(Error::Numeric(_))));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let left = tape.slice(a, 0, 2, 0, 2).unwrap();
        let right = tape.slice(a, 0, 2, 2, 4).unwrap();
        let back = tape.concat(1, &[left, right]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn embedding_gathers_rows() {
        let mut tape = Tape::new();
        let w = tape.constant(t2(3, 2, &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let e = tape.embedding(w, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        assert!(matches!(tape.embedding(w, &[3]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0f64));
        let l = tape.mul(a, a).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0]);
        assert!(matches!(tape.backward(l), Err(Error::Config(_))));
    }

    #[test]
    fn backward_needs_scalar_target() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn tied_binding_accumulates_into_one_grad() {
        use crate::params::{ParamGroup, ParamSet};
        let mut set = ParamSet::new();
        set.insert("w", ParamGroup::Decoder, Tensor::new(vec![1], vec![3.0f64]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w1 = tape.param(&set, "w").unwrap();
        let w2 = tape.param(&set, "w").unwrap();
        assert_eq!(w1, w2);
        let l = tape.mul(w1, w2).unwrap();
        tape.backward(l).unwrap();
        tape.grads_into(&mut set).unwrap();
        let g = set.get("w").unwrap().tensor.grad.as_deref().unwrap();
        assert_eq!(g, &[6.0]);
    }
}
