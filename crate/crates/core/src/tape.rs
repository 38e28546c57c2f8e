//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. `backward` walks the nodes in reverse and accumulates gradients
//! into leaves. The op set is closed; model code composes everything else
//! from it.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    Log,
    Exp,
    Sum,
    Mean,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Relu,
    Tanh,
    Sigmoid,
    L2Normalize,
    LayerNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::L2Normalize,
        OpKind::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::LayerNorm => "layer_norm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the right operand of a binary op is broadcast onto the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Self> {
        if a == b {
            Ok(Bcast::Same)
        } else if b == (1, 1) {
            Ok(Bcast::Scalar)
        } else if b == (1, a.1) {
            Ok(Bcast::Row)
        } else if b == (a.0, 1) {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(op, &[a.0, a.1], &[b.0, b.1]))
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, S),
    Softmax(Var),
    Log(Var, S),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    L2Normalize(Var, S),
    LayerNorm(Var, S),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::LayerNorm(..) => OpKind::LayerNorm,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradient tape for a single forward pass.
///
/// Parameters are copied onto the tape on first use and bound to their
/// [`ParamId`], so a parameter used from several places (the shared RGB
/// attention block, for instance) is a single leaf and receives the sum of
/// all path gradients.
pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    bound: Vec<Option<Var>>,
    fault: Option<OpKind>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: vec![None; params.len()],
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    /// Doubles the backward contribution of every node of `kind`.
    ///
    /// Exists so gradient checks can be shown to catch a broken derivative.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.shape(v)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        let value = value.into_matrix()?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: S) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf, false)
    }

    /// Binds a stored parameter, reusing the same leaf on repeated calls.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self
            .params
            .get(id)
            .value
            .clone()
            .into_matrix()
            .expect("parameters are at most rank 2");
        let v = self.push(value, Op::Leaf, true);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.grad(v)?.clone();
                Some((ParamId(i), g))
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose().expect("tape values are matrices");
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, Bcast)> {
        let (m, n) = self.dims(a);
        let bc = Bcast::resolve(name, (m, n), self.dims(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(f(av[i * n + j], bv[bc.index(i, j, n)]));
            }
        }
        Ok((Tensor::matrix(m, n, out)?, bc))
    }

    /// `a + b`, with `b` broadcast as a row, column or scalar when smaller.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (m, n) = self.dims(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, S::zero())
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: S) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a, floor), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::scalar(x.sum() / S::of(x.len() as f64));
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); n];
        for row in x.chunks(n.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = S::one() / S::of(m as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", &[m, n], &[pm, pn]));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let m = self.dims(first).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", &[m, n], &[pm, pn]));
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m || len == 0 {
            return Err(Error::shape("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, n, data)?, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let eps = S::of(1e-12);
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let norm = (row.iter().map(|&v| v * v).sum::<S>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).expect("same shape"), Op::L2Normalize(a, eps), rg)
    }

    /// Per-row standardization (no affine part; compose with `mul`/`add`).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let eps = S::of(1e-5);
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let (mu, inv) = row_stats(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(m, n, out).expect("same shape"), Op::LayerNorm(a, eps), rg)
    }

    /// Accumulates `∂root/∂leaf` into every leaf that requires a gradient.
    ///
    /// Repeated calls add to the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.dims(root) != (1, 1) {
            let (r, c) = self.dims(root);
            return Err(Error::Contract(format!("backward from a non-scalar root of shape {r}×{c}")));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut g: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        g[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(mut gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                gi.iter_mut().for_each(|v| *v = *v + *v);
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    None => {
                        let shape = node.value.shape().to_vec();
                        self.grads[i] = Some(Tensor::new(&shape, gi).expect("grad shape"));
                    }
                }
                continue;
            }
            propagate(&self.nodes, &mut g, i, &gi);
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn row_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::of(row.len() as f64);
    let mu = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
    (mu, S::one() / (var + eps).sqrt())
}

/// Gradient buffer of `v`, created on first touch; `None` when `v` needs no gradient.
fn slot<'g, S: Scalar>(nodes: &[Node<S>], g: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(g[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

fn reduce_bcast<S: Scalar>(dst: &mut [S], src: &[S], bc: Bcast, m: usize, n: usize, sign: S) {
    for i in 0..m {
        for j in 0..n {
            dst[bc.index(i, j, n)] += sign * src[i * n + j];
        }
    }
}

fn propagate<S: Scalar>(nodes: &[Node<S>], g: &mut [Option<Vec<S>>], i: usize, gi: &[S]) {
    let out = &nodes[i].value;
    let (m, n) = (out.shape()[0], out.shape()[1]);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let k = av.shape()[1];
            if let Some(da) = slot(nodes, g, *a) {
                matmul_nt_into(gi, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, g, *b) {
                matmul_tn_into(av.data(), gi, db, k, m, n);
            }
        }
        Op::Transpose(a) => {
            if let Some(da) = slot(nodes, g, *a) {
                // out is m×n, input is n×m
                for r in 0..m {
                    for c in 0..n {
                        da[c * m + r] += gi[r * n + c];
                    }
                }
            }
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -S::one() } else { S::one() };
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().zip(gi).for_each(|(d, &v)| *d += v);
            }
            if let Some(db) = slot(nodes, g, *b) {
                reduce_bcast(db, gi, *bc, m, n, sign);
            }
        }
        Op::Mul(a, b, bc) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(da) = slot(nodes, g, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += gi[r * n + c] * bv[bc.index(r, c, n)];
                    }
                }
            }
            if let Some(db) = slot(nodes, g, *b) {
                for r in 0..m {
                    for c in 0..n {
                        db[bc.index(r, c, n)] += gi[r * n + c] * av[r * n + c];
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().zip(gi).for_each(|(d, &v)| *d += v * *s);
            }
        }
        Op::Softmax(a) => {
            if let Some(da) = slot(nodes, g, *a) {
                let y = out.data();
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gi[r * n..(r + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        da[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::Log(a, floor) => {
            let x = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, g, *a) {
                for (k, d) in da.iter_mut().enumerate() {
                    if x[k] > *floor {
                        *d += gi[k] / x[k];
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().enumerate().for_each(|(k, d)| *d += gi[k] * y[k]);
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().for_each(|d| *d += gi[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(nodes, g, *a) {
                let s = gi[0] / S::of(da.len() as f64);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MeanRows(a) => {
            let rows = nodes[a.0].value.shape()[0];
            if let Some(da) = slot(nodes, g, *a) {
                let inv = S::one() / S::of(rows as f64);
                for row in da.chunks_mut(n.max(1)) {
                    row.iter_mut().zip(gi).for_each(|(d, &v)| *d += v * inv);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(dp) = slot(nodes, g, *p) {
                    dp.iter_mut().zip(&gi[offset..offset + len]).for_each(|(d, &v)| *d += v);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col = 0;
            for p in parts {
                let pn = nodes[p.0].value.shape()[1];
                if let Some(dp) = slot(nodes, g, *p) {
                    for r in 0..m {
                        for c in 0..pn {
                            dp[r * pn + c] += gi[r * n + col + c];
                        }
                    }
                }
                col += pn;
            }
        }
        Op::SliceRows(a, start) => {
            if let Some(da) = slot(nodes, g, *a) {
                da[start * n..(start + m) * n].iter_mut().zip(gi).for_each(|(d, &v)| *d += v);
            }
        }
        Op::SliceCols(a, start) => {
            let an = nodes[a.0].value.shape()[1];
            if let Some(da) = slot(nodes, g, *a) {
                for r in 0..m {
                    for c in 0..n {
                        da[r * an + start + c] += gi[r * n + c];
                    }
                }
            }
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, g, *a) {
                for (k, d) in da.iter_mut().enumerate() {
                    if x[k] > S::zero() {
                        *d += gi[k];
                    }
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().enumerate().for_each(|(k, d)| *d += gi[k] * (S::one() - y[k] * y[k]));
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            if let Some(da) = slot(nodes, g, *a) {
                da.iter_mut().enumerate().for_each(|(k, d)| *d += gi[k] * y[k] * (S::one() - y[k]));
            }
        }
        Op::L2Normalize(a, eps) => {
            let x = nodes[a.0].value.data();
            let y = out.data();
            if let Some(da) = slot(nodes, g, *a) {
                for r in 0..m {
                    let xr = &x[r * n..(r + 1) * n];
                    let norm = (xr.iter().map(|&v| v * v).sum::<S>() + *eps).sqrt();
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gi[r * n..(r + 1) * n];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..n {
                        da[r * n + c] += (gr[c] - yr[c] * dot) / norm;
                    }
                }
            }
        }
        Op::LayerNorm(a, eps) => {
            let x = nodes[a.0].value.data();
            let y = out.data();
            if let Some(da) = slot(nodes, g, *a) {
                let nn = S::of(n as f64);
                for r in 0..m {
                    let (_, inv) = row_stats(&x[r * n..(r + 1) * n], *eps);
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gi[r * n..(r + 1) * n];
                    let gmean = gr.iter().copied().sum::<S>() / nn;
                    let gymean = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<S>() / nn;
                    for c in 0..n {
                        da[r * n + c] += inv * (gr[c] - gmean - yr[c] * gymean);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty() -> ParamStore<f64> {
        ParamStore::new()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn matmul_identity_and_dot() {
        let store = empty();
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let i = t.constant(Tensor::identity(2)).unwrap();
        let p = t.matmul(a, i).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]])).unwrap();
        let c = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]])).unwrap();
        let d = t.matmul(r, c).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random(&mut rng, 7, 5), random(&mut rng, 5, 3));
        let store = empty();
        let mut t = Tape::new(&store);
        let (va, vb) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
        let p = t.matmul(va, vb).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((t.value(p).at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = empty();
        let mut t = Tape::new(&store);
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let store = empty();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3] < 1e-300 && v.iter().all(|x| x.is_finite()));

        let nan = t.constant(Tensor::row_vector(vec![f64::NAN, 0.0])).unwrap();
        assert!(matches!(t.softmax_rows(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 9);
        let store = empty();
        let mut t = Tape::new(&store);
        let v = t.constant(x.clone()).unwrap();
        let y = t.softmax_rows(v).unwrap();
        for i in 0..6 {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..9 {
                assert!((t.value(y).at(i, j) - x.at(i, j).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let store = empty();
        let mut t = Tape::new(&store);
        let x = t.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]), true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let root = t.sum(sq);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // a second call accumulates
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradient() {
        let store = empty();
        let mut t = Tape::new(&store);
        let x = t.leaf(Tensor::row_vector(vec![1.0, 2.0]), true).unwrap();
        let c = t.constant(Tensor::row_vector(vec![5.0, 6.0])).unwrap();
        let zero = t.scale(x, 0.0);
        let s = t.add(c, zero).unwrap();
        let root = t.sum(s);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let store = empty();
        let mut t = Tape::new(&store);
        let x = t.leaf(Tensor::row_vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_shapes() {
        let store = empty();
        let mut t = Tape::new(&store);
        let a = t.leaf(Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64), true).unwrap();
        let row = t.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]), true).unwrap();
        let col = t.leaf(Tensor::from_rows(&[vec![10.0], vec![20.0]]), true).unwrap();
        let s = t.leaf(Tensor::scalar(0.5), true).unwrap();
        let x = t.add(a, row).unwrap();
        let x = t.mul(x, col).unwrap();
        let x = t.mul(x, s).unwrap();
        assert_eq!(t.value(x).data(), &[5.0, 15.0, 25.0, 40.0, 60.0, 80.0]);
        let root = t.sum(x);
        t.backward(root).unwrap();
        assert_eq!(t.grad(row).unwrap().data(), &[15.0, 15.0, 15.0]);
        assert_eq!(t.grad(col).unwrap().data(), &[4.5, 9.0]);
        assert_eq!(t.grad(s).unwrap().data(), &[450.0]);
        let bad = t.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn shared_leaf_accumulates_across_paths() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(3.0)).unwrap();
        let mut t = Tape::new(&store);
        let a = t.param(w);
        let b = t.param(w);
        assert_eq!(a, b);
        let p = t.mul(a, b).unwrap();
        t.backward(p).unwrap();
        let grads = t.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[6.0]);
    }

    fn graph_a(t: &mut Tape<'_, f64>, x: Var) -> Var {
        let y = t.tanh(x);
        t.sum(y)
    }

    fn graph_b(t: &mut Tape<'_, f64>, x: Var) -> Var {
        let y = t.mul(x, x).unwrap();
        let y = t.exp(y);
        t.mean(y)
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let x0 = Tensor::row_vector(vec![0.3, -0.7, 1.1]);
        let store = empty();
        let separate: Vec<f64> = {
            let mut t = Tape::new(&store);
            let x = t.leaf(x0.clone(), true).unwrap();
            let a = graph_a(&mut t, x);
            let b = graph_b(&mut t, x);
            t.backward(a).unwrap();
            t.backward(b).unwrap();
            t.grad(x).unwrap().data().to_vec()
        };
        let mut t = Tape::new(&store);
        let x = t.leaf(x0, true).unwrap();
        let a = graph_a(&mut t, x);
        let b = graph_b(&mut t, x);
        let s = t.add(a, b).unwrap();
        t.backward(s).unwrap();
        for (p, q) in t.grad(x).unwrap().data().iter().zip(&separate) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_and_l2_normalize_values() {
        let store = empty();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 5.0]])).unwrap();
        let n = t.l2_normalize_rows(x);
        assert!((t.value(n).at(0, 0) - 0.6).abs() < 1e-12);
        let l = t.layer_norm_rows(x);
        let row = t.value(l).row(1);
        assert!((row[0] + row[1]).abs() < 1e-12);
        assert!((row[0] + 1.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let data = vals[..rows * cols].to_vec();
            let store = empty();
            let mut t = Tape::new(&store);
            let x = t.constant(Tensor::matrix(rows, cols, data).unwrap()).unwrap();
            let y = t.softmax_rows(x).unwrap();
            for i in 0..rows {
                let s: f64 = t.value(y).row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(t.value(y).row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn gradients_are_finite(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let store = empty();
            let mut t = Tape::new(&store);
            let x = t.leaf(Tensor::matrix(3, 4, vals).unwrap(), true).unwrap();
            let y = t.softmax_rows(x).unwrap();
            let y = t.layer_norm_rows(y);
            let y = t.sigmoid(y);
            let y = t.l2_normalize_rows(y);
            let root = t.sum(y);
            t.backward(root).unwrap();
            prop_assert!(t.grad(x).unwrap().is_finite());
        }
    }
}
