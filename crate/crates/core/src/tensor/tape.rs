use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::graph::Adjacency;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiset reduction used for neighbor aggregation and readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduce {
    #[default]
    Mean,
    Sum,
    Max,
}

impl std::str::FromStr for Reduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduce::Mean),
            "sum" => Ok(Reduce::Sum),
            "max" => Ok(Reduce::Max),
            other => Err(Error::InvalidArgument(format!("unknown reduction `{other}`"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Segment {
        x: Var,
        adj: Arc<Adjacency>,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    ReduceRows {
        x: Var,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record. Operations append nodes in execution order, so the
/// node list is already a topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, opname: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(opname, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for {n} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, bias]);
        let _ = m;
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n < 2 {
            return Err(Error::shape("layer_norm", format!("needs >= 2 columns, got {n}")));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. In evaluation mode, or with `p = 0`, the input is
    /// returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout { x: a, mask }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Output row `r` copies input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; index.len() * n];
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = i {
                out[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(index.len(), n, out)?, Op::GatherRows { x: a, index }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {m} rows")));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, n, out)?, Op::SliceRows { x: a, start }, rg))
    }

    /// Neighbor aggregation: row `v` of the output reduces the input rows of
    /// `v`'s neighbors; nodes without neighbors get a zero row.
    pub fn segment_reduce(&mut self, a: Var, adj: Arc<Adjacency>, mode: Reduce) -> Result<Var> {
        let (m, n) = self.dims(a);
        if adj.len() != m {
            return Err(Error::shape("segment_reduce", format!("{} nodes vs {m} rows", adj.len())));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut argmax = Vec::new();
        if mode == Reduce::Max {
            argmax = vec![usize::MAX; m * n];
        }
        for v in 0..m {
            let nbrs = adj.neighbors(v);
            if nbrs.is_empty() {
                continue;
            }
            let row = &mut out[v * n..(v + 1) * n];
            match mode {
                Reduce::Sum | Reduce::Mean => {
                    for &u in nbrs {
                        row.iter_mut().zip(&src[u * n..(u + 1) * n]).for_each(|(o, s)| *o += s);
                    }
                    if mode == Reduce::Mean {
                        let inv = 1.0 / nbrs.len() as f64;
                        row.iter_mut().for_each(|o| *o *= inv);
                    }
                }
                Reduce::Max => {
                    for c in 0..n {
                        let mut best = nbrs[0];
                        for &u in &nbrs[1..] {
                            if src[u * n + c] > src[best * n + c] {
                                best = u;
                            }
                        }
                        row[c] = src[best * n + c];
                        argmax[v * n + c] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::Segment {
                x: a,
                adj,
                mode,
                argmax,
            },
            rg,
        ))
    }

    /// Columnwise reduction over all rows, producing a `1 × n` row.
    pub fn reduce_rows(&mut self, a: Var, mode: Reduce) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::shape("reduce_rows", "no rows"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        let mut argmax = Vec::new();
        match mode {
            Reduce::Sum | Reduce::Mean => {
                for r in 0..m {
                    out.iter_mut().zip(&src[r * n..(r + 1) * n]).for_each(|(o, s)| *o += s);
                }
                if mode == Reduce::Mean {
                    out.iter_mut().for_each(|o| *o /= m as f64);
                }
            }
            Reduce::Max => {
                argmax = vec![0; n];
                for c in 0..n {
                    let mut best = 0;
                    for r in 1..m {
                        if src[r * n + c] > src[best * n + c] {
                            best = r;
                        }
                    }
                    argmax[c] = best;
                    out[c] = src[best * n + c];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::ReduceRows { x: a, mode, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `x · W + b` for a row batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar. Gradients add into existing slots until
    /// [`Tape::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Seed into a fresh sweep buffer, then fold into persistent slots.
        let mut sweep: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        sweep[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = sweep[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut sweep);
            match &mut self.grads[i] {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, sweep: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = sweep[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| gemm(m, n, k, gd, false, bv, true, d, true));
                acc(*b, &mut |d| gemm(k, m, n, av, true, gd, false, d, true));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += gd[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * w;
                    }
                });
            }
            Op::AddBias(a, b) => {
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| {
                    for row in gd.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += s * y));
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |d| {
                    for ((x, y), v) in d.iter_mut().zip(gd).zip(av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = nodes[i].value.data();
                let n = nodes[i].value.cols();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            drow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[x.0].value.cols();
                let gv = nodes[gain.0].value.data();
                acc(*x, &mut |d| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &gd[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            s1 += dh;
                            s2 += dh * hrow[c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            let dh = grow[c] * gv[c];
                            d[r * n + c] += inv / nf * (nf * dh - s1 - hrow[c] * s2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, hrow) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            d[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in gd.chunks_exact(n) {
                        d.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |d| {
                    for ((o, y), m) in d.iter_mut().zip(gd).zip(mask) {
                        *o += y * m;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let m = nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| {
                        d.iter_mut().zip(&gd[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            for c in 0..n {
                                d[s * n + c] += gd[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    d[start * n..start * n + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(a, b)| *a += b)
                });
            }
            Op::Segment { x, adj, mode, argmax } => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for v in 0..adj.len() {
                        let nbrs = adj.neighbors(v);
                        if nbrs.is_empty() {
                            continue;
                        }
                        let grow = &gd[v * n..(v + 1) * n];
                        match mode {
                            Reduce::Sum | Reduce::Mean => {
                                let f = if *mode == Reduce::Mean { 1.0 / nbrs.len() as f64 } else { 1.0 };
                                for &u in nbrs {
                                    d[u * n..(u + 1) * n]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(a, b)| *a += f * b);
                                }
                            }
                            Reduce::Max => {
                                for c in 0..n {
                                    let u = argmax[v * n + c];
                                    d[u * n + c] += grow[c];
                                }
                            }
                        }
                    }
                });
            }
            Op::ReduceRows { x, mode, argmax } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(*x, &mut |d| match mode {
                    Reduce::Sum | Reduce::Mean => {
                        let f = if *mode == Reduce::Mean { 1.0 / m as f64 } else { 1.0 };
                        for r in 0..m {
                            for c in 0..n {
                                d[r * n + c] += f * gd[c];
                            }
                        }
                    }
                    Reduce::Max => {
                        for c in 0..n {
                            d[argmax[c] * n + c] += gd[c];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let ones = t.constant(m(2, 1, &[1.0, 1.0]));
        let c = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        let id = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let c = t.matmul(a, id).unwrap();
        assert_eq!(t.value(c), t.value(a));
        let bad = t.constant(m(3, 1, &[1.0; 3]));
        assert!(matches!(t.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 2, &[0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2, 0.0]));
        let y = t.softmax_rows(x);
        let v = t.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        // 1 / (1 + e^{-0.70710678})
        assert!((v[2] - 0.669_666_1).abs() < 1e-4);
        assert!((v[3] - 0.330_333_9).abs() < 1e-4);
        let shifted = t.constant(m(2, 2, &[5.0, 5.0, std::f64::consts::FRAC_1_SQRT_2 + 5.0, 5.0]));
        let y2 = t.softmax_rows(shifted);
        for (p, q) in t.value(y2).data().iter().zip(&v) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(2, 2, &[3.0, 3.0, 1.0, -1.0]));
        let g = t.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = t.layer_norm(x, g, b).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);
        let narrow = t.constant(m(2, 1, &[1.0, 2.0]));
        let g1 = t.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(t.layer_norm(narrow, g1, g1).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(m(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        let a = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let y = t.dropout(x, 0.5, true, &mut r).unwrap();
            t.value(y).clone()
        };
        let b = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let y = t.dropout(x, 0.5, true, &mut r).unwrap();
            t.value(y).clone()
        };
        assert_eq!(a, b);
        assert!(a.data().iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).all(|(o, i)| *o == 0.0 || *o == 2.0 * i));
    }

    #[test]
    fn relu_and_reductions() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[-1.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let y = t.constant(m(2, 1, &[1.0, 3.0]));
        let mean = t.reduce_rows(y, Reduce::Mean).unwrap();
        assert_eq!(t.value(mean).data(), &[2.0]);
        let mx = t.reduce_rows(y, Reduce::Max).unwrap();
        assert_eq!(t.value(mx).data(), &[3.0]);
    }

    #[test]
    fn backward_simple_identities() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 3, &[1.0, -2.0, 0.5]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(m(1, 3, &[1.0, -2.0, 0.5]), true);
        let sq = t.mul(x, x).unwrap();
        let l = t.mean(sq);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap().data();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * xi / 3.0).abs() < 1e-15);
        }
        let nonscalar = t.leaf(m(1, 2, &[1.0, 2.0]), true);
        assert!(t.backward(nonscalar).is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut t = Tape::new();
        let x = t.leaf(m(1, 2, &[1.0, 2.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn max_reduce_routes_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(m(3, 1, &[2.0, 2.0, 1.0]), true);
        let r = t.reduce_rows(x, Reduce::Max).unwrap();
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let p = vec![m(2, 2, &[0.3, -1.2, 2.0, 0.7])];
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
