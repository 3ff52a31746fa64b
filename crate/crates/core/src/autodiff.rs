//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its output value and the
//! references needed to propagate gradients back to its inputs. `backward`
//! walks the tape once in reverse.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Transpose,
    Reshape,
    Add,
    Mul,
    Scale,
    AddScalar,
    Neg,
    Gelu,
    Sigmoid,
    Log,
    Sqrt,
    Relu,
    Clamp,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm,
    MeanPoolRows,
    Sum,
    L2Normalize,
    StackRows,
    Gather,
    Contrastive,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Neg,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Relu,
        OpKind::Clamp,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::LayerNorm,
        OpKind::MeanPoolRows,
        OpKind::Sum,
        OpKind::L2Normalize,
        OpKind::StackRows,
        OpKind::Gather,
        OpKind::Contrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Neg => "neg",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Relu => "relu",
            OpKind::Clamp => "clamp",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::MeanPoolRows => "mean_pool_rows",
            OpKind::Sum => "sum",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::StackRows => "stack_rows",
            OpKind::Gather => "gather",
            OpKind::Contrastive => "contrastive",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One term of a sparse linear read: `out[dst] += coeff * x[src]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatherEntry {
    pub src: usize,
    pub dst: usize,
    pub coeff: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanPoolRows(Var, usize),
    Sum(Var),
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    StackRows(Vec<Var>),
    Gather {
        x: Var,
        entries: Vec<GatherEntry>,
    },
    /// Gradient w.r.t. the logits is produced during the forward pass.
    Contrastive {
        logits: Var,
        dlogits: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Neg(_) => OpKind::Neg,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Relu(_) => OpKind::Relu,
            Op::Clamp(..) => OpKind::Clamp,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanPoolRows(..) => OpKind::MeanPoolRows,
            Op::Sum(_) => OpKind::Sum,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::StackRows(_) => OpKind::StackRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::Contrastive { .. } => OpKind::Contrastive,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is a single-threaded unit of work. Separate tapes share nothing and
/// may be driven from separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Scale applied to the input gradients of a fault-injected operation.
const FAULT_FACTOR: f64 = 1.25;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] = a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_raw(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_row_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

/// Reads element `i` of an operand that may be a broadcast scalar.
#[inline]
fn bcast(t: &[f64], i: usize) -> f64 {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(buf) => buf.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Gradient contribution for a possibly broadcast operand.
fn reduce_to(len: usize, g: Vec<f64>) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong.
    /// Used to prove that the gradient checker catches broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
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

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Domain {
                op: op.kind().name(),
                detail: "non-finite output".into(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::BatchMatMul { a, b, .. } => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.requires_grad(*x) || self.requires_grad(*gamma) || self.requires_grad(*beta)
            }
            Op::StackRows(vs) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Neg(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Clamp(x, ..)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::MeanPoolRows(x, _)
            | Op::Sum(x)
            | Op::L2Normalize { x, .. }
            | Op::Gather { x, .. }
            | Op::Contrastive { logits: x, .. } => self.requires_grad(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.zero_grad();
        value.set_requires_grad(requires_grad);
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

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta
            .dims2()
            .map_err(|_| Error::dim("matmul", ta.shape(), tb.shape()))?;
        let (k2, n) = tb
            .dims2()
            .map_err(|_| Error::dim("matmul", ta.shape(), tb.shape()))?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Block-wise product of `groups` stacked matrices. `a` holds blocks of
    /// shape `m×k` stacked by rows; `b` holds `k×n` blocks, or `n×k` blocks
    /// used transposed when `trans_b` is set. The result stacks the `m×n`
    /// products.
    pub fn batch_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::dim("batch_matmul", ta.shape(), tb.shape());
        let (ra, k) = ta.dims2().map_err(|_| err())?;
        let (rb, cb) = tb.dims2().map_err(|_| err())?;
        if groups == 0 || ra % groups != 0 || rb % groups != 0 {
            return Err(err());
        }
        let (m, rows_b) = (ra / groups, rb / groups);
        let n = if trans_b { rows_b } else { cb };
        if (trans_b && cb != k) || (!trans_b && rows_b != k) {
            return Err(err());
        }
        let mut out = Vec::with_capacity(groups * m * n);
        for g in 0..groups {
            let ab = &ta.data()[g * m * k..(g + 1) * m * k];
            let bb = &tb.data()[g * k * n..(g + 1) * k * n];
            out.extend(if trans_b {
                matmul_nt_raw(ab, bb, m, k, n)
            } else {
                matmul_raw(ab, bb, m, k, n)
            });
        }
        self.push(
            Tensor::from_parts(vec![groups * m, n], out),
            Op::BatchMatMul {
                a,
                b,
                groups,
                trans_b,
            },
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a), self.value(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = shape.iter().product();
        let out = (0..n).map(|i| bcast(da, i) + bcast(db, i)).collect();
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b))
    }

    /// Elementwise product; either operand may be a one-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a), self.value(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = shape.iter().product();
        let out = (0..n).map(|i| bcast(da, i) * bcast(db, i)).collect();
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| -v, Op::Neg(x))
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.map(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument {bad}"),
            });
        }
        self.map(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (row, o) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row_into(row, o);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::LogSoftmaxRows(x))
    }

    /// Per-token normalization over the last axis using the population
    /// variance, `eps` inside the square root, then `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::usage("layer_norm eps must be positive"));
        }
        let t = self.value(x);
        let c = t.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::dim("layer_norm", t.shape(), g.shape()));
        }
        let rows = t.numel() / c;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean over rows: `N×C → [C]`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        self.pool(x, 1, true)
    }

    /// Mean over each of `groups` equal row blocks: `(G·N)×C → G×C`.
    pub fn mean_pool_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        self.pool(x, groups, false)
    }

    fn pool(&mut self, x: Var, groups: usize, flat: bool) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = t.dims2()?;
        if groups == 0 || rows % groups != 0 || rows == 0 {
            return Err(Error::dim("mean_pool_groups", t.shape(), &[groups]));
        }
        let n = rows / groups;
        let mut out = vec![0.0; groups * c];
        for (r, row) in t.data().chunks(c).enumerate() {
            let o = &mut out[(r / n) * c..(r / n + 1) * c];
            o.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let shape = if flat { vec![c] } else { vec![groups, c] };
        self.push(Tensor::from_parts(shape, out), Op::MeanPoolRows(x, groups))
    }

    /// Full sum to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Divides every last-axis vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::usage("l2_normalize eps must be positive"));
        }
        let t = self.value(x);
        let c = t.last_dim();
        let mut norms = Vec::with_capacity(t.numel() / c);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|v| v / d));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::L2Normalize { x, eps, norms })
    }

    /// Concatenates vectors (one row each) and matrices (all their rows)
    /// of a common width into one matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::usage("stack_rows of nothing"))?;
        let c = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &r in rows {
            let t = self.value(r);
            if t.rank() > 2 || t.last_dim() != c || t.numel() == 0 {
                return Err(Error::dim(
                    "stack_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![out.len() / c, c], out);
        self.push(value, Op::StackRows(rows.to_vec()))
    }

    /// Sparse weighted read into a fresh tensor of `shape`.
    pub fn gather(&mut self, x: Var, entries: Vec<GatherEntry>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for e in &entries {
            if e.src >= src.len() || e.dst >= n {
                return Err(Error::usage(format!(
                    "gather entry {e:?} out of range ({} -> {n})",
                    src.len()
                )));
            }
            out[e.dst] += e.coeff * src[e.src];
        }
        self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather { x, entries },
        )
    }

    /// Selects whole rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut entries = Vec::with_capacity(rows.len() * c);
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(Error::usage(format!("row {row} out of range {r}")));
            }
            entries.extend((0..c).map(|j| GatherEntry {
                src: row * c + j,
                dst: i * c + j,
                coeff: 1.0,
            }));
        }
        self.gather(x, entries, &[rows.len(), c])
    }

    /// Supervised contrastive objective over a square logit matrix.
    ///
    /// For every anchor `i` with at least one positive (same label, `j != i`)
    /// the term is `-(1/|P_i|) Σ_p log(e^{s_ip} / (e^{s_ip} + Σ_{n∈N_i} e^{s_in}))`.
    /// The result is the mean over such anchors.
    pub fn contrastive(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, m2) = t.dims2()?;
        if m != m2 || labels.len() != m {
            return Err(Error::dim("contrastive", t.shape(), &[labels.len()]));
        }
        let s = t.data();
        let mut total = 0.0;
        let mut anchors = 0usize;
        let mut dlogits = vec![0.0; m * m];
        for i in 0..m {
            let row = &s[i * m..(i + 1) * m];
            let positives: Vec<usize> = (0..m)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            anchors += 1;
            let negatives: Vec<usize> = (0..m).filter(|&j| labels[j] != labels[i]).collect();
            // log Σ_{N_i} e^{s_in}, or -inf with no negatives.
            let neg_lse = if negatives.is_empty() {
                f64::NEG_INFINITY
            } else {
                let r = negatives
                    .iter()
                    .map(|&j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                r + negatives
                    .iter()
                    .map(|&j| (row[j] - r).exp())
                    .sum::<f64>()
                    .ln()
            };
            let inv_p = 1.0 / positives.len() as f64;
            let drow = &mut dlogits[i * m..(i + 1) * m];
            // Σ_p e^{-lse_ip}, scaled relative to the negatives' log-sum.
            let mut neg_weight = 0.0;
            for &p in &positives {
                let hi = row[p].max(neg_lse);
                let lse = hi + ((row[p] - hi).exp() + (neg_lse - hi).exp()).ln();
                total -= inv_p * (row[p] - lse);
                let sigma = (row[p] - lse).exp();
                drow[p] -= inv_p * (1.0 - sigma);
                neg_weight += (neg_lse - lse).exp();
            }
            if !negatives.is_empty() {
                for &j in &negatives {
                    // e^{s_ij} / D_ip summed over p, via e^{s_ij - neg_lse}.
                    drow[j] += inv_p * neg_weight * (row[j] - neg_lse).exp();
                }
            }
        }
        if anchors == 0 {
            return Err(Error::usage("contrastive loss: no anchor has a positive"));
        }
        let scale = 1.0 / anchors as f64;
        dlogits.iter_mut().for_each(|g| *g *= scale);
        self.push(
            Tensor::scalar(total * scale),
            Op::Contrastive { logits, dlogits },
        )
    }

    /// Backpropagates from a scalar loss with unit seed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(vec![(loss, vec![1.0])])
    }

    /// Backpropagates from arbitrary output seeds; the seeds are summed.
    pub fn backward_seeded(self, seeds: Vec<(Var, Vec<f64>)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.value(v).numel() {
                return Err(Error::dim("backward seed", self.shape(v), &[g.len()]));
            }
            add_into(&mut grads[v.0], &g);
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= FAULT_FACTOR);
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf if n.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: impl FnOnce() -> Vec<f64>) {
        if self.requires_grad(to) {
            let g = g();
            add_into(&mut grads[to.0], &g);
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                self.send(grads, *a, || matmul_nt_raw(g, tb.data(), m, n, k));
                self.send(grads, *b, || matmul_tn_raw(ta.data(), g, m, k, n));
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                trans_b,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let m = ta.shape()[0] / groups;
                let k = ta.shape()[1];
                let n = node.value.shape()[1];
                let blocks = |i: usize| {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                    let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                    (gb, ab, bb)
                };
                self.send(grads, *a, || {
                    (0..*groups)
                        .flat_map(|i| {
                            let (gb, _, bb) = blocks(i);
                            if *trans_b {
                                matmul_raw(gb, bb, m, n, k)
                            } else {
                                matmul_nt_raw(gb, bb, m, n, k)
                            }
                        })
                        .collect()
                });
                self.send(grads, *b, || {
                    (0..*groups)
                        .flat_map(|i| {
                            let (gb, ab, _) = blocks(i);
                            if *trans_b {
                                matmul_tn_raw(gb, ab, m, n, k)
                            } else {
                                matmul_tn_raw(ab, gb, m, k, n)
                            }
                        })
                        .collect()
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.send(grads, *x, || {
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = g[i * c + j];
                        }
                    }
                    out
                });
            }
            Op::Reshape(x) => self.send(grads, *x, || g.to_vec()),
            Op::Add(a, b) => {
                let la = self.value(*a).numel();
                let lb = self.value(*b).numel();
                self.send(grads, *a, || reduce_to(la, g.to_vec()));
                self.send(grads, *b, || reduce_to(lb, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.send(grads, *a, || {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bcast(db, i))
                        .collect();
                    reduce_to(da.len(), full)
                });
                self.send(grads, *b, || {
                    let full = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bcast(da, i))
                        .collect();
                    reduce_to(db.len(), full)
                });
            }
            Op::Scale(x, c) => self.send(grads, *x, || g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.send(grads, *x, || g.to_vec()),
            Op::Neg(x) => self.send(grads, *x, || g.iter().map(|v| -v).collect()),
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                self.send(grads, *x, || {
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect()
                });
            }
            Op::Sigmoid(x) => self.send(grads, *x, || {
                g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()
            }),
            Op::Log(x) => {
                let xs = self.value(*x).data();
                self.send(grads, *x, || {
                    g.iter().zip(xs).map(|(gv, xv)| gv / xv).collect()
                });
            }
            Op::Sqrt(x) => self.send(grads, *x, || {
                // d sqrt(0) is unbounded; report zero there rather than inf.
                g.iter()
                    .zip(y)
                    .map(|(gv, s)| if *s > 0.0 { gv * 0.5 / s } else { 0.0 })
                    .collect()
            }),
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                self.send(grads, *x, || {
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect()
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.value(*x).data();
                self.send(grads, *x, || {
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect()
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.last_dim();
                self.send(grads, *x, || {
                    let mut out = vec![0.0; g.len()];
                    for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(out.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    out
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.last_dim();
                self.send(grads, *x, || {
                    let mut out = vec![0.0; g.len()];
                    for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(out.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    out
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gam = self.value(*gamma).data();
                self.send(grads, *gamma, || {
                    let mut out = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, gv), hv) in out.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                    out
                });
                self.send(grads, *beta, || {
                    let mut out = vec![0.0; c];
                    for gr in g.chunks(c) {
                        out.iter_mut().zip(gr).for_each(|(o, gv)| *o += gv);
                    }
                    out
                });
                self.send(grads, *x, || {
                    let mut out = vec![0.0; g.len()];
                    for (r, ((gr, hr), or)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(out.chunks_mut(c))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, d), h) in or.iter_mut().zip(&dh).zip(hr) {
                            *o = inv_std[r] * (d - mean_dh - h * mean_dh_h);
                        }
                    }
                    out
                });
            }
            Op::MeanPoolRows(x, groups) => {
                let (rows, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let n = rows / groups;
                self.send(grads, *x, || {
                    let mut out = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        out.extend(g[(r / n) * c..(r / n + 1) * c].iter().map(|v| v / n as f64));
                    }
                    out
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, || vec![g[0]; n]);
            }
            Op::L2Normalize { x, eps, norms } => {
                let c = node.value.last_dim();
                self.send(grads, *x, || {
                    let mut out = vec![0.0; g.len()];
                    for (r, ((gr, yr), or)) in g
                        .chunks(c)
                        .zip(y.chunks(c))
                        .zip(out.chunks_mut(c))
                        .enumerate()
                    {
                        if norms[r] >= *eps {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                                *o = (gv - yv * dot) / norms[r];
                            }
                        } else {
                            for (o, gv) in or.iter_mut().zip(gr) {
                                *o = gv / eps;
                            }
                        }
                    }
                    out
                });
            }
            Op::StackRows(rows) => {
                let mut offset = 0;
                for r in rows {
                    let len = self.value(*r).numel();
                    self.send(grads, *r, || g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Gather { x, entries } => {
                let n = self.value(*x).numel();
                self.send(grads, *x, || {
                    let mut out = vec![0.0; n];
                    for e in entries {
                        out[e.src] += e.coeff * g[e.dst];
                    }
                    out
                });
            }
            Op::Contrastive { logits, dlogits } => {
                self.send(grads, *logits, || {
                    dlogits.iter().map(|d| d * g[0]).collect()
                });
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf, or `None` if it was unreachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Largest relative discrepancy between the taped gradient of `f` and central
/// differences, `|analytic - numeric| / max(1, |numeric|)`, over every
/// coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(Tape::new, f, inputs, h)
}

/// As [`grad_check`], building the analytic tape with `make_tape` (which may
/// inject a fault).
pub fn grad_check_with<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    inputs: &[Tensor],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_projected(make_tape, f, inputs, h, true)
}

/// Fixed, non-uniform weight used to project a tensor output to a scalar.
pub fn projection_weight(i: usize) -> f64 {
    1.0 + 0.37 * (i as f64 * 1.618).sin()
}

/// Gradient check of a tensor-valued `f` through the projection
/// `Σ_i projection_weight(i) · f(x)_i`. The projection is applied outside the
/// tape, so only the operations inside `f` are exercised.
pub fn grad_check_projected<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    inputs: &[Tensor],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_projected(make_tape, f, inputs, h, false)
}

fn check_projected<F>(
    make_tape: impl Fn() -> Tape,
    f: F,
    inputs: &[Tensor],
    h: f64,
    scalar: bool,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::usage(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).numel();
    if scalar && !tape.value(out).is_scalar() {
        return Err(Error::usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    let weights: Vec<f64> = if scalar {
        vec![1.0]
    } else {
        (0..n_out).map(projection_weight).collect()
    };
    let grads = tape.backward_seeded(vec![(out, weights.clone())])?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = t.constant(Tensor::eye(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &mat(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let r = t.constant(mat(&[&[1.0, 0.0]]));
        let col = t.constant(mat(&[&[0.0], &[5.0]]));
        let z = t.matmul(r, col).unwrap();
        assert_eq!(t.value(z).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(7);
        let a = Tensor::normal(&[3, 4], 1.0, &mut r);
        let b = Tensor::normal(&[4, 2], 1.0, &mut r);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        assert!(t.value(c).max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn batch_matmul_equals_blockwise_matmul() {
        let mut r = rng(8);
        let a = Tensor::normal(&[6, 4], 1.0, &mut r);
        let b = Tensor::normal(&[8, 2], 1.0, &mut r);
        let bt = Tensor::normal(&[4, 4], 1.0, &mut r);
        let mut t = Tape::new();
        let (va, vb, vbt) = (
            t.constant(a.clone()),
            t.constant(b.clone()),
            t.constant(bt.clone()),
        );
        let c = t.batch_matmul(va, vb, 2, false).unwrap();
        let ct = t.batch_matmul(va, vbt, 2, true).unwrap();
        assert_eq!(t.shape(c), &[6, 2]);
        assert_eq!(t.shape(ct), &[6, 2]);
        for g in 0..2 {
            let ab = Tensor::new(&[3, 4], a.data()[g * 12..(g + 1) * 12].to_vec()).unwrap();
            let bb = Tensor::new(&[4, 2], b.data()[g * 8..(g + 1) * 8].to_vec()).unwrap();
            let btb = Tensor::new(&[2, 4], bt.data()[g * 8..(g + 1) * 8].to_vec()).unwrap();
            let expect = triple_loop(&ab, &bb);
            let expect_t = triple_loop(&ab, &btb.transpose2().unwrap());
            for (x, y) in t.value(c).data()[g * 6..(g + 1) * 6]
                .iter()
                .zip(expect.data())
            {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in t.value(ct).data()[g * 6..(g + 1) * 6]
                .iter()
                .zip(expect_t.data())
            {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(matches!(
            t.batch_matmul(va, vb, 4, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn grouped_pool_and_matrix_concat() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 10.0]]));
        let p = t.mean_pool_groups(x, 2).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 3.0, 6.0, 8.0]);
        let whole = t.mean_pool_rows(x).unwrap();
        assert_eq!(t.shape(whole), &[2]);
        let v = t.constant(Tensor::new(&[2], vec![9.0, 9.0]).unwrap());
        let s = t.stack_rows(&[p, v, x]).unwrap();
        assert_eq!(t.shape(s), &[7, 2]);
        assert_eq!(&t.value(s).data()[4..8], &[9.0, 9.0, 1.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[0.0, 3f64.ln()], &[2.0, 2.0]]));
        let s = t.softmax_rows(x).unwrap();
        let v = t.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        assert!((v[2] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);

        let mut t = Tape::new();
        let x = t.param(Tensor::normal(&[3, 5], 2.0, &mut rng(3)));
        let s = t.softmax_rows(x).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[&[1.0, 3.0]]));
        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(t.value(y).max_abs_diff(&mat(&[&[-1.0, 1.0]])) < 1e-9);

        let x = t.constant(mat(&[&[4.0, 4.0, 4.0]]));
        let g = t.constant(Tensor::ones(&[3]));
        let b = t.constant(Tensor::full(&[3], 0.7));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let x = t.constant(Tensor::normal(&[1, 16], 3.0, &mut rng(1)));
        let g = t.constant(Tensor::ones(&[16]));
        let b = t.constant(Tensor::zeros(&[16]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let d = t.value(y).data();
        let mean = d.iter().sum::<f64>() / 16.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let one = t.constant(Tensor::scalar(1.0));
        let s = t.sigmoid(z).unwrap();
        let g = t.gelu(z).unwrap();
        let l = t.log(one).unwrap();
        assert_eq!(t.item(s), 0.5);
        assert_eq!(t.item(g), 0.0);
        assert_eq!(t.item(l), 0.0);
        let neg = t.constant(Tensor::scalar(-1.0));
        assert!(matches!(t.log(neg), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(t.log(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.param(mat(&[&[0.0, 2.0], &[2.0, 0.0]]));
        let m = t.mean_pool_rows(x).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 1.0]);
        let zeros = t.constant(Tensor::zeros(&[4]));
        let s = t.sum(zeros).unwrap();
        assert_eq!(t.item(s), 0.0);

        let w = t.constant(
            Tensor::from_rows(&[vec![3.0, -5.0]])
                .unwrap()
                .reshape(&[2])
                .unwrap(),
        );
        let prod = t.mul(m, w).unwrap();
        let loss = t.sum(prod).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.5, -2.5, 1.5, -2.5]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = t.l2_normalize(x, 1e-12).unwrap();
        assert!((t.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.8).abs() < 1e-15);
        let y2 = t.l2_normalize(y, 1e-12).unwrap();
        assert!(t.value(y2).max_abs_diff(t.value(y)) < 1e-12);
        let zero = t.constant(Tensor::zeros(&[3]));
        let yz = t.l2_normalize(zero, 1e-12).unwrap();
        assert_eq!(t.value(yz).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_basics() {
        let x0 = Tensor::normal(&[2, 3], 1.0, &mut rng(5));
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        for (gv, xv) in g.get(x).unwrap().iter().zip(x0.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }

        let mut t = Tape::new();
        let x = t.param(x0);
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut t = Tape::new();
        let a = t.param(Tensor::ones(&[2, 2]));
        let s = t.param(Tensor::scalar(3.0));
        let y = t.mul(a, s).unwrap();
        assert_eq!(t.value(y).data(), &[3.0; 4]);
        let bad = t.constant(Tensor::ones(&[2]));
        assert!(t.add(a, bad).is_err());
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap(), &[4.0]);
        assert_eq!(g.get(a).unwrap(), &[3.0; 4]);
    }

    #[test]
    fn sigmoid_sum_gradcheck() {
        let x = Tensor::normal(&[4, 3], 1.5, &mut rng(11));
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn composite_matmul_softmax_log_gradcheck() {
        let mut r = rng(12);
        let a = Tensor::normal(&[3, 4], 1.0, &mut r);
        let b = Tensor::normal(&[4, 5], 1.0, &mut r);
        let err = grad_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let s = t.softmax_rows(c)?;
                let l = t.log(s)?;
                let w = t.scale(l, 0.3)?;
                t.sum(w)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::ones(&[2]);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-2).is_err());
    }

    #[test]
    fn fault_injection_is_detected() {
        let x = Tensor::normal(&[3], 1.0, &mut rng(2));
        let err = grad_check_with(
            || Tape::with_fault(OpKind::Sigmoid),
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-3);
    }

    #[test]
    fn contrastive_examples() {
        let run = |rows: &[&[f64]], labels: &[usize]| {
            let mut t = Tape::new();
            let s = t.constant(mat(rows));
            let l = t.contrastive(s, labels).unwrap();
            t.item(l)
        };
        // one positive, no negatives
        assert!(run(&[&[0.0, 0.3], &[0.3, 0.0]], &[0, 0]).abs() < 1e-15);
        // positive and negative at equal logit
        let v = run(
            &[&[9.0, 0.5, 0.5], &[0.5, 9.0, 0.5], &[0.5, 0.5, 9.0]],
            &[0, 0, 1],
        );
        // anchors 0 and 1 each contribute ln 2; anchor 2 has no positive
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.contrastive(s, &[0, 1]).is_err());
    }

    #[test]
    fn contrastive_gradcheck() {
        let mut r = rng(21);
        let s = Tensor::normal(&[6, 6], 2.0, &mut r);
        let labels = [0, 1, 0, 2, 1, 0];
        let err = grad_check(|t, v| t.contrastive(v[0], &labels), &[s], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
