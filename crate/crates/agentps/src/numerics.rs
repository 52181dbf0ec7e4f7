//! Dense-matrix arithmetic with reverse-mode automatic differentiation.
//!
//! A `Tape` records every operation in topological order; `backward` walks the
//! record once in reverse and accumulates adjoints into every reachable leaf.
//! All tensors are matrices (scalars are 1x1). The whole engine is generic
//! over the element type so training runs in f32 while finite-difference
//! verification runs in f64.

use std::fmt::Debug;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid slice [{start}, {start}+{len}) of extent {extent}")]
    BadSlice {
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("gather index {index} out of range for {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Element type for tape arithmetic. Implemented for f32 and f64.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Handle into a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C[m,n] = A[m,k] * B[k,n]
    MatMul { a: usize, b: usize },
    /// C[m,n] = A[m,k] * B[n,k]^T
    MatMulNT { a: usize, b: usize },
    /// same-shape elementwise sum
    Add { a: usize, b: usize },
    /// same-shape elementwise product
    Mul { a: usize, b: usize },
    /// A[m,n] + bias[1,n] on every row
    AddRowBroadcast { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    /// rowwise normalization with learned gain/shift, gamma/beta are [1,n]
    LayerNorm { a: usize, gamma: usize, beta: usize },
    /// rowwise softmax over a square matrix with entries j > i masked out
    CausalSoftmaxRows { a: usize },
    /// -log softmax(logits)[target], logits are [1,C]
    SoftmaxCrossEntropy { logits: usize, target: usize },
    RowsSlice { a: usize, start: usize },
    ColsSlice { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    /// rows of `table` picked by index, duplicates allowed
    GatherRows { table: usize, indices: Vec<usize> },
    Sum { a: usize },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    grad: Vec<F>,
    op: Op,
}

impl<F: Real> Node<F> {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

const LN_EPS: f64 = 1e-5;

/// Records a forward computation and replays it backward for gradients.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, value.len());
        let grad = vec![F::ZERO; value.len()];
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<F>) -> TensorId {
        assert_eq!(
            rows * cols,
            data.len(),
            "leaf data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn scalar(&mut self, v: F) -> TensorId {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].grad
    }

    fn shapes(&self, a: TensorId, b: TensorId) -> (Vec<usize>, Vec<usize>) {
        let na = &self.nodes[a.0];
        let nb = &self.nodes[b.0];
        (vec![na.rows, na.cols], vec![nb.rows, nb.cols])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            let (l, r) = self.shapes(a, b);
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: l,
                rhs: r,
            });
        }
        let mut out = vec![F::ZERO; m * n];
        mat_mul(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(m, n, out, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// a[m,k] * b[n,k]^T, used for attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            let (l, r) = self.shapes(a, b);
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: l,
                rhs: r,
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = F::ZERO;
                for p in 0..k {
                    s += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.push(m, n, out, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            let (l, r) = self.shapes(a, b);
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: l,
                rhs: r,
            });
        }
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(m, n, out, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            let (l, r) = self.shapes(a, b);
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: l,
                rhs: r,
            });
        }
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(m, n, out, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Adds a [1,n] bias row to every row of a [m,n] matrix.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(bias);
        if bm != 1 || bn != n {
            let (l, r) = self.shapes(a, bias);
            return Err(NumericsError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: l,
                rhs: r,
            });
        }
        let bv = self.nodes[bias.0].value.clone();
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::AddRowBroadcast {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.shape(a);
        let cf = F::from_f64(c);
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x * cf).collect();
        self.push(m, n, out, Op::Scale { a: a.0, c })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<F> = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        self.push(m, n, out, Op::Gelu { a: a.0 })
    }

    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        for p in [gamma, beta] {
            let (pm, pn) = self.shape(p);
            if pm != 1 || pn != n {
                let (l, r) = self.shapes(a, p);
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: l,
                    rhs: r,
                });
            }
        }
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let av = &self.nodes[a.0].value;
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row);
            for j in 0..n {
                out[i * n + j] = gv[j] * (row[j] - mean) * inv_std + bv[j];
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        ))
    }

    /// Rowwise softmax over an [L,L] score matrix with positions j > i masked.
    /// Row-max subtraction keeps large logits from overflowing.
    pub fn causal_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if m != n {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: vec![m, n],
                rhs: vec![m, m],
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let row = &av[i * n..i * n + (i + 1)];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut denom = F::ZERO;
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..=i {
                out[i * n + j] = out[i * n + j] / denom;
            }
        }
        Ok(self.push(m, n, out, Op::CausalSoftmaxRows { a: a.0 }))
    }

    /// Stabilized -log softmax(logits)[target] for a [1,C] logit row.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let (m, c) = self.shape(logits);
        if m != 1 || c < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![m, c],
                rhs: vec![1, 2],
            });
        }
        if target >= c {
            return Err(NumericsError::TargetOutOfRange { target, classes: c });
        }
        let row = &self.nodes[logits.0].value;
        let (loss, _) = softmax_ce_forward(row, target);
        if !loss.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                target,
            },
        ))
    }

    /// Softmax probabilities of a [1,C] logit row (values only, not recorded).
    pub fn softmax_probs(&self, logits: TensorId) -> Vec<F> {
        softmax_row(&self.nodes[logits.0].value)
    }

    pub fn rows_slice(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(NumericsError::BadSlice {
                start,
                len,
                extent: m,
            });
        }
        let out = self.nodes[a.0].value[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::RowsSlice { a: a.0, start }))
    }

    pub fn cols_slice(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(NumericsError::BadSlice {
                start,
                len,
                extent: n,
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::ColsSlice { a: a.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                let (l, r) = self.shapes(parts[0], p);
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: l,
                    rhs: r,
                });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.shape(p);
                let pv = &self.nodes[p.0].value;
                out.extend_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(
            m,
            total,
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                let (l, r) = self.shapes(parts[0], p);
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: l,
                    rhs: r,
                });
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        Ok(self.push(
            total,
            n,
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, n) = self.shape(table);
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(indices.len() * n);
        for &idx in indices {
            if idx >= rows {
                return Err(NumericsError::GatherOutOfRange { index: idx, rows });
            }
            out.extend_from_slice(&tv[idx * n..(idx + 1) * n]);
        }
        Ok(self.push(
            indices.len(),
            n,
            out,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut s = F::ZERO;
        for &x in &self.nodes[a.0].value {
            s += x;
        }
        self.push(1, 1, vec![s], Op::Sum { a: a.0 })
    }

    /// Reverse pass from a scalar loss. Visits every node exactly once in
    /// reverse topological order; leaf grads accumulate across uses.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (m, n) = self.shape(loss);
        if m != 1 || n != 1 {
            return Err(NumericsError::NotScalar { shape: vec![m, n] });
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = F::ZERO);
        }
        self.nodes[loss.0].grad[0] = F::ONE;
        for idx in (0..self.nodes.len()).rev() {
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let k = self.nodes[a].cols;
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    // dA += G * B^T
                    {
                        let bv = &self.nodes[b].value;
                        let mut da = vec![F::ZERO; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                        add_into(&mut self.nodes[a].grad, &da);
                    }
                    // dB += A^T * G
                    {
                        let av = &self.nodes[a].value;
                        let mut db = vec![F::ZERO; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                        add_into(&mut self.nodes[b].grad, &db);
                    }
                    self.nodes[idx].grad = g;
                }
                Op::MatMulNT { a, b } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let k = self.nodes[a].cols;
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    // C = A B^T: dA += G * B ; dB += G^T * A
                    {
                        let bv = &self.nodes[b].value;
                        let mut da = vec![F::ZERO; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[j * k + p];
                                }
                            }
                        }
                        add_into(&mut self.nodes[a].grad, &da);
                    }
                    {
                        let av = &self.nodes[a].value;
                        let mut db = vec![F::ZERO; n * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for p in 0..k {
                                    db[j * k + p] += gij * av[i * k + p];
                                }
                            }
                        }
                        add_into(&mut self.nodes[b].grad, &db);
                    }
                    self.nodes[idx].grad = g;
                }
                Op::Add { a, b } => {
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    add_into(&mut self.nodes[a].grad, &g);
                    add_into(&mut self.nodes[b].grad, &g);
                    self.nodes[idx].grad = g;
                }
                Op::Mul { a, b } => {
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let bv = self.nodes[b].value.clone();
                    for (ga, (&gi, &bi)) in self.nodes[a].grad.iter_mut().zip(g.iter().zip(&bv)) {
                        *ga += gi * bi;
                    }
                    let av = self.nodes[a].value.clone();
                    for (gb, (&gi, &ai)) in self.nodes[b].grad.iter_mut().zip(g.iter().zip(&av)) {
                        *gb += gi * ai;
                    }
                    self.nodes[idx].grad = g;
                }
                Op::AddRowBroadcast { a, bias } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    add_into(&mut self.nodes[a].grad, &g);
                    for i in 0..m {
                        for j in 0..n {
                            self.nodes[bias].grad[j] += g[i * n + j];
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::Scale { a, c } => {
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let cf = F::from_f64(c);
                    for (ga, &gi) in self.nodes[a].grad.iter_mut().zip(&g) {
                        *ga += gi * cf;
                    }
                    self.nodes[idx].grad = g;
                }
                Op::Gelu { a } => {
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let av = self.nodes[a].value.clone();
                    for (ga, (&gi, &x)) in self.nodes[a].grad.iter_mut().zip(g.iter().zip(&av)) {
                        *ga += gi * gelu_deriv(x);
                    }
                    self.nodes[idx].grad = g;
                }
                Op::LayerNorm { a, gamma, beta } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let av = self.nodes[a].value.clone();
                    let gv = self.nodes[gamma].value.clone();
                    let inv_n = F::from_f64(1.0 / n as f64);
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let (mean, inv_std) = row_moments(row);
                        let gr = &g[i * n..(i + 1) * n];
                        let mut sum_gg = F::ZERO;
                        let mut sum_ggx = F::ZERO;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let gg = gv[j] * gr[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                            self.nodes[gamma].grad[j] += gr[j] * xhat;
                            self.nodes[beta].grad[j] += gr[j];
                        }
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let gg = gv[j] * gr[j];
                            self.nodes[a].grad[i * n + j] +=
                                (gg - inv_n * sum_gg - xhat * inv_n * sum_ggx) * inv_std;
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::CausalSoftmaxRows { a } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let y = self.nodes[idx].value.clone();
                    for i in 0..m {
                        let mut dot = F::ZERO;
                        for j in 0..=i {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..=i {
                            self.nodes[a].grad[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let g = self.nodes[idx].grad[0];
                    let probs = softmax_row(&self.nodes[logits].value);
                    for (j, (gl, &p)) in self.nodes[logits]
                        .grad
                        .iter_mut()
                        .zip(probs.iter())
                        .enumerate()
                    {
                        let ind = if j == target { F::ONE } else { F::ZERO };
                        *gl += g * (p - ind);
                    }
                }
                Op::RowsSlice { a, start } => {
                    let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    for i in 0..m {
                        for j in 0..n {
                            self.nodes[a].grad[(start + i) * n + j] += g[i * n + j];
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::ColsSlice { a, start } => {
                    let (m, len) = (self.nodes[idx].rows, self.nodes[idx].cols);
                    let n = self.nodes[a].cols;
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    for i in 0..m {
                        for j in 0..len {
                            self.nodes[a].grad[i * n + start + j] += g[i * len + j];
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::ConcatCols { parts } => {
                    let m = self.nodes[idx].rows;
                    let total = self.nodes[idx].cols;
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    for i in 0..m {
                        let mut off = 0;
                        for &p in &parts {
                            let pn = self.nodes[p].cols;
                            for j in 0..pn {
                                self.nodes[p].grad[i * pn + j] += g[i * total + off + j];
                            }
                            off += pn;
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::ConcatRows { parts } => {
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.nodes[p].len();
                        add_into(&mut self.nodes[p].grad, &g[off..off + len]);
                        off += len;
                    }
                    self.nodes[idx].grad = g;
                }
                Op::GatherRows { table, indices } => {
                    let n = self.nodes[idx].cols;
                    let g = std::mem::take(&mut self.nodes[idx].grad);
                    for (i, &row) in indices.iter().enumerate() {
                        for j in 0..n {
                            self.nodes[table].grad[row * n + j] += g[i * n + j];
                        }
                    }
                    self.nodes[idx].grad = g;
                }
                Op::Sum { a } => {
                    let g = self.nodes[idx].grad[0];
                    for ga in self.nodes[a].grad.iter_mut() {
                        *ga += g;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mat_mul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += aip * br[j];
            }
        }
    }
}

fn row_moments<F: Real>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mut mean = F::ZERO;
    for &x in row {
        mean += x;
    }
    mean = mean / n;
    let mut var = F::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let inv_std = F::ONE / (var + F::from_f64(LN_EPS)).sqrt();
    (mean, inv_std)
}

fn softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    let mut mx = row[0];
    for &x in row {
        mx = mx.maximum(x);
    }
    let exps: Vec<F> = row.iter().map(|&x| (x - mx).exp()).collect();
    let mut denom = F::ZERO;
    for &e in &exps {
        denom += e;
    }
    exps.into_iter().map(|e| e / denom).collect()
}

fn softmax_ce_forward<F: Real>(row: &[F], target: usize) -> (F, Vec<F>) {
    let probs = softmax_row(row);
    let loss = -(probs[target].ln());
    (loss, probs)
}

// tanh form of the Gaussian-error gate
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::ONE + inner.tanh())
}

fn gelu_deriv<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::ONE - t * t;
    half * (F::ONE + t) + half * x * sech2 * c * (F::ONE + three * a * x * x)
}

/// Central-difference gradient verification for a scalar-valued tape function.
/// Returns the maximum per-coordinate error, relative with an absolute floor
/// of 1 so near-zero gradient coordinates compare absolutely.
pub fn grad_check<F, Build>(build: Build, rows: usize, cols: usize, x: &[F], eps: f64) -> Result<f64>
where
    F: Real,
    Build: Fn(&mut Tape<F>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(rows, cols, x.to_vec());
    let loss = build(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape.grad(xid).iter().map(|g| g.to_f64()).collect();

    let eval = |data: Vec<F>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(rows, cols, data);
        let l = build(&mut t, id)?;
        Ok(t.value(l)[0].to_f64())
    };

    let mut max_rel = 0.0f64;
    for j in 0..x.len() {
        let mut plus = x.to_vec();
        plus[j] = plus[j] + F::from_f64(eps);
        let mut minus = x.to_vec();
        minus[j] = minus[j] - F::from_f64(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = analytic[j].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[j] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeedStream::new(seed).rng();
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let eye = t.leaf(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = t.leaf(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        let c = t.matmul(eye, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn matmul_hand_case() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(2, 2, vec![1., 2., 3., 4.]);
        let b = t.leaf(2, 1, vec![1., 1.]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3., 7.]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let (m, k, n) = (4, 5, 3);
        let av = rand_vec(m * k, 1);
        let bv = rand_vec(k * n, 2);
        // naive triple loop, independent of the tape kernel's loop order
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(m, k, av);
        let b = t.leaf(k, n, bv);
        let c = t.matmul(a, b).unwrap();
        for (got, want) in t.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(2, 3, vec![0.0; 6]);
        let b = t.leaf(2, 2, vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associative_at_tolerance() {
        let av = rand_vec(64, 3);
        let bv = rand_vec(64, 4);
        let cv = rand_vec(64, 5);
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(8, 8, av);
        let b = t.leaf(8, 8, bv);
        let c = t.leaf(8, 8, cv);
        let ab = t.matmul(a, b).unwrap();
        let ab_c = t.matmul(ab, c).unwrap();
        let bc = t.matmul(b, c).unwrap();
        let a_bc = t.matmul(a, bc).unwrap();
        for (x, y) in t.value(ab_c).iter().zip(t.value(a_bc)) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(1, 2, vec![0.3, 0.3]);
        let loss = t.softmax_cross_entropy(logits, 0).unwrap();
        assert!((t.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_logit_stable() {
        let mut t: Tape<f32> = Tape::new();
        let logits = t.leaf(1, 2, vec![1000.0, 0.0]);
        let loss = t.softmax_cross_entropy(logits, 0).unwrap();
        let v = t.value(loss)[0];
        assert!(v.is_finite() && v.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let logits = rand_vec(5, 9);
        // explicit softmax in f64, no max-subtraction shortcut shared with the impl
        let denom: f64 = logits.iter().map(|x| x.exp()).sum();
        let expect = -(logits[2].exp() / denom).ln();
        let mut t: Tape<f64> = Tape::new();
        let l = t.leaf(1, 5, logits);
        let loss = t.softmax_cross_entropy(l, 2).unwrap();
        assert!((t.value(loss)[0] - expect).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(1, 3, vec![0.0; 3]);
        assert!(matches!(
            t.softmax_cross_entropy(logits, 3),
            Err(NumericsError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_probs_sum_to_one_and_positive() {
        for seed in 0..20u64 {
            let logits = rand_vec(7, 100 + seed);
            let mut t: Tape<f64> = Tape::new();
            let l = t.leaf(1, 7, logits);
            let probs = t.softmax_probs(l);
            let s: f64 = probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(2, 3, rand_vec(6, 11));
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(t.grad(x).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_square_is_two_x() {
        let xv = rand_vec(5, 12);
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(1, 5, xv.clone());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        for (g, x) in t.grad(x).iter().zip(&xv) {
            assert!((g - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(2, 2, vec![0.0; 4]);
        assert!(matches!(
            t.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn grad_check_sum_exact() {
        let x = rand_vec(6, 13);
        let err = grad_check(
            |t: &mut Tape<f64>, id| Ok(t.sum(id)),
            2,
            3,
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn grad_check_cross_entropy() {
        let x = rand_vec(5, 14);
        let err = grad_check(
            |t: &mut Tape<f64>, id| t.softmax_cross_entropy(id, 1),
            1,
            5,
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    // every differentiable op against central differences, 20 random inputs each
    #[test]
    fn all_ops_match_finite_differences() {
        for trial in 0..20u64 {
            let x = rand_vec(12, 200 + trial);
            let w = rand_vec(12, 300 + trial);

            let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, TensorId) -> Result<TensorId>>)> = vec![
                (
                    "matmul",
                    Box::new({
                        let w = w.clone();
                        move |t: &mut Tape<f64>, id| {
                            let b = t.leaf(4, 2, w[..8].to_vec());
                            let c = t.matmul(id, b)?;
                            Ok(t.sum(c))
                        }
                    }),
                ),
                (
                    "matmul_nt",
                    Box::new({
                        let w = w.clone();
                        move |t: &mut Tape<f64>, id| {
                            let b = t.leaf(2, 4, w[..8].to_vec());
                            let c = t.matmul_nt(id, b)?;
                            Ok(t.sum(c))
                        }
                    }),
                ),
                (
                    "gelu",
                    Box::new(|t: &mut Tape<f64>, id| {
                        let g = t.gelu(id);
                        Ok(t.sum(g))
                    }),
                ),
                (
                    "layer_norm",
                    Box::new({
                        let w = w.clone();
                        move |t: &mut Tape<f64>, id| {
                            let gamma = t.leaf(1, 4, w[..4].to_vec());
                            let beta = t.leaf(1, 4, w[4..8].to_vec());
                            let ln = t.layer_norm(id, gamma, beta)?;
                            let probe = t.leaf(4, 1, w[8..12].to_vec());
                            let s = t.matmul(ln, probe)?;
                            Ok(t.sum(s))
                        }
                    }),
                ),
                (
                    "add_row_broadcast",
                    Box::new({
                        let w = w.clone();
                        move |t: &mut Tape<f64>, id| {
                            let bias = t.leaf(1, 4, w[..4].to_vec());
                            let c = t.add_row_broadcast(id, bias)?;
                            let sq = t.mul(c, c)?;
                            Ok(t.sum(sq))
                        }
                    }),
                ),
                (
                    "slices_concat",
                    Box::new(|t: &mut Tape<f64>, id| {
                        let left = t.cols_slice(id, 0, 2)?;
                        let right = t.cols_slice(id, 2, 2)?;
                        let cat = t.concat_cols(&[right, left])?;
                        let top = t.rows_slice(cat, 0, 2)?;
                        let bottom = t.rows_slice(cat, 2, 1)?;
                        let stacked = t.concat_rows(&[bottom, top])?;
                        let sq = t.mul(stacked, stacked)?;
                        Ok(t.sum(sq))
                    }),
                ),
            ];
            for (name, build) in cases {
                let err = grad_check(build.as_ref(), 3, 4, &x, 1e-3).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: err={err}");
            }

            // square-matrix ops
            let sq_in = rand_vec(16, 400 + trial);
            let probe_w = rand_vec(4, 600 + trial);
            let err = grad_check(
                |t: &mut Tape<f64>, id| {
                    let sm = t.causal_softmax_rows(id)?;
                    let probe = t.leaf(4, 1, probe_w.clone());
                    let s = t.matmul(sm, probe)?;
                    Ok(t.sum(s))
                },
                4,
                4,
                &sq_in,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "causal_softmax trial {trial}: err={err}");

            let emb = rand_vec(12, 500 + trial);
            let err = grad_check(
                |t: &mut Tape<f64>, id| {
                    let g = t.gather_rows(id, &[2, 0, 2, 1])?;
                    let sq = t.mul(g, g)?;
                    Ok(t.sum(sq))
                },
                3,
                4,
                &emb,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "gather trial {trial}: err={err}");
        }
    }

    #[test]
    fn repeated_passes_bitwise_identical() {
        let run = || {
            let x = rand_vec(16, 77);
            let w = rand_vec(16, 78);
            let mut t: Tape<f64> = Tape::new();
            let a = t.leaf(4, 4, x);
            let b = t.leaf(4, 4, w);
            let c = t.matmul(a, b).unwrap();
            let g = t.gelu(c);
            let sm = t.causal_softmax_rows(g).unwrap();
            let loss = t.sum(sm);
            t.backward(loss).unwrap();
            (
                t.value(loss).to_vec(),
                t.grad(a).to_vec(),
                t.grad(b).to_vec(),
            )
        };
        let first = run();
        let second = run();
        assert!(first.0.iter().zip(&second.0).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(first.1.iter().zip(&second.1).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(first.2.iter().zip(&second.2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

