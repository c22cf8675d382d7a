//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably, so any number of tapes can
//! run against the same parameters (one per request in a batch). Each op
//! records its output value and enough context to propagate gradients;
//! [`Tape::backward`] walks the nodes in reverse.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log {
        x: Var,
        floor: T,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherCells {
        x: Var,
        cells: Vec<(usize, usize)>,
    },
    Sum(Var),
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

/// Recording of one computation, borrowed parameters plus owned intermediates.
pub struct Tape<'p, T> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node without a param store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or constant tensor. Gradients are still reported for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.push("leaf", t, Op::Leaf)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(NumericsError::shape("matmul", ta.shape(), tb.shape()));
        }
        let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![T::zero(); p * r];
        matmul_into(ta.data(), tb.data(), &mut out, p, q, r);
        self.push("matmul", Tensor::from_vec(p, r, out)?, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(NumericsError::shape("matmul_bt", ta.shape(), tb.shape()));
        }
        let (p, q, r) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![T::zero(); p * r];
        matmul_bt_into(ta.data(), tb.data(), &mut out, p, q, r);
        self.push("matmul_bt", Tensor::from_vec(p, r, out)?, Op::MatMulBt(a, b))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::from_vec(t.rows(), t.cols(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds the `1 x q` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(NumericsError::shape("add_row", tx.shape(), tb.shape()));
        }
        let q = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(q.max(1)) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let out = Tensor::from_vec(tx.rows(), q, data)?;
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v + s);
        self.push("add_scalar", out, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.scale(x, -T::one())
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.neg(x)?;
        self.add_scalar(n, T::one())
    }

    /// Softmax along each row. Entries where `mask` is false get exactly 0;
    /// a fully masked row is all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        check_mask(mask, r * c)?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let idx = |j: usize| i * c + j;
            softmax_strided(t.data(), &mut out, mask, (0..c).map(idx));
        }
        let out = Tensor::from_vec(r, c, out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x))
    }

    /// Softmax down each column, stabilised by the column max. Entries where
    /// `mask` is false get exactly 0.
    pub fn softmax_columns(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        check_mask(mask, r * c)?;
        let mut out = vec![T::zero(); r * c];
        for j in 0..c {
            softmax_strided(t.data(), &mut out, mask, (0..r).map(|i| i * c + j));
        }
        let out = Tensor::from_vec(r, c, out)?;
        self.push("softmax_columns", out, Op::SoftmaxCols(x))
    }

    /// Row-wise layer normalisation with `1 x q` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let q = tx.cols();
        if tg.shape() != [1, q] || tb.shape() != [1, q] {
            return Err(NumericsError::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let r = tx.rows();
        let qf = T::from_usize(q).expect("dimension fits");
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); r * q];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * q];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().copied().sum::<T>() / qf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / qf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..q {
                let h = (row[j] - mean) * is;
                xhat[i * q + j] = h;
                out[i * q + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_vec(r, q, out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let out = self.map(x, |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.map(x, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: T) -> Result<Var, NumericsError> {
        let out = self.map(x, |v| v.max(floor).ln());
        self.push("log", out, Op::Log { x, floor })
    }

    /// Clamps into `[lo, hi]`; returns the node and how many entries were clamped.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<(Var, usize), NumericsError> {
        let clamped = self
            .value(x)
            .data()
            .iter()
            .filter(|&&v| v < lo || v > hi)
            .count();
        let out = self.map(x, |v| v.max(lo).min(hi));
        Ok((self.push("clamp", out, Op::Clamp { x, lo, hi })?, clamped))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(NumericsError::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    t.shape(),
                ));
            }
            total += t.cols();
        }
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let out = Tensor::from_vec(rows, total, out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(NumericsError::shape("slice_cols", t.shape(), &[start, len]));
        }
        let r = t.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_vec(r, len, out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(NumericsError::IndexOutOfRange {
                index: bad,
                len: t.rows(),
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let out = Tensor::from_vec(rows.len(), c, out)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Collects `x[r, c]` for each cell into a `1 x k` row.
    pub fn gather_cells(&mut self, x: Var, cells: &[(usize, usize)]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let mut out = Vec::with_capacity(cells.len());
        for &(r, c) in cells {
            if r >= t.rows() || c >= t.cols() {
                return Err(NumericsError::IndexOutOfRange {
                    index: r.max(c),
                    len: t.rows().min(t.cols()),
                });
            }
            out.push(t.get(r, c));
        }
        let out = Tensor::from_vec(1, cells.len(), out)?;
        self.push(
            "gather_cells",
            out,
            Op::GatherCells {
                x,
                cells: cells.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n.max(1)).expect("fits"))
    }

    /// Scales each row to unit L2 norm. Rows with (near) zero norm map to the
    /// zero vector; their count is returned alongside the node.
    pub fn row_normalize(&mut self, x: Var) -> Result<(Var, usize), NumericsError> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        let mut degenerate = 0;
        for i in 0..r {
            let n = t.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= T::lit(NORM_EPS) {
                degenerate += 1;
                norms.push(T::zero());
                continue;
            }
            norms.push(n);
            for j in 0..c {
                out[i * c + j] = t.get(i, j) / n;
            }
        }
        let out = Tensor::from_vec(r, c, out)?;
        Ok((
            self.push("row_normalize", out, Op::RowNormalize { x, norms })?,
            degenerate,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if labels.len() != t.len() {
            return Err(NumericsError::DataLength {
                expected: t.len(),
                got: labels.len(),
            });
        }
        let n = T::from_usize(t.len().max(1)).expect("fits");
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Propagates `d out / d node` for every node reachable from `out`,
    /// which must be a `1 x 1` tensor.
    pub fn backward(&self, out: Var) -> Result<Backward<T>, NumericsError> {
        let t = self.value(out);
        if t.len() != 1 {
            return Err(NumericsError::shape("backward", t.shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = self.value(Var(idx));
            self.propagate(&node.op, y, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Backward { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn propagate(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<(), NumericsError> {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q, r) = (ta.rows(), ta.cols(), tb.cols());
                matmul_bt_into(g, tb.data(), self.acc(grads, *a), p, r, q);
                let ta = self.value(*a);
                matmul_at_into(ta.data(), g, self.acc(grads, *b), p, q, r);
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q, r) = (ta.rows(), ta.cols(), tb.rows());
                matmul_into(g, tb.data(), self.acc(grads, *a), p, r, q);
                let ta = self.value(*a);
                matmul_at_into(g, ta.data(), self.acc(grads, *b), p, r, q);
            }
            Op::Add(a, b) => {
                add_into(self.acc(grads, *a), g);
                add_into(self.acc(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.acc(grads, *a), g);
                let gb = self.acc(grads, *b);
                for (o, &v) in gb.iter_mut().zip(g) {
                    *o = *o - v;
                }
            }
            Op::Mul(a, b) => {
                let tb = self.value(*b).data();
                for ((o, &v), &w) in self.acc(grads, *a).iter_mut().zip(g).zip(tb) {
                    *o = *o + v * w;
                }
                let ta = self.value(*a).data();
                for ((o, &v), &w) in self.acc(grads, *b).iter_mut().zip(g).zip(ta) {
                    *o = *o + v * w;
                }
            }
            Op::AddRow(x, bias) => {
                add_into(self.acc(grads, *x), g);
                let q = self.value(*bias).cols();
                let gb = self.acc(grads, *bias);
                for row in g.chunks(q.max(1)) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, s) => {
                for (o, &v) in self.acc(grads, *x).iter_mut().zip(g) {
                    *o = *o + v * *s;
                }
            }
            Op::AddScalar(x) => add_into(self.acc(grads, *x), g),
            Op::SoftmaxRows(x) => {
                let (r, c) = (y.rows(), y.cols());
                let gx = self.acc(grads, *x);
                for i in 0..r {
                    softmax_backward(y.data(), g, gx, (0..c).map(|j| i * c + j));
                }
            }
            Op::SoftmaxCols(x) => {
                let (r, c) = (y.rows(), y.cols());
                let gx = self.acc(grads, *x);
                for j in 0..c {
                    softmax_backward(y.data(), g, gx, (0..r).map(|i| i * c + j));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let q = y.cols();
                let r = y.rows();
                let gam = self.value(*gamma).data();
                let qf = T::from_usize(q).expect("fits");
                {
                    let gg = self.acc(grads, *gamma);
                    for i in 0..r {
                        for j in 0..q {
                            gg[j] = gg[j] + g[i * q + j] * xhat[i * q + j];
                        }
                    }
                }
                {
                    let gb = self.acc(grads, *beta);
                    for row in g.chunks(q) {
                        add_into(gb, row);
                    }
                }
                let gx = self.acc(grads, *x);
                let mut dxhat = vec![T::zero(); q];
                for i in 0..r {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..q {
                        let d = g[i * q + j] * gam[j];
                        dxhat[j] = d;
                        s1 = s1 + d;
                        s2 = s2 + d * xhat[i * q + j];
                    }
                    let k = inv_std[i] / qf;
                    for j in 0..q {
                        let v = k * (qf * dxhat[j] - s1 - xhat[i * q + j] * s2);
                        gx[i * q + j] = gx[i * q + j] + v;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three = T::lit(3.0);
                for ((o, &v), &xv) in self.acc(grads, *x).iter_mut().zip(g).zip(tx) {
                    let u = c * (xv + k * xv * xv * xv);
                    let th = u.tanh();
                    let du = c * (T::one() + three * k * xv * xv);
                    let d = half * (T::one() + th) + half * xv * (T::one() - th * th) * du;
                    *o = *o + v * d;
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                for ((o, &v), &xv) in self.acc(grads, *x).iter_mut().zip(g).zip(tx) {
                    if xv > T::zero() {
                        *o = *o + v;
                    }
                }
            }
            Op::Sigmoid(x) => {
                for ((o, &v), &yv) in self.acc(grads, *x).iter_mut().zip(g).zip(y.data()) {
                    *o = *o + v * yv * (T::one() - yv);
                }
            }
            Op::Log { x, floor } => {
                let tx = self.value(*x).data();
                for ((o, &v), &xv) in self.acc(grads, *x).iter_mut().zip(g).zip(tx) {
                    if xv > *floor {
                        *o = *o + v / xv;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x).data();
                for ((o, &v), &xv) in self.acc(grads, *x).iter_mut().zip(g).zip(tx) {
                    if xv >= *lo && xv <= *hi {
                        *o = *o + v;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (y.rows(), y.cols());
                let gx = self.acc(grads, *x);
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = gx[j * r + i] + g[i * c + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let gp = self.acc(grads, p);
                    for i in 0..rows {
                        for j in 0..c {
                            gp[i * c + j] = gp[i * c + j] + g[i * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let len = y.cols();
                let c = self.value(*x).cols();
                let gx = self.acc(grads, *x);
                for i in 0..y.rows() {
                    for j in 0..len {
                        gx[i * c + start + j] = gx[i * c + start + j] + g[i * len + j];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = y.cols();
                let gx = self.acc(grads, *x);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] = gx[r * c + j] + g[k * c + j];
                    }
                }
            }
            Op::GatherCells { x, cells } => {
                let c = self.value(*x).cols();
                let gx = self.acc(grads, *x);
                for (k, &(r, col)) in cells.iter().enumerate() {
                    gx[r * c + col] = gx[r * c + col] + g[k];
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                for o in self.acc(grads, *x).iter_mut() {
                    *o = *o + s;
                }
            }
            Op::RowNormalize { x, norms } => {
                let c = y.cols();
                let gx = self.acc(grads, *x);
                for (i, &n) in norms.iter().enumerate() {
                    if n == T::zero() {
                        continue;
                    }
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let tz = self.value(*logits).data();
                let n = T::from_usize(tz.len().max(1)).expect("fits");
                let s = g[0] / n;
                for ((o, &z), &lab) in self.acc(grads, *logits).iter_mut().zip(tz).zip(labels) {
                    *o = *o + s * (sigmoid(z) - lab);
                }
            }
        }
        Ok(())
    }
}

/// Gradients from one [`Tape::backward`] call.
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient with respect to `v`, or zeros when `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape<'_, T>, v: Var) -> Vec<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }

    /// Dense gradients for every parameter of the tape's store.
    pub fn param_grads(&self, tape: &Tape<'_, T>) -> Result<Gradients<T>, NumericsError> {
        let store = tape.params.ok_or(NumericsError::NoParams)?;
        let mut out = Gradients::zeros_like(store);
        for (i, v) in tape.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &self.grads[v.0] {
                    out.per_param[i].copy_from_slice(g);
                }
            }
        }
        if !out.is_finite() {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<(), NumericsError> {
    match mask {
        Some(m) if m.len() != len => Err(NumericsError::DataLength {
            expected: len,
            got: m.len(),
        }),
        _ => Ok(()),
    }
}

fn softmax_strided<T: Scalar>(
    x: &[T],
    out: &mut [T],
    mask: Option<&[bool]>,
    idx: impl Iterator<Item = usize> + Clone,
) {
    let keep = |k: usize| mask.is_none_or(|m| m[k]);
    let mut max = T::neg_infinity();
    for k in idx.clone() {
        if keep(k) && x[k] > max {
            max = x[k];
        }
    }
    if max == T::neg_infinity() {
        return;
    }
    let mut total = T::zero();
    for k in idx.clone() {
        if keep(k) {
            let e = (x[k] - max).exp();
            out[k] = e;
            total = total + e;
        }
    }
    for k in idx {
        out[k] = out[k] / total;
    }
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T], gx: &mut [T], idx: impl Iterator<Item = usize> + Clone) {
    let dot: T = idx.clone().map(|k| y[k] * g[k]).sum();
    for k in idx {
        gx[k] = gx[k] + y[k] * (g[k] - dot);
    }
}
