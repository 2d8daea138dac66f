//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because an operation can only refer to
//! nodes that already exist. A tape supports one backward pass; afterwards its
//! nodes are released and further use is an error.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{argmax, gemm, Tensor};
use crate::error::{Error, Result};

/// Log arguments are clamped here so losses never reach −∞.
pub const LOG_CLAMP: f64 = 1e-12;
/// Tolerance for accepting a vector as a probability distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;
const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    AddCol { x: Var, col: Var },
    MulRow { x: Var, row: Var },
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Dropout { x: Var, keep: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    RowMax { x: Var, arg: Vec<usize> },
    ColMax { x: Var, arg: Vec<usize> },
    SumAll(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    KlDiv { p: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Borrow a [`ParamStore`] with [`Tape::with_params`] to
/// pull parameters onto the tape.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, param_vars: HashMap::new(), dropout_rng: None, consumed: false }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// Turns on dropout with a seeded stream; without this, dropout is the identity.
    pub fn enable_dropout(&mut self, seed: u64) {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed, "tape reused after backward");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.check_live()?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or(Error::NoParams)?;
        let value = store.value(id).clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, transpose_b: false }, rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, transpose_b: true }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2();
        if self.value(row).numel() != n {
            return Err(self.mismatch("add_row", x, row));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o += b);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow { x, row }, rg))
    }

    /// Adds a length-`rows` vector to every column.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2();
        if self.value(col).numel() != m {
            return Err(self.mismatch("add_col", x, col));
        }
        let c = self.value(col).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|o| *o += c[i]);
        }
        let rg = self.rg(&[x, col]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddCol { x, col }, rg))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2();
        if self.value(row).numel() != n {
            return Err(self.mismatch("mul_row", x, row));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o *= b);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MulRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(out, op, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |a| 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Inverted dropout; the identity unless the tape is training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.check_live()?;
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let keep: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() >= rate { 1.0 / (1.0 - rate) } else { 0.0 }).collect();
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().zip(&keep).map(|(a, k)| a * k).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, keep }, rg))
    }

    // ---- normalization ----------------------------------------------------

    /// Row-wise softmax after adding `mask`.
    ///
    /// `mask` holds 0 or −∞ and is either the full shape of `x` or a single
    /// row broadcast to every row. Masked entries come out exactly 0. A row
    /// with no finite entry is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let (m, n) = v.dims2();
        if let Some(mk) = mask {
            if mk.numel() != m * n && mk.numel() != n {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: v.shape().to_vec(),
                    rhs: mk.shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let mrow = mask.map(|mk| if mk.numel() == n { mk.data() } else { &mk.data()[i * n..(i + 1) * n] });
            let o = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o[j] = row[j] + mrow.map_or(0.0, |r| r[j]);
            }
            softmax_in_place(o).ok_or(Error::FullyMaskedRow { row: i })?;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(v.shape().to_vec(), out), Op::Softmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).numel() != n {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    // ---- structure --------------------------------------------------------

    /// Rows of `x` selected by `idx` (repeats allowed). Also serves as
    /// embedding lookup when `x` is a table.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let (m, n) = v.dims2();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange { index: i, len: m });
            }
            out.extend_from_slice(v.row(i));
        }
        if idx.is_empty() {
            return Err(Error::InvalidInput("gather_rows with no indices".into()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![idx.len(), n], out), Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *parts.first().ok_or_else(|| Error::InvalidInput("concat_rows of nothing".into()))?;
        let n = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *parts.first().ok_or_else(|| Error::InvalidInput("concat_cols of nothing".into()))?;
        let m = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let (m, n) = v.dims2();
        if start >= end || end > n {
            return Err(Error::InvalidInput(format!("column slice {start}..{end} of width {n}")));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, end - start], out), Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Maximum of each row, shape `[rows]`. Ties route gradient to the first.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let m = v.rows();
        let arg: Vec<usize> = (0..m).map(|i| argmax(v.row(i))).collect();
        let out = (0..m).map(|i| v.row(i)[arg[i]]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::RowMax { x, arg }, rg))
    }

    /// Maximum of each column, shape `[cols]`.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let (m, n) = v.dims2();
        let mut arg = vec![0usize; n];
        let mut out = v.row(0).to_vec();
        for i in 1..m {
            for (j, &a) in v.row(i).iter().enumerate() {
                if a > out[j] {
                    out[j] = a;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::ColMax { x, arg }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if weights.numel() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let w = self.constant(weights.reshape(self.shape(x))?);
        let p = self.mul(x, w)?;
        self.sum_all(p)
    }

    // ---- losses -----------------------------------------------------------

    /// `−log softmax(logits)[target]`. Entries of −∞ are allowed except at the target.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.check_live()?;
        let v = self.value(logits);
        let n = v.numel();
        if target >= n {
            return Err(Error::IndexOutOfRange { index: target, len: n });
        }
        if !v.data()[target].is_finite() {
            return Err(Error::InvalidInput(format!("cross-entropy target {target} has a masked logit")));
        }
        let mut probs = v.data().to_vec();
        softmax_in_place(&mut probs).ok_or(Error::FullyMaskedRow { row: 0 })?;
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data().iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let loss = (lse - v.data()[target]).max(0.0);
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Mean of per-entry binary cross-entropy between `sigmoid(logits)` and
    /// targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(logits);
        if v.numel() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidInput(format!("binary target {t} outside [0, 1]")));
        }
        let n = targets.len() as f64;
        let loss =
            v.data().iter().zip(targets).map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()).sum::<f64>() / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, rg))
    }

    /// `Σ pᵢ log(pᵢ / tᵢ)` with the model distribution `p` first and a fixed
    /// target second. Uses `0 · log 0 = 0`; logs are clamped at [`LOG_CLAMP`].
    pub fn kl_divergence(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        self.check_live()?;
        let pv = self.value(p);
        if pv.numel() != target.numel() {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        check_distribution("model distribution", pv.data())?;
        check_distribution("target distribution", target.data())?;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &t)| a * (a.max(LOG_CLAMP).ln() - t.max(LOG_CLAMP).ln()))
            .sum::<f64>();
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss.max(0.0)), Op::KlDiv { p, target: target.data().to_vec() }, rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates `d loss / d node` to every differentiable node and releases
    /// the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_unstable();

        self.nodes.clear();
        self.param_vars.clear();
        self.consumed = true;
        Ok(Gradients { grads, params })
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for a node, or `None` when nothing reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax in place. Returns `None` if no entry is finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Option<()> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
    Some(())
}

fn check_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], s: f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        buf.iter_mut().zip(g).for_each(|(b, &x)| *b += s * x);
    }
}

fn acc_map(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i));
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, transpose_b } => {
            let (m, k) = nodes[a.0].value.dims2();
            let n = node.value.cols();
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                // gA = G·Bᵀ (plain) or G·B (transposed b)
                gemm(m, n, k, g, false, bv, !*transpose_b, ga, 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if *transpose_b {
                    gemm(n, m, k, g, true, av, false, gb, 1.0);
                } else {
                    gemm(k, m, n, av, true, g, false, gb, 1.0);
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[x.0].value.dims2();
            // output is c×r
            acc_map(nodes, grads, *x, |idx| {
                let (ii, jj) = (idx / c, idx % c);
                g[jj * r + ii]
            });
        }
        Op::Add(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            acc_map(nodes, grads, *a, |k| g[k] * bv[k]);
            acc_map(nodes, grads, *b, |k| g[k] * av[k]);
        }
        Op::AddRow { x, row } => {
            let n = node.value.cols();
            acc_scaled(nodes, grads, *x, g, 1.0);
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::AddCol { x, col } => {
            let n = node.value.cols();
            acc_scaled(nodes, grads, *x, g, 1.0);
            if let Some(gc) = slot(nodes, grads, *col) {
                for (r, chunk) in g.chunks(n).enumerate() {
                    gc[r] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::MulRow { x, row } => {
            let n = node.value.cols();
            let (xv, rv) = (nodes[x.0].value.data(), nodes[row.0].value.data());
            acc_map(nodes, grads, *x, |k| g[k] * rv[k % n]);
            if let Some(gr) = slot(nodes, grads, *row) {
                for (k, (&gk, &xk)) in g.iter().zip(xv).enumerate() {
                    gr[k % n] += gk * xk;
                }
            }
        }
        Op::Scale(x, c) => acc_scaled(nodes, grads, *x, g, *c),
        Op::Softmax(x) => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let n = node.value.cols();
            let gv = nodes[gamma.0].value.data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (k, (&gk, &h)) in g.iter().zip(xhat).enumerate() {
                    gg[k % n] += gk * h;
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for (k, &gk) in g.iter().enumerate() {
                    gb[k % n] += gk;
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let nf = n as f64;
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += is / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            acc_map(nodes, grads, *x, |k| {
                let a = xv[k];
                let u = GELU_C * (a + 0.044715 * a * a * a);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                g[k] * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
            });
        }
        Op::Tanh(x) => acc_map(nodes, grads, *x, |k| g[k] * (1.0 - out[k] * out[k])),
        Op::Sigmoid(x) => acc_map(nodes, grads, *x, |k| g[k] * out[k] * (1.0 - out[k])),
        Op::Exp(x) => acc_map(nodes, grads, *x, |k| g[k] * out[k]),
        Op::Dropout { x, keep } => acc_map(nodes, grads, *x, |k| g[k] * keep[k]),
        Op::GatherRows { x, idx } => {
            let n = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * n..(src + 1) * n];
                    dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                acc_scaled(nodes, grads, *p, &g[off..off + len], 1.0);
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for p in parts {
                let c = nodes[p.0].value.cols();
                let base = off;
                acc_map(nodes, grads, *p, |k| g[(k / c) * total + base + k % c]);
                off += c;
            }
        }
        Op::SliceCols { x, start } => {
            let w = node.value.cols();
            let n = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, chunk) in g.chunks(w).enumerate() {
                    let dst = &mut gx[r * n + start..r * n + start + w];
                    dst.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Reshape(x) => acc_scaled(nodes, grads, *x, g, 1.0),
        Op::RowMax { x, arg } => {
            let n = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &j) in arg.iter().enumerate() {
                    gx[r * n + j] += g[r];
                }
            }
        }
        Op::ColMax { x, arg } => {
            let n = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (j, &r) in arg.iter().enumerate() {
                    gx[r * n + j] += g[j];
                }
            }
        }
        Op::SumAll(x) => acc_map(nodes, grads, *x, |_| g[0]),
        Op::CrossEntropy { logits, target, probs } => {
            acc_map(nodes, grads, *logits, |k| g[0] * (probs[k] - if k == *target { 1.0 } else { 0.0 }));
        }
        Op::BceWithLogits { logits, targets } => {
            let xv = nodes[logits.0].value.data();
            let n = targets.len() as f64;
            acc_map(nodes, grads, *logits, |k| g[0] * (sigmoid(xv[k]) - targets[k]) / n);
        }
        Op::KlDiv { p, target } => {
            let pv = nodes[p.0].value.data();
            acc_map(nodes, grads, *p, |k| g[0] * (pv[k].max(LOG_CLAMP).ln() - target[k].max(LOG_CLAMP).ln() + 1.0));
        }
    }
}
