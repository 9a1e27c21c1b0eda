//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node whose inputs are earlier
//! nodes, so the node vector is already in topological order. `backward`
//! walks it once in reverse and accumulates gradients across fan-out.
//!
//! ```
//! use tricon::graph::Graph;
//! use tricon::tensor::Tensor;
//!
//! let mut g: Graph = Graph::new();
//! let w = g.input(Tensor::scalar(0.0));
//! let y = g.sigmoid(w);
//! let y = g.scale(y, 3.0);
//! let grads = g.backward(y).unwrap();
//! assert!((grads.wrt(w).unwrap().item() - 0.75).abs() < 1e-7);
//! ```

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, softmax_slice, Real, Result, Tensor, TensorError,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient faults, used to prove the oracle suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the sigmoid derivative by 1.05.
    SigmoidGrad,
    /// Scales the left-operand matmul gradient by 1.05.
    MatmulGrad,
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Broadcast(Var),
    Scale(Var, T),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<T> },
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    RowMax { x: Var, argmax: Vec<usize> },
    ColMax { x: Var, argmax: Vec<usize> },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train: bool,
    fault: Option<Fault>,
    seed: u64,
    seed_counter: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    /// An inference-mode graph (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: false,
            fault: None,
            seed: 0,
            seed_counter: 0,
        }
    }

    pub fn training() -> Self {
        Self::training_seeded(0)
    }

    /// Training-mode graph whose dropout masks derive from `seed`.
    pub fn training_seeded(seed: u64) -> Self {
        Self {
            train: true,
            seed,
            ..Self::new()
        }
    }

    /// Next seed in this graph's deterministic stream.
    pub fn fresh_seed(&mut self) -> u64 {
        self.seed_counter += 1;
        splitmix64(self.seed ^ self.seed_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        matmul_into(av.data(), bv.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        matmul_nt_into(av.data(), bv.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(mismatch(name, av, rv));
        }
        let mut out = av.clone();
        let cols = av.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = f(*x, rv.data()[i % cols]);
        }
        Ok(out)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    /// Multiplies `a` by a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.shape() != [1, 1] {
            return Err(mismatch("mul_scalar", av, sv));
        }
        let k = sv.item();
        let out = av.map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulScalar(a, s), ng))
    }

    /// Repeats a `1 x 1` node into a `rows x cols` matrix.
    pub fn broadcast(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != [1, 1] {
            return Err(TensorError::InvalidShape {
                op: "broadcast",
                shape: sv.shape(),
                reason: "expected 1x1",
            });
        }
        let out = Tensor::full(rows, cols, sv.item());
        let ng = self.ng(s);
        Ok(self.push(out, Op::Broadcast(s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let k = T::lit(k as f64);
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f32) -> Var {
        let k = T::lit(k as f64);
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.unary(a, Op::Gelu(a), |x| {
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), T::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), T::sqrt)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    /// Repeats an `r x 1` column across `cols` columns.
    pub fn repeat_cols(&mut self, col: Var, cols: usize) -> Result<Var> {
        if self.shape(col)[1] != 1 {
            return Err(TensorError::InvalidShape {
                op: "repeat_cols",
                shape: self.shape(col),
                reason: "expected a single column",
            });
        }
        let ones = self.constant(Tensor::full(1, cols, T::one()));
        self.matmul(col, ones)
    }

    /// Scales row `i` of `a` by `col[i]`, with `col` an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let c = self.shape(a)[1];
        let rep = self.repeat_cols(col, c)?;
        self.mul(a, rep)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let (lo, hi) = (T::lit(lo as f64), T::lit(hi as f64));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let p = softmax_slice(av.row_slice(r));
            out.data_mut()[r * av.cols()..(r + 1) * av.cols()].copy_from_slice(&p);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max).f64();
            let lse = m + row.iter().map(|&x| (x.f64() - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x = T::lit(x.f64() - lse);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f32) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&x| x.f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x.f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for x in row.iter_mut() {
                *x = T::lit((x.f64() - mean) * inv);
            }
            inv_std.push(T::lit(inv));
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    /// Column-wise mean, `L x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MeanRows(a), ng))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows())
            .map(|r| T::lit(av.row_slice(r).iter().map(|&x| x.f64()).sum::<f64>()))
            .collect();
        let out = Tensor::new(av.rows(), 1, data).expect("row sums");
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(T::lit(s)), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(T::lit(s)), Op::MeanAll(a), ng)
    }

    /// Maximum of each row, `r x c -> r x 1`.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(TensorError::InvalidShape {
                op: "row_max",
                shape: av.shape(),
                reason: "no columns",
            });
        }
        let mut argmax = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (i, m) = argmax_of(av.row_slice(r));
            argmax.push(i);
            data.push(m);
        }
        let out = Tensor::new(av.rows(), 1, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::RowMax { x: a, argmax }, ng))
    }

    /// Maximum of each column, `r x c -> 1 x c`.
    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(TensorError::InvalidShape {
                op: "col_max",
                shape: av.shape(),
                reason: "no rows",
            });
        }
        let cols = av.cols();
        let mut argmax = vec![0usize; cols];
        let mut data = av.row_slice(0).to_vec();
        for r in 1..av.rows() {
            for (c, &x) in av.row_slice(r).iter().enumerate() {
                if x > data[c] {
                    data[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let out = Tensor::new(1, cols, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::ColMax { x: a, argmax }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape: av.shape(),
                reason: "row range out of bounds",
            });
        }
        let c = av.cols();
        let out = Tensor::new(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape: av.shape(),
                reason: "column range out of bounds",
            });
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(av.rows(), len, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows: no inputs".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f32) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let n = T::lit((row.iter().map(|&x| x.f64().powi(2)).sum::<f64>() + eps as f64).sqrt());
            for x in row.iter_mut() {
                *x = *x / n;
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, ng)
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f32, seed: u64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = T::lit(1.0 / keep as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let av = self.value(a);
        let mask: Vec<T> = (0..av.len())
            .map(|_| if rng.random::<f32>() < keep { scale } else { T::zero() })
            .collect();
        let mut out = av.clone();
        for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        let ng = self.ng(a);
        self.push(out, Op::Dropout { x: a, mask }, ng)
    }

    /// `x W + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Per-row `KL(p || q)` from log-probabilities, `r x c -> r x 1`.
    pub fn kl_div_rows(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        let p = self.exp(log_p);
        let diff = self.sub(log_p, log_q)?;
        let prod = self.mul(p, diff)?;
        Ok(self.sum_cols(prod))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets,
    /// with probabilities clamped into `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f32]) -> Result<Var> {
        let [r, c] = self.shape(p);
        if r * c != targets.len() || r * c == 0 {
            return Err(TensorError::InvalidShape {
                op: "binary_cross_entropy",
                shape: [r, c],
                reason: "target count differs from prediction count",
            });
        }
        let y = self.constant(Tensor::new(r, c, targets.iter().map(|&t| T::lit(t as f64)).collect())?);
        let one_minus_y = self.constant(Tensor::new(
            r,
            c,
            targets.iter().map(|&t| T::lit(1.0 - t as f64)).collect(),
        )?);
        let pc = self.clamp(p, 1e-7, 1.0 - 1e-7);
        let lp = self.ln(pc);
        let q = self.scale(pc, -1.0);
        let q = self.add_const(q, 1.0);
        let lq = self.ln(q);
        let a = self.mul(y, lp)?;
        let b = self.mul(one_minus_y, lq)?;
        let s = self.add(a, b)?;
        let m = self.mean_all(s);
        Ok(self.scale(m, -1.0))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    matmul_nt_into(gy.data(), bv.data(), ga.data_mut(), m, n, k);
                    if self.fault == Some(Fault::MatmulGrad) {
                        ga.scale_assign(T::lit(1.05));
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    matmul_tn_into(av.data(), gy.data(), gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T: da = gy b, db = gy^T a
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    matmul_into(gy.data(), bv.data(), ga.data_mut(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(n, k);
                    matmul_tn_into(gy.data(), av.data(), gb.data_mut(), m, n, k);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, gy.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = zip_map(gy, val(*b), |g, x| g * x);
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = zip_map(gy, val(*a), |g, x| g * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gy.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, column_sums(gy));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let cols = av.cols();
                if self.ng(*a) {
                    let mut g = gy.clone();
                    for (i, x) in g.data_mut().iter_mut().enumerate() {
                        *x *= rv.data()[i % cols];
                    }
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*row) {
                    let prod = zip_map(gy, av, |g, x| g * x);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                if self.ng(*a) {
                    self.accumulate(grads, *a, gy.map(|g| g * k));
                }
                if self.ng(*s) {
                    let dot: f64 = gy.data().iter().zip(val(*a).data()).map(|(&g, &x)| (g * x).f64()).sum();
                    self.accumulate(grads, *s, Tensor::scalar(T::lit(dot)));
                }
            }
            Op::Broadcast(s) => self.accumulate(grads, *s, Tensor::scalar(T::lit(gy.sum()))),
            Op::Scale(a, k) => self.accumulate(grads, *a, gy.map(|g| g * *k)),
            Op::AddConst(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Sigmoid(a) => {
                let k = T::lit(if self.fault == Some(Fault::SigmoidGrad) {
                    1.05
                } else {
                    1.0
                });
                let g = zip_map(gy, y, |g, s| k * g * s * (T::one() - s));
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(gy, y, |g, t| g * (T::one() - t * t))),
            Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let (half, one, three) = (T::lit(0.5), T::one(), T::lit(3.0));
                let g = zip_map(gy, val(*a), |g, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let du = c * (one + three * k * x * x);
                    g * (half * (one + t) + half * x * (one - t * t) * du)
                });
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(gy, y, |g, e| g * e)),
            Op::Ln(a) => self.accumulate(grads, *a, zip_map(gy, val(*a), |g, x| g / x)),
            Op::Sqrt(a) => self.accumulate(grads, *a, zip_map(gy, y, |g, s| g * T::lit(0.5) / s)),
            Op::Recip(a) => self.accumulate(grads, *a, zip_map(gy, y, |g, r| -g * r * r)),
            Op::Square(a) => self.accumulate(grads, *a, zip_map(gy, val(*a), |g, x| T::lit(2.0) * g * x)),
            Op::Clamp(a, lo, hi) => {
                let g = zip_map(gy, val(*a), |g, x| if x < *lo || x > *hi { T::zero() } else { g });
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut g = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        g.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let cols = y.cols();
                let mut g = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let s: T = gr.iter().copied().sum();
                    for c in 0..cols {
                        g.data_mut()[r * cols + c] = gr[c] - yr[c].exp() * s;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNormRows { x, inv_std } => {
                let cols = y.cols();
                let n = T::lit(cols as f64);
                let mut g = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let sum_g: T = gr.iter().copied().sum();
                    let sum_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        g.data_mut()[r * cols + c] = inv_std[r] / n * (n * gr[c] - sum_g - yr[c] * sum_gy);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let k = T::lit(1.0 / av.rows() as f64);
                let mut g = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for c in 0..av.cols() {
                        g.set(r, c, gy.data()[c] * k);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let mut g = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for c in 0..av.cols() {
                        g.set(r, c, gy.data()[r]);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumAll(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), gy.item()));
            }
            Op::MeanAll(a) => {
                let av = val(*a);
                let k = gy.item() / T::lit(av.len() as f64);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), k));
            }
            Op::RowMax { x, argmax } => {
                let xv = val(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &c) in argmax.iter().enumerate() {
                    g.set(r, c, gy.data()[r]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::ColMax { x, argmax } => {
                let xv = val(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    g.set(r, c, gy.data()[c]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut g = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut g = Tensor::zeros(av.rows(), av.cols());
                let len = gy.cols();
                for r in 0..av.rows() {
                    let dst = r * av.cols() + start;
                    g.data_mut()[dst..dst + len].copy_from_slice(gy.row_slice(r));
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let c = gy.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.ng(p) {
                        let data = gy.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(rows, c, data).expect("slice"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(gy.rows() * cols);
                        for r in 0..gy.rows() {
                            data.extend_from_slice(&gy.row_slice(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, Tensor::new(gy.rows(), cols, data).expect("slice"));
                    }
                    offset += cols;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = y.cols();
                let mut g = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        g.data_mut()[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Dropout { x, mask } => {
                let mut g = gy.clone();
                for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *x, g);
            }
        }
    }
}

fn argmax_of<T: Real>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut acc = vec![T::zero(); t.cols()];
    for r in 0..t.rows() {
        for (a, &v) in acc.iter_mut().zip(t.row_slice(r)) {
            *a += v;
        }
    }
    Tensor::row(&acc)
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real = f32> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node on the path to the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// One gradient per stored parameter, zero for parameters off the loss path.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.params.get(&id).cloned().unwrap_or_else(|| {
                    let p = store.get(id);
                    Tensor::zeros(p.rows(), p.cols())
                })
            })
            .collect()
    }
}
