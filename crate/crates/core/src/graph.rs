//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Every model in this crate (toy denoisers, conditioners, the noise encoder,
//! the differentiable augmentations) is written against [`Graph`]. A graph is
//! built fresh for each evaluation: leaves are registered with
//! [`Graph::constant`] or [`Graph::param`], operations append nodes, and
//! [`Graph::backward`] walks the tape in reverse to produce gradients for every
//! node that depends on a parameter.
//!
//! Tensors are row-major. Row-wise operations (softmax, layer norm, row
//! broadcasts, matrix products) view a tensor as `[rows, last_dim]`.

use std::sync::{Arc, OnceLock};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map `out[i] = sum_k w_ik * in[j_ik]`, stored as CSR.
///
/// Gathers, crops, bilinear resampling, pooling and im2col are all expressed
/// with this one operator. Output positions with no entries are zero.
#[derive(Clone, Debug)]
pub struct SparseMap {
    pub out_shape: Vec<usize>,
    pub in_len: usize,
    offsets: Vec<usize>,
    sources: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds a map from one row of `(source, weight)` pairs per output element.
    pub fn from_rows<I, R>(out_shape: Vec<usize>, in_len: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f64)>,
    {
        let out_len: usize = out_shape.iter().product();
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in rows {
            for (j, w) in row {
                assert!(j < in_len, "sparse map source {j} out of range {in_len}");
                sources.push(j as u32);
                weights.push(w);
            }
            offsets.push(sources.len());
        }
        assert_eq!(offsets.len(), out_len + 1, "sparse map row count mismatch");
        Self { out_shape, in_len, offsets, sources, weights }
    }

    /// Pure index gather; `None` produces a zero.
    pub fn gather(out_shape: Vec<usize>, in_len: usize, index: impl IntoIterator<Item = Option<usize>>) -> Self {
        Self::from_rows(out_shape, in_len, index.into_iter().map(|j| j.map(|j| (j, 1.0))))
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_len);
        (0..self.out_len())
            .map(|i| {
                let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
                self.sources[lo..hi].iter().zip(&self.weights[lo..hi]).map(|(&j, &w)| w * input[j as usize]).sum()
            })
            .collect()
    }

    fn apply_transpose_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            for (&j, &w) in self.sources[lo..hi].iter().zip(&self.weights[lo..hi]) {
                grad_in[j as usize] += w * g;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    /// Value shifted by a constant; gradient passes unchanged.
    Shift(Var),
    Tanh(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    /// Rounded value, identity gradient.
    StraightRound(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Sparse(Var, Arc<SparseMap>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` did not influence the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::new(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `tanh` through a single `exp`; libm's version is several times slower.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        // avoid cancellation near zero
        let x2 = x * x;
        return x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0);
    }
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

/// Below this many right-hand-side elements a direct loop beats packing.
const SMALL_RHS: usize = 4096;

/// `out[i, :] = beta * out[i, :] + a[i, :] @ b`, with `b` zero-padded to
/// `[k, N]` so the inner loop has a fixed length.
#[inline(always)]
fn padded_gemm<const N: usize>(a: &[f64], k: usize, bp: &[[f64; N]], n: usize, out: &mut [f64], beta: f64) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        let mut acc = [0.0; N];
        for (&x, brow) in arow.iter().zip(bp) {
            for j in 0..N {
                acc[j] += x * brow[j];
            }
        }
        if beta == 0.0 {
            orow.copy_from_slice(&acc[..n]);
        } else {
            for (o, v) in orow.iter_mut().zip(&acc) {
                *o = beta * *o + v;
            }
        }
    }
}

/// `out += a^T @ g` with `a: [m, k]`, `g: [m, n]`, accumulated in a padded
/// `[k, N]` buffer.
#[inline(always)]
fn padded_gemm_tn<const N: usize>(a: &[f64], k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    let mut acc = vec![[0.0; N]; k];
    let mut row = [0.0; N];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        row[..n].copy_from_slice(grow);
        for (&x, arow_acc) in arow.iter().zip(acc.iter_mut()) {
            for j in 0..N {
                arow_acc[j] += x * row[j];
            }
        }
    }
    for (orow, arow_acc) in out.chunks_exact_mut(n).zip(&acc) {
        for (o, v) in orow.iter_mut().zip(arow_acc) {
            *o += v;
        }
    }
}

fn pad_rows<const N: usize>(b: &[f64], k: usize, n: usize, trans: bool) -> Vec<[f64; N]> {
    let mut out = vec![[0.0; N]; k];
    for (p, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().take(n).enumerate() {
            *v = if trans { b[j * k + p] } else { b[p * n + j] };
        }
    }
    out
}

macro_rules! dispatch_width {
    ($n:expr, $f:ident, $($args:expr),*) => {
        match $n {
            0..=4 => $f::<4>($($args),*),
            5..=8 => $f::<8>($($args),*),
            9..=16 => $f::<16>($($args),*),
            17..=32 => $f::<32>($($args),*),
            _ => $f::<64>($($args),*),
        }
    };
}

#[inline(always)]
fn small_gemm_n<const N: usize>(a: &[f64], k: usize, b: &[f64], n: usize, trans_b: bool, out: &mut [f64], beta: f64) {
    let bp = pad_rows::<N>(b, k, n, trans_b);
    padded_gemm::<N>(a, k, &bp, n, out, beta)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn small_gemm_avx2(a: &[f64], k: usize, b: &[f64], n: usize, trans_b: bool, out: &mut [f64], beta: f64) {
    dispatch_width!(n, small_gemm_n, a, k, b, n, trans_b, out, beta)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn small_gemm_tn_avx2(a: &[f64], k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    dispatch_width!(n, padded_gemm_tn, a, k, g, n, out)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        static DETECTED: OnceLock<bool> = OnceLock::new();
        *DETECTED.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Direct product for a right-hand side of at most 64 columns.
fn small_gemm(a: &[f64], k: usize, b: &[f64], n: usize, trans_b: bool, out: &mut [f64], beta: f64) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { small_gemm_avx2(a, k, b, n, trans_b, out, beta) };
    }
    dispatch_width!(n, small_gemm_n, a, k, b, n, trans_b, out, beta)
}

fn small_gemm_tn(a: &[f64], k: usize, g: &[f64], n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { small_gemm_tn_avx2(a, k, g, n, out) };
    }
    dispatch_width!(n, padded_gemm_tn, a, k, g, n, out)
}

fn matmul_into(a: &[f64], (m, k): (usize, usize), b: &[f64], (k2, n): (usize, usize), trans_b: bool, out: &mut [f64], beta: f64) {
    if n <= 64 && k * n <= SMALL_RHS {
        small_gemm(a, k, b, n, trans_b, out, beta);
        return;
    }
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = if trans_b {
        ArrayView2::from_shape((n, k2), b).expect("rhs shape").reversed_axes()
    } else {
        ArrayView2::from_shape((k2, n), b).expect("rhs shape")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// `out += a^T @ g` with `a: [m,k]`, `g: [m,n]`, `out: [k,n]`.
fn matmul_tn_acc(a: &[f64], (m, k): (usize, usize), g: &[f64], n: usize, out: &mut [f64]) {
    if n <= 64 && k * n <= SMALL_RHS {
        small_gemm_tn(a, k, g, n, out);
        return;
    }
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape").reversed_axes();
    let gv = ArrayView2::from_shape((m, n), g).expect("grad shape");
    let mut cv = ArrayViewMut2::from_shape((k, n), out).expect("out shape");
    general_mat_mul(1.0, &av, &gv, 1.0, &mut cv);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape);
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r, c] + row[c]` for every row `r`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        assert_eq!(tr.len(), c, "row broadcast width mismatch");
        let data = ta.data.chunks(c).flat_map(|r| r.iter().zip(&tr.data).map(|(x, y)| x + y)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::new(shape, data), Op::AddRow(a, row), rg)
    }

    /// `a[r, c] * row[c]` for every row `r`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        assert_eq!(tr.len(), c, "row broadcast width mismatch");
        let data = ta.data.chunks(c).flat_map(|r| r.iter().zip(&tr.data).map(|(x, y)| x * y)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::new(shape, data), Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, fast_tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Rounds to the nearest integer in the forward pass and acts as the
    /// identity in the backward pass.
    pub fn straight_round(&mut self, a: Var) -> Var {
        self.map(a, f64::round, Op::StraightRound(a))
    }

    fn mat_dims(t: &Tensor) -> (usize, usize) {
        assert!(t.shape.len() == 2, "matrix expected, got shape {:?}", t.shape);
        (t.shape[0], t.shape[1])
    }

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = Self::mat_dims(ta);
        let (k2, n) = Self::mat_dims(tb);
        assert_eq!(k, k2, "matmul inner dimension mismatch {:?} @ {:?}", ta.shape, tb.shape);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, (m, k), &tb.data, (k2, n), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a @ b^T` for 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = Self::mat_dims(ta);
        let (n, k2) = Self::mat_dims(tb);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch {:?} @ {:?}^T", ta.shape, tb.shape);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, (m, k), &tb.data, (k2, n), true, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::LayerNormRows(a, inv_std), rg)
    }

    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), map.in_len, "sparse map expects {} inputs, got {}", map.in_len, ta.len());
        let value = Tensor::new(map.out_shape.clone(), map.apply(&ta.data));
        let rg = self.rg(a);
        self.push(value, Op::Sparse(a, map), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = Self::mat_dims(self.value(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = Self::mat_dims(self.value(p));
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.value(a);
        assert_eq!(shape.iter().product::<usize>(), ta.len(), "reshape size mismatch");
        let value = Tensor::new(shape, ta.data.clone());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Sum of squared differences `sum((a - b)^2)`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.sum(sq)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar output");
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Gradients { grads, shapes }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, s) in [(a, 1.0), (b, 1.0)] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(a, 1.0), (b, -1.0)] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = &self.value(b).data;
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * z;
                    }
                }
                if self.rg(b) {
                    let va = &self.value(a).data;
                    let gb = self.acc(grads, b).unwrap();
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, row) {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = self.value(row).len();
                if self.rg(a) {
                    let vr = &self.value(row).data;
                    let ga = self.acc(grads, a).unwrap();
                    for (gchunk, achunk) in g.chunks(c).zip(ga.chunks_mut(c)) {
                        for ((x, y), z) in achunk.iter_mut().zip(gchunk).zip(vr) {
                            *x += y * z;
                        }
                    }
                }
                if self.rg(row) {
                    let va = &self.value(a).data;
                    let gr = self.acc(grads, row).unwrap();
                    for (gchunk, achunk) in g.chunks(c).zip(va.chunks(c)) {
                        for ((x, y), z) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Shift(a) | Op::StraightRound(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += y * (1.0 - o * o);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(a) {
                    let va = &self.value(a).data;
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                        *x += y * gelu_grad(*z);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.rg(a) {
                    let va = &self.value(a).data;
                    let ga = self.acc(grads, a).unwrap();
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                        if *z >= lo && *z <= hi {
                            *x += y;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = Self::mat_dims(ta);
                let n = tb.shape[1];
                if self.rg(a) {
                    let bd = &tb.data;
                    let ga = self.acc(grads, a).unwrap();
                    // dA = G @ B^T
                    matmul_into(g, (m, n), bd, (n, k), true, ga, 1.0);
                }
                if self.rg(b) {
                    let ad = &ta.data;
                    let gb = self.acc(grads, b).unwrap();
                    // dB = A^T @ G
                    matmul_tn_acc(ad, (m, k), g, n, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = Self::mat_dims(ta);
                let n = tb.shape[0];
                if self.rg(a) {
                    let bd = &tb.data;
                    let ga = self.acc(grads, a).unwrap();
                    // dA = G @ B
                    matmul_into(g, (m, n), bd, (n, k), false, ga, 1.0);
                }
                if self.rg(b) {
                    let ad = &ta.data;
                    let gb = self.acc(grads, b).unwrap();
                    // dB = G^T @ A
                    matmul_tn_acc(g, (m, n), ad, k, gb);
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = out.cols();
                    for ((gr, yr), xr) in g.chunks(c).zip(out.data.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows(a, ref inv_std) => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = out.cols();
                    let cf = c as f64;
                    for (((gr, yr), xr), is) in g.chunks(c).zip(out.data.chunks(c)).zip(ga.chunks_mut(c)).zip(inv_std) {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cf;
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += is * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::Sparse(a, ref map) => {
                if let Some(ga) = self.acc(grads, a) {
                    map.apply_transpose_into(g, ga);
                }
            }
            Op::ConcatCols(ref parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            for (x, y) in gp[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *x += y;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let s = g[0];
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }
}
