//! Tape-based reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every value on the tape is a [`Tensor`] whose rows index batch samples.
//! Operations are evaluated eagerly when recorded; [`Tape::backward`] then
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! every node that (transitively) depends on a leaf created with
//! `requires_grad = true`.
//!
//! ```
//! use dnf_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let theta = tape.leaf(Tensor::scalar(3.0), true);
//! let sq = tape.square(theta);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data()[0], 6.0);
//! ```

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        // v·0 is NaN exactly when v is infinite or NaN; summing without an
        // early exit lets the loop vectorize
        self.data.iter().fold(0.0, |acc, v| acc + v * 0.0) == 0.0
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "accumulation shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row/column-strided `C ← α·A·B + β·C` with `A` m×k and `B` k×n.
///
/// # Safety
/// The pointers and strides must describe valid, non-overlapping matrices.
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
}

/// Row-major `A·B` with `A` m×k and `B` k×n given by strides.
#[allow(clippy::too_many_arguments)]
fn product(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    if m == 0 || k == 0 || n == 0 {
        return vec![0.0; m * n];
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1;
    assert!(a.len() >= span(m, k, rsa, csa) && b.len() >= span(k, n, rsb, csb));
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: the operands are in bounds (checked above) and with β = 0 the
    // output is written without being read, so the spare capacity may start
    // uninitialized; all m·n entries are written before `set_len`
    unsafe {
        dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        c.set_len(m * n);
    }
    c
}

/// `x · wᵀ + b` where `x` is n×in, `w` is out×in (row-major), `b` has length out.
pub(crate) fn affine_rows(x: &Tensor, w: &[f64], b: &[f64], outputs: usize) -> Tensor {
    let (n, inputs) = x.shape();
    assert_eq!(w.len(), inputs * outputs);
    assert_eq!(b.len(), outputs);
    let mut out = Tensor::zeros(n, outputs);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(b);
    }
    if n > 0 && inputs > 0 && outputs > 0 {
        unsafe {
            dgemm(
                n,
                inputs,
                outputs,
                1.0,
                x.data.as_ptr(),
                inputs as isize,
                1,
                w.as_ptr(),
                1,
                inputs as isize,
                1.0,
                out.data.as_mut_ptr(),
                outputs as isize,
                1,
            );
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    /// Keeps `σ(z)` from the forward pass for the backward pass.
    Swish(Var, Vec<f64>),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SelectCols(Var, Vec<usize>),
    MergeCols(Vec<(Var, Vec<usize>)>),
    AffineCols { x: Var, scale: Vec<f64> },
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    RowFunction { x: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, zero-filled when absent.
    pub fn data_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// Branch-free `e^x`, accurate to a few ulp over the whole finite range.
/// Inputs are clamped to [−708, 709], which keeps the 2^n scaling a normal
/// number. The activations evaluate this hundreds of thousands of times per
/// training step, and unlike the libm call it vectorizes.
#[inline(always)]
fn fast_exp(x: f64) -> f64 {
    // adding then subtracting 1.5·2^52 rounds to the nearest integer
    const ROUND: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1/k! for k = 0..=13
    const C: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let x = x.clamp(-708.0, 709.0);
    let n = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series of e^r for |r| ≤ ln2/2 in Estrin form, which keeps the
    // dependency chains short
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (C[0] + C[1] * r) + (C[2] + C[3] * r) * r2;
    let q1 = (C[4] + C[5] * r) + (C[6] + C[7] * r) * r2;
    let q2 = (C[8] + C[9] * r) + (C[10] + C[11] * r) * r2;
    let q3 = C[12] + C[13] * r;
    let p = (q0 + q1 * r4) + (q2 + q3 * r4) * r8;
    let bits = ((n + 1023.0 + ROUND).to_bits() & 0x7ff) << 52;
    p * f64::from_bits(bits)
}

#[inline(always)]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-z))
}

#[inline(always)]
fn sigmoid_kernel(out: &mut [f64], z: &[f64]) {
    for (o, &v) in out.iter_mut().zip(z) {
        *o = sigmoid(v);
    }
}

#[inline(always)]
fn swish_kernel(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x *= sigmoid(*x);
    }
}

#[inline(always)]
fn swish_grad_kernel(out: &mut [f64], g: &[f64], z: &[f64], sig: &[f64]) {
    let n = out.len();
    let (g, z, sig) = (&g[..n], &z[..n], &sig[..n]);
    for i in 0..n {
        let s = sig[i];
        out[i] = g[i] * (s + z[i] * s * (1.0 - s));
    }
}

// Wider-vector copies of the kernels. Rust never contracts `a * b + c` into
// a fused multiply-add on its own, so every copy rounds identically and the
// results do not depend on which one runs.
#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx512f")]
    pub unsafe fn sigmoid_avx512(out: &mut [f64], z: &[f64]) {
        super::sigmoid_kernel(out, z)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn sigmoid_avx2(out: &mut [f64], z: &[f64]) {
        super::sigmoid_kernel(out, z)
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn swish_grad_avx512(out: &mut [f64], g: &[f64], z: &[f64], sig: &[f64]) {
        super::swish_grad_kernel(out, g, z, sig)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn swish_grad_avx2(out: &mut [f64], g: &[f64], z: &[f64], sig: &[f64]) {
        super::swish_grad_kernel(out, g, z, sig)
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn swish_avx512(v: &mut [f64]) {
        super::swish_kernel(v)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn swish_avx2(v: &mut [f64]) {
        super::swish_kernel(v)
    }
}

/// `out[i] = σ(z[i])`.
pub(crate) fn sigmoid_slice(out: &mut [f64], z: &[f64]) {
    assert_eq!(out.len(), z.len());
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime
            return unsafe { wide::sigmoid_avx512(out, z) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above
            return unsafe { wide::sigmoid_avx2(out, z) };
        }
    }
    sigmoid_kernel(out, z)
}

/// `out[i] = g[i]·swish'(z[i])` given `sig[i] = σ(z[i])`.
fn swish_grad_slice(out: &mut [f64], g: &[f64], z: &[f64], sig: &[f64]) {
    assert!(g.len() == out.len() && z.len() == out.len() && sig.len() == out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime
            return unsafe { wide::swish_grad_avx512(out, g, z, sig) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above
            return unsafe { wide::swish_grad_avx2(out, g, z, sig) };
        }
    }
    swish_grad_kernel(out, g, z, sig)
}

/// Applies Swish to every element in place.
pub(crate) fn swish_slice(v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime
            return unsafe { wide::swish_avx512(v) };
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: as above
            return unsafe { wide::swish_avx2(v) };
        }
    }
    swish_kernel(v)
}

/// Swish activation `z / (1 + e^{-z})`.
pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x · wᵀ + b` with `w` of shape out×in and `b` of shape 1×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(self.value(x).cols(), wv.cols(), "linear input width mismatch");
        assert_eq!(bv.data.len(), wv.rows(), "linear bias width mismatch");
        let out = affine_rows(self.value(x), &wv.data, &bv.data, wv.rows());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let z = self.value(a);
        let mut sig = vec![0.0; z.data.len()];
        sigmoid_slice(&mut sig, &z.data);
        let out = Tensor {
            rows: z.rows,
            cols: z.cols,
            data: z.data.iter().zip(&sig).map(|(v, s)| v * s).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Swish(a, sig), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Gathers the listed columns into a new matrix.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), cols.len());
        for i in 0..src.rows() {
            let r = src.row(i);
            for (j, &c) in cols.iter().enumerate() {
                out.data[i * cols.len() + j] = r[c];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SelectCols(a, cols.to_vec()), rg)
    }

    /// Scatters each part's columns into the listed destination columns of
    /// a new matrix of width `width`. Every destination column must be
    /// covered exactly once.
    pub fn merge_cols(&mut self, parts: &[(Var, &[usize])], width: usize) -> Var {
        let rows = self.value(parts[0].0).rows();
        let mut covered = vec![false; width];
        let mut out = Tensor::zeros(rows, width);
        for (v, cols) in parts {
            let src = self.value(*v);
            assert_eq!(src.rows(), rows);
            assert_eq!(src.cols(), cols.len());
            for &c in cols.iter() {
                assert!(!covered[c], "column {c} merged twice");
                covered[c] = true;
            }
            for i in 0..rows {
                for (j, &c) in cols.iter().enumerate() {
                    out.data[i * width + c] = src.data[i * cols.len() + j];
                }
            }
        }
        assert!(covered.iter().all(|&c| c), "merge leaves columns uncovered");
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        let owned = parts.iter().map(|(v, c)| (*v, c.to_vec())).collect();
        self.push(out, Op::MergeCols(owned), rg)
    }

    /// Per-column affine map `x[:, j] * scale[j] + shift[j]` with constant
    /// coefficients.
    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), scale.len());
        assert_eq!(src.cols(), shift.len());
        let mut out = src.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * scale[j] + shift[j];
            }
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::AffineCols {
                x: a,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    /// Row sums, giving an n×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|i| src.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(src.rows(), 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.data.len().max(1) as f64;
        let out = Tensor::scalar(src.data.iter().sum::<f64>() / n);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Records an externally evaluated per-row scalar function `f(x_i)` whose
    /// values and row gradients `∇f(x_i)` are supplied by the caller.
    pub fn row_function(&mut self, x: Var, values: Vec<f64>, grad: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(values.len(), xv.rows());
        assert_eq!(grad.shape(), xv.shape());
        let out = Tensor::from_vec(values.len(), 1, values);
        let rg = self.rg(x);
        self.push(out, Op::RowFunction { x, grad }, rg)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NumericalFailure(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::NumericalFailure("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-finite gradient at tape node {idx}"
                )));
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, inputs) = xv.shape();
                let outputs = wv.rows();
                if self.rg(*x) {
                    let dx = Tensor::from_vec(
                        n,
                        inputs,
                        product(n, outputs, inputs, &g.data, outputs as isize, 1, &wv.data, inputs as isize, 1),
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let dw = Tensor::from_vec(
                        outputs,
                        inputs,
                        product(outputs, n, inputs, &g.data, 1, outputs as isize, &xv.data, inputs as isize, 1),
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; outputs];
                    for i in 0..n {
                        for (acc, v) in db.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*b).shape();
                    self.accumulate(grads, *b, Tensor::from_vec(shape.0, shape.1, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Swish(a, sig) => {
                let z = self.value(*a);
                let mut data = vec![0.0; z.data.len()];
                swish_grad_slice(&mut data, &g.data, &z.data, sig);
                self.accumulate(grads, *a, Tensor::from_vec(z.rows, z.cols, data));
            }
            Op::Tanh(a) => {
                let d = g.zip(out, |gv, t| gv * (1.0 - t * t));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip(out, |gv, e| gv * e);
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip(self.value(*a), |gv, z| gv * z.signum() * (z != 0.0) as u8 as f64);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip(self.value(*a), |gv, z| 2.0 * gv * z);
                self.accumulate(grads, *a, d);
            }
            Op::SelectCols(a, cols) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        d.data[i * src.cols() + c] += g.data[i * cols.len() + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MergeCols(parts) => {
                let width = out.cols();
                for (v, cols) in parts {
                    if !self.rg(*v) {
                        continue;
                    }
                    let mut d = Tensor::zeros(out.rows(), cols.len());
                    for i in 0..out.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            d.data[i * cols.len() + j] = g.data[i * width + c];
                        }
                    }
                    self.accumulate(grads, *v, d);
                }
            }
            Op::AffineCols { x, scale } => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                        *v *= scale[j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SumCols(a) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let gi = g.data[i];
                    d.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data[0] / n));
            }
            Op::RowFunction { x, grad } => {
                let mut d = grad.clone();
                for i in 0..d.rows() {
                    let gi = g.data[i];
                    d.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = f(&mut tape, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.data_or_zeros(x, x0.data().len());
        let h = 1e-6;
        for k in 0..x0.data().len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[k] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(xp, false);
                let y = f(&mut t, xv);
                let s = t.sum(y);
                t.value(s).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                "coord {k}: fd {fd} vs ad {}",
                g[k]
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(2.5), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let zero = tape.scale(theta, 0.0);
        let l = tape.add(zero, c);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(theta).unwrap().data()[0], 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.square(theta);
        let l = tape.sum(sq);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(theta).unwrap().data()[0], 6.0);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = Tensor::from_vec(2, 3, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]);
        fd_check(|t, x| t.swish(x), x0.clone());
        fd_check(|t, x| t.tanh(x), x0.clone());
        fd_check(|t, x| t.exp(x), x0.clone());
        fd_check(|t, x| t.abs(x), x0.clone());
        fd_check(
            |t, x| {
                let a = t.select_cols(x, &[2, 0]);
                let b = t.select_cols(x, &[1]);
                let e = t.exp(b);
                let m = t.merge_cols(&[(a, &[0, 2]), (e, &[1])], 3);
                let s = t.mul(m, x);
                t.sum_cols(s)
            },
            x0.clone(),
        );
        fd_check(
            |t, x| {
                let y = t.affine_cols(x, &[2.0, -1.0, 0.5], &[1.0, 0.0, 3.0]);
                let sq = t.square(y);
                t.mean(sq)
            },
            x0,
        );
    }

    #[test]
    fn linear_matches_finite_differences() {
        let x0 = Tensor::from_vec(3, 2, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]);
        let w = Tensor::from_vec(2, 2, vec![0.5, -0.3, 1.2, 0.8]);
        let b = Tensor::from_vec(1, 2, vec![0.1, -0.2]);
        fd_check(
            |t, x| {
                let w = t.constant(w.clone());
                let b = t.constant(b.clone());
                let y = t.linear(x, w, b);
                t.swish(y)
            },
            x0.clone(),
        );
        // gradient with respect to the weights
        let wflat = w.clone();
        fd_check(
            |t, wv| {
                let x = t.constant(x0.clone());
                let b = t.constant(b.clone());
                let y = t.linear(x, wv, b);
                t.square(y)
            },
            wflat,
        );
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(1000.0), true);
        let e = tape.exp(theta);
        let l = tape.sum(e);
        assert!(matches!(tape.backward(l), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -708.0;
        while x < 709.0 {
            let (a, b) = (fast_exp(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
            x += 0.00731;
        }
        assert!(worst < 1e-15, "worst relative error {worst:e}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(-1000.0) > 0.0 && fast_exp(-1000.0) < 1e-300);
        assert!(fast_exp(1000.0).is_finite());
        assert!(fast_exp(f64::NAN).is_nan());
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn slice_kernels_match_scalar_bit_for_bit() {
        let z: Vec<f64> = (0..1003).map(|i| (i as f64 * 0.7371).sin() * 40.0 - 3.0).collect();
        let mut sig = vec![0.0; z.len()];
        sigmoid_slice(&mut sig, &z);
        let mut sw = z.clone();
        swish_slice(&mut sw);
        for i in 0..z.len() {
            assert_eq!(sig[i].to_bits(), sigmoid(z[i]).to_bits());
            assert_eq!(sw[i].to_bits(), swish(z[i]).to_bits());
            let reference = 1.0 / (1.0 + (-z[i]).exp());
            assert!((sig[i] - reference).abs() <= 1e-15 * reference);
        }
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(100.0) - 100.0).abs() < 1e-12);
        assert!((swish(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((swish(-1.278_464_542_761_074) - (-0.278_464_542_761_074)).abs() < 1e-12);
    }
}
