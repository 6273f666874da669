//! Dense row-major tensors and the numerical primitives the model is built from.
//!
//! Everything here is a pure function of its inputs. Reductions use a single
//! fixed accumulation order so that two runs over the same data agree bit for bit.

mod rng;

pub use rng::{stream_label, RngStream};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type. Implemented for `f32` (inference) and `f64`
/// (reference oracles and gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
        (rsc, csc): (isize, isize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: `gemm_into` asserts that each buffer holds exactly the dense
        // operand its strides describe.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (isize, isize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Matrix product over raw row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when
/// `trans_b`), and `c` is `m x n`. With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&0) | None => 0,
            Some(&last) => self.data.len() / last,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of range for dim {d}");
                acc * d + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::Dimension(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::Dimension(format!(
            "inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(m, k, n, &a.data, false, &b.data, false, &mut out.data, false);
    Ok(out)
}

/// In-place softmax of one row. Returns `true` when the row had no finite
/// entry and was replaced by the uniform distribution.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        let u = T::one() / T::from_usize(row.len().max(1)).unwrap();
        row.iter_mut().for_each(|v| *v = u);
        return true;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    false
}

/// Row-wise softmax of a 2-D tensor, with the indices of degenerate rows.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 2 {
        return Err(TensorError::Dimension(format!(
            "softmax_rows needs a 2-D tensor, got {:?}",
            x.shape
        )));
    }
    let mut out = x.clone();
    let mut degenerate = Vec::new();
    for r in 0..out.rows() {
        if softmax_in_place(out.row_mut(r)) {
            degenerate.push(r);
        }
    }
    Ok((out, degenerate))
}

/// Reciprocal RMS of a row: `1 / sqrt(mean(x^2) + eps)`.
pub fn inv_rms<T: Scalar>(x: &[T], eps: T) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss = ss + v * v;
    }
    let n = T::from_usize(x.len()).unwrap();
    T::one() / (ss / n + eps).sqrt()
}

/// `out_d = gain_d * x_d / sqrt(mean(x^2) + eps)` for a single row.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) {
    let r = inv_rms(x, eps);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (v * r);
    }
}

/// RMS normalisation over the last dimension.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if x.cols() != gain.len() {
        return Err(TensorError::Dimension(format!(
            "last dim {} does not match gain length {}",
            x.cols(),
            gain.len()
        )));
    }
    let mut out = Tensor::zeros(&x.shape);
    for r in 0..x.rows() {
        let c = x.cols();
        rms_norm_row(x.row(r), &gain.data, eps, &mut out.data[r * c..(r + 1) * c]);
    }
    Ok(out)
}

/// Rotation angle frequency for pair `p` of a head of width `d_head`.
pub fn rope_frequency(pair: usize, d_head: usize, base: f64) -> f64 {
    base.powf(-2.0 * pair as f64 / d_head as f64)
}

/// Rotates consecutive pairs `(v[2p], v[2p+1])` by `position * freq_p`.
/// With `inverse` the rotation is undone (used by the backward pass).
pub fn rope_in_place<T: Scalar>(v: &mut [T], position: usize, base: f64, inverse: bool) {
    let d = v.len();
    for p in 0..d / 2 {
        let angle = position as f64 * rope_frequency(p, d, base);
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::from_f64_lossy(if inverse { -s } else { s }), T::from_f64_lossy(c));
        let (x0, x1) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = x0 * c - x1 * s;
        v[2 * p + 1] = x0 * s + x1 * c;
    }
}

/// Applies the rotary rotation for `position` to every row (last dim = head dim).
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, position: usize, base: f64) -> Result<Tensor<T>> {
    if x.cols() % 2 != 0 {
        return Err(TensorError::Dimension(format!(
            "rotary embedding needs an even head dimension, got {}",
            x.cols()
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        rope_in_place(out.row_mut(r), position, base, false);
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// `n` i.i.d. normal draws from `rng`.
pub fn gaussian_sample(rng: &mut RngStream, n: usize, mean: f32, std: f32) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(TensorError::Parameter(format!(
            "standard deviation must be finite and non-negative, got {std}"
        )));
    }
    let data = (0..n)
        .map(|_| mean + std * rng.standard_normal() as f32)
        .collect();
    Ok(Tensor::vector(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_times_m_is_m() {
        let m = Tensor::<f32>::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.5],
        ])
        .unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_hand_product() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(11, 0);
        for &(m, k, n) in &[(5, 7, 3), (16, 16, 16)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.uniform() as f32 * 2.0 - 1.0).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.uniform() as f32 * 2.0 - 1.0).collect();
            let got = matmul(
                &Tensor::new(vec![m, k], a.clone()).unwrap(),
                &Tensor::new(vec![k, n], b.clone()).unwrap(),
            )
            .unwrap();
            let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let want = naive_matmul(&a64, &b64, m, k, n);
            for (g, w) in got.data().iter().zip(&want) {
                let rel = (*g as f64 - w).abs() / w.abs().max(1.0);
                assert!(rel < 1e-6, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn transposed_gemm_variants() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_into(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        // a^T (3x2) viewed from the 2x3 buffer times a (2x3) -> 3x3
        let mut g = [0.0; 9];
        gemm_into(3, 2, 3, &a, true, &a, false, &mut g, false);
        assert_eq!(g[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(g[5], 2.0 * 3.0 + 5.0 * 6.0);
        // a (2x3) times a^T (3x2) -> 2x2, accumulated twice
        let mut h = [0.0; 4];
        gemm_into(2, 3, 2, &a, false, &a, true, &mut h, false);
        gemm_into(2, 3, 2, &a, false, &a, true, &mut h, true);
        assert_eq!(h, [28.0, 64.0, 64.0, 154.0]);
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0 + 3f64.ln()]])
            .unwrap();
        let (p, degenerate) = softmax_rows(&x).unwrap();
        assert!(degenerate.is_empty());
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.at(&[1, 0]) - 0.25).abs() < 1e-6);
        assert!((p.at(&[1, 1]) - 0.75).abs() < 1e-6);
        // in f32 the offset itself is only representable to ~6e-5 at 1000
        let x32 = Tensor::<f32>::from_rows(&[vec![1000.0, 1000.0 + 3f32.ln()]]).unwrap();
        let (p32, _) = softmax_rows(&x32).unwrap();
        assert!((p32.at(&[0, 1]) - 0.75).abs() < 5e-5);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let mut rng = RngStream::new(3, 1);
        let row: Vec<f32> = (0..37).map(|_| (rng.uniform() as f32 - 0.5) * 20.0).collect();
        let (p, _) = softmax_rows(&Tensor::new(vec![1, row.len()], row.clone()).unwrap()).unwrap();
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        for (got, &v) in p.data().iter().zip(&row) {
            assert!((*got as f64 - (v as f64 - max).exp() / z).abs() < 1e-6);
        }
        let s: f64 = p.data().iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_neg_inf_row_is_uniform_and_flagged() {
        let x = Tensor::<f32>::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![f32::NEG_INFINITY; 3],
        ])
        .unwrap();
        let (p, degenerate) = softmax_rows(&x).unwrap();
        assert_eq!(degenerate, vec![1]);
        assert!(p.row(1).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn rms_norm_unit_and_scale_invariance() {
        let ones = Tensor::<f32>::filled(&[1, 8], 1.0);
        let gain = Tensor::<f32>::filled(&[8], 1.0);
        assert_eq!(rms_norm(&ones, &gain, 0.0).unwrap(), ones);

        let x = Tensor::<f64>::new(vec![1, 4], vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let scaled = Tensor::<f64>::new(vec![1, 4], x.data().iter().map(|v| v * 7.5).collect())
            .unwrap();
        let g = Tensor::<f64>::vector(vec![1.0, 0.5, 2.0, -1.0]);
        let a = rms_norm(&x, &g, 0.0).unwrap();
        let b = rms_norm(&scaled, &g, 0.0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_matches_f64_oracle() {
        let mut rng = RngStream::new(5, 2);
        let x: Vec<f32> = (0..64).map(|_| rng.standard_normal() as f32).collect();
        let g: Vec<f32> = (0..64).map(|_| 1.0 + 0.1 * rng.standard_normal() as f32).collect();
        let eps = 1e-6f32;
        let y = rms_norm(
            &Tensor::new(vec![1, 64], x.clone()).unwrap(),
            &Tensor::vector(g.clone()),
            eps,
        )
        .unwrap();
        let ms: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 64.0;
        let r = 1.0 / (ms + eps as f64).sqrt();
        for ((&got, &xv), &gv) in y.data().iter().zip(&x).zip(&g) {
            assert!((got as f64 - gv as f64 * xv as f64 * r).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_gain_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        let g = Tensor::<f32>::zeros(&[3]);
        assert!(rms_norm(&x, &g, 1e-6).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = Tensor::<f32>::new(vec![1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        assert_eq!(rope_apply(&x, 0, 10_000.0).unwrap(), x);
    }

    #[test]
    fn rope_unit_pair_trig_oracle() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        for p in [1usize, 5, 17] {
            let y = rope_apply(&x, p, 10_000.0).unwrap();
            // the first pair always has frequency 1
            let theta = rope_frequency(0, 2, 10_000.0);
            assert!((y.data()[0] - (p as f64 * theta).cos()).abs() < 1e-12);
            assert!((y.data()[1] - (p as f64 * theta).sin()).abs() < 1e-12);
        }
        let x4 = Tensor::<f64>::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let y4 = rope_apply(&x4, 3, 100.0).unwrap();
        let theta = 100f64.powf(-0.5);
        assert!((y4.data()[2] - (3.0 * theta).cos()).abs() < 1e-12);
        assert!((y4.data()[3] - (3.0 * theta).sin()).abs() < 1e-12);
    }

    #[test]
    fn rope_odd_dim_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(rope_apply(&x, 1, 10_000.0), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn rope_inverse_round_trip() {
        let mut v = vec![0.3f64, -0.2, 0.9, 1.1, -0.5, 0.25];
        let orig = v.clone();
        rope_in_place(&mut v, 13, 10_000.0, false);
        rope_in_place(&mut v, 13, 10_000.0, true);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gaussian_zero_std_and_determinism() {
        let mut r = RngStream::new(1, 9);
        let t = gaussian_sample(&mut r, 10, 3.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 3.5));
        let a = gaussian_sample(&mut RngStream::new(7, 7), 100, 0.0, 1.0).unwrap();
        let b = gaussian_sample(&mut RngStream::new(7, 7), 100, 0.0, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(gaussian_sample(&mut r, 3, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_sample_mean_within_five_standard_errors() {
        let mut r = RngStream::new(2024, 0);
        let n = 1_000_000;
        let t = gaussian_sample(&mut r, n, 1.5, 2.0).unwrap();
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let se = 2.0 / (n as f64).sqrt();
        assert!((mean - 1.5).abs() < 5.0 * se, "mean {mean}");
    }

    #[test]
    fn uniform_helper_sanity() {
        let mut r = RngStream::new(0, 0);
        let x: f64 = r.inner().random();
        assert!((0.0..1.0).contains(&x));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f32..50.0, 1..40), shift in -100.0f32..100.0) {
                let t = Tensor::new(vec![1, row.len()], row.clone()).unwrap();
                let shifted = Tensor::new(vec![1, row.len()], row.iter().map(|v| v + shift).collect()).unwrap();
                let (p, _) = softmax_rows(&t).unwrap();
                let (q, _) = softmax_rows(&shifted).unwrap();
                let s: f64 = p.data().iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for (a, b) in p.data().iter().zip(q.data()) {
                    prop_assert!(*a >= 0.0);
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }

            #[test]
            fn rope_preserves_norm(v in proptest::collection::vec(-10.0f32..10.0, 1..16), pos in 0usize..512) {
                let mut v = v;
                if v.len() % 2 == 1 { v.push(0.5); }
                let n = v.len();
                let before: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let y = rope_apply(&Tensor::new(vec![1, n], v).unwrap(), pos, 10_000.0).unwrap();
                let after: f64 = y.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((before - after).abs() <= 1e-6 * before.max(1.0));
            }
        }
    }
}
