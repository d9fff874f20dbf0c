//! Dense row-major matrices and the scalar abstraction shared by every module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// On-disk element type of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn bits(self) -> u32 {
        (self.size() * 8) as u32
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn push_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided views.
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
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided views.
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
                n as isize,
                1,
            );
        }
    }
}

/// Row-major 2-D matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// # Panics
    /// If `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    /// Entries drawn i.i.d. from `normal(0, std)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| F::of(normal.sample(rng))).collect();
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from `uniform(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| F::of(rng.random_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: F) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copy of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    /// Copy of columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Self::from_vec(self.rows, len, data)
    }

    /// Stack `self` on top of `other` when both have the same width.
    pub fn vstack(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "vstack width mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        F::gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            F::zero(),
            &mut out.data,
        );
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.rows);
        F::gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            1,
            other.cols as isize,
            F::zero(),
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        F::gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            1,
            self.cols as isize,
            &other.data,
            other.cols as isize,
            1,
            F::zero(),
            &mut out.data,
        );
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: F) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax<F: Scalar>(xs: &[F]) -> Vec<F> {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(x)` computed with max subtraction.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let total: F = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Relaxed top-`k`: `σ((x_i - t) / temperature)` with the threshold `t`
/// solved so the weights sum to `k`. Every weight lies in `[0, 1]`; as the
/// temperature falls the weights approach the indicator of the `k` largest.
pub fn soft_top_k<F: Scalar>(xs: &[F], k: usize, temperature: f64) -> Vec<F> {
    let n = xs.len();
    assert!((1..=n).contains(&k), "k = {k} outside 1..={n}");
    assert!(temperature > 0.0, "temperature must be positive");
    if k == n {
        return vec![F::one(); n];
    }
    let x: Vec<f64> = xs.iter().map(|v| v.as_f64()).collect();
    let weights = |t: f64| -> Vec<f64> { x.iter().map(|&xi| sigmoid((xi - t) / temperature)).collect() };
    let lo_x = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_x = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo_x - 60.0 * temperature, hi_x + 60.0 * temperature);
    let target = k as f64;
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if weights(mid).iter().sum::<f64>() > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Pick whichever bracket end sums closer to k.
    let (wl, wh) = (weights(lo), weights(hi));
    let el = (wl.iter().sum::<f64>() - target).abs();
    let eh = (wh.iter().sum::<f64>() - target).abs();
    let w = if el <= eh { wl } else { wh };
    w.into_iter().map(F::of).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
