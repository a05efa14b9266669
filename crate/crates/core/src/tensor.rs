//! Dense row-major f64 tensors and the raw kernels shared by the forward and
//! backward passes.
//!
//! Shapes are explicit and strictly checked: the only broadcasting anywhere
//! is the bias-add over rows. Scalars are rank-1 tensors of length 1.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

/// Error raised by any shape-checked operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeError {
    pub op: &'static str,
    pub message: String,
}

impl ShapeError {
    pub fn new(op: &'static str, message: String) -> Self {
        ShapeError { op, message }
    }
}

impl core::fmt::Display for ShapeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.op, self.message)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ShapeError {}

/// Numeric precision of a computation.
///
/// `F64` is native. `F32` rounds the result of every primitive operation to
/// f32 and widens back, emulating single-precision pipelines while keeping
/// one storage type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    #[inline]
    pub(crate) fn quantize(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(ShapeError::new(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ShapeError::new(
                "tensor",
                format!("shape {shape:?} needs {numel} scalars, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros: bad shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty());
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        if rows.is_empty() {
            return Err(ShapeError::new("tensor", "no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ShapeError::new("tensor", "ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0);
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// View as (rows, cols): rank-2 directly, rank-1 as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (m, n) = self.dims2();
        assert!(i < m);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &x| a.max(fmath::abs(x)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), ShapeError> {
    if a.shape() != b.shape() {
        return Err(ShapeError::new(
            op,
            format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ---- raw kernels -----------------------------------------------------------
//
// These operate on flat slices with explicit dimensions. `matmul_*` accumulate
// into `out`, which callers must zero first.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix-vector product w[r,c] * x[c] -> y[r] (column-vector convention).
pub fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut y = vec![0.0; rows];
    for (i, yi) in y.iter_mut().enumerate() {
        let wrow = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (&wv, &xv) in wrow.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *yi = acc;
    }
    y
}

/// Numerically stabilized softmax over each row of `x` in place.
pub fn softmax_rows_raw(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = fmath::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fmath::exp(-x))
    } else {
        let e = fmath::exp(x);
        e / (1.0 + e)
    }
}

/// Relative error of `a` against reference `b` as inf-norm of the difference
/// over the inf-norm of the reference. Robust near zero entries.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff = diff.max(fmath::abs(x - y));
        scale = scale.max(fmath::abs(y));
    }
    diff / (scale + 1e-30)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (&x, &y)| m.max(fmath::abs(x - y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 4];
        matmul_nn(&eye, &a, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_oracle() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [0.0; 2];
        matmul_nn(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut r = crate::rng::SplitMix64::new(1);
        let a: Vec<f64> = (0..6).map(|_| r.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| r.uniform(-1.0, 1.0)).collect();
        // a is 2x3, b is 3x4
        let mut c = vec![0.0; 8];
        matmul_nn(&a, &b, 2, 3, 4, &mut c);

        // nt: b stored transposed (4x3)
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_nt(&a, &bt, 2, 3, 4, &mut c2);
        assert!(max_abs_diff(&c, &c2) < 1e-15);

        // tn: a stored transposed (3x2)
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        matmul_tn(&at, &b, 3, 2, 4, &mut c3);
        assert!(max_abs_diff(&c, &c3) < 1e-15);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut x = vec![0.0, 0.0, 1000.0, 1000.0, -900.0, -900.5];
        softmax_rows_raw(&mut x, 3, 2);
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!((x[1] - 0.5).abs() < 1e-15);
        for i in 0..3 {
            let s: f64 = x[i * 2..(i + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(x[i * 2..(i + 1) * 2].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn sigmoid_extremes_finite() {
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid_scalar(800.0) <= 1.0);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(-800.0).is_finite());
    }

    #[test]
    fn precision_f32_rounds() {
        let mut data = vec![0.1, core::f64::consts::PI];
        Precision::F32.quantize(&mut data);
        assert_eq!(data[0], 0.1f32 as f64);
        assert_eq!(data[1], core::f32::consts::PI as f64);
        let mut data2 = vec![0.1];
        Precision::F64.quantize(&mut data2);
        assert_eq!(data2[0], 0.1);
    }
}
