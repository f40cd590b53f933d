use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Dense row-major `f64` array.
///
/// Most tensors in this crate are matrices (`[rows, cols]`); vectors are
/// stored as `[n]` and treated as a single row where a matrix is expected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                detail: alloc::format!(
                    "shape {:?} needs {} values, got {}",
                    shape,
                    expected,
                    values.len()
                ),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; n] }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], values: vec![value] }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::Shape {
                    op: "from_rows",
                    detail: alloc::format!("ragged rows: {} vs {}", row.len(), cols),
                });
            }
            values.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row count when viewed as a matrix (vectors are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<(), AutodiffError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite { op })
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (x, y) in chunks_a.zip(chunks_b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in rem_a.iter().zip(rem_b) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Strided view of a dense matrix: `(values, row stride, column stride)`.
pub(crate) type MatView<'a> = (&'a [f64], usize, usize);

fn covers(view_len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < view_len
}

/// `c ← a·b + beta·c` with `a: [m × k]`, `b: [k × n]` and row-major `c: [m × n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut [f64]) {
    assert!(covers(a.0.len(), m, k, a.1, a.2), "gemm: lhs view out of bounds");
    assert!(covers(b.0.len(), k, n, b.1, b.2), "gemm: rhs view out of bounds");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x · wᵀ (+ b)` for `x: [batch × n_in]`, `w: [n_out × n_in]`, `b: [n_out]`.
pub(crate) fn affine_into(
    x: &[f64],
    n_in: usize,
    w: &[f64],
    n_out: usize,
    b: Option<&[f64]>,
    out: &mut [f64],
) {
    let batch = if n_in == 0 { out.len() / n_out.max(1) } else { x.len() / n_in };
    let beta = match b {
        Some(b) => {
            for row in out.chunks_exact_mut(n_out.max(1)) {
                row.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    gemm(batch, n_in, n_out, (x, n_in, 1), (w, 1, n_in), beta, out);
}

/// Validated dense affine map `x · wᵀ (+ b)` outside any graph.
///
/// `x` is `[batch × n_in]`, `w` is `[n_out × n_in]` and `b` (if given) has
/// `n_out` entries.
pub fn forward_affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
    let (batch, n_in) = (x.rows(), x.cols());
    let (n_out, w_in) = (w.rows(), w.cols());
    if w.shape().len() != 2 || w_in != n_in {
        return Err(AutodiffError::Shape {
            op: "forward_affine",
            detail: alloc::format!("x is {:?} but w is {:?}", x.shape(), w.shape()),
        });
    }
    if let Some(b) = b {
        if b.len() != n_out {
            return Err(AutodiffError::Shape {
                op: "forward_affine",
                detail: alloc::format!("bias has {} entries, expected {}", b.len(), n_out),
            });
        }
        b.check_finite("forward_affine")?;
    }
    x.check_finite("forward_affine")?;
    w.check_finite("forward_affine")?;
    let mut out = vec![0.0; batch * n_out];
    affine_into(x.values(), n_in, w.values(), n_out, b.map(Tensor::values), &mut out);
    let y = Tensor::matrix(batch, n_out, out)?;
    y.check_finite("forward_affine")?;
    Ok(y)
}
