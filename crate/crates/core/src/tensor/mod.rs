//! Dense double-precision tensors and reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a row-major `f64` buffer
//! with a shape, and a [`Tape`] records the closed set of operations the
//! models need, replaying them in reverse to accumulate gradients. Everything
//! is dense and double precision; at the graph sizes this crate targets
//! (hundreds of nodes) sparse storage would cost more than it saves, and the
//! finite-difference checks at 1e-5 tolerance are not meaningful in `f32`.

mod gradcheck;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_single, op_gradcheck_suite};
pub use tape::{Tape, TensorId};

/// Dense row-major tensor. In this crate shapes are always two-dimensional
/// (scalars are `1x1`, row vectors `1xd`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_enabled: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor shape dimensions must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            grad_enabled: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(vec![rows, cols], vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(vec![rows, cols], vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1, 1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows requires at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a differentiation leaf when registered on a tape.
    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a `1x1` tensor.
    pub fn scalar_value(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "scalar_value on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows() && j < self.cols());
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.cols();
        debug_assert!(i < self.rows() && j < cols);
        self.data[i * cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let mut t = Tensor::new(shape, self.data.clone());
        t.grad_enabled = self.grad_enabled;
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain eager matrix product (no tape involvement).
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ ({m}x{k} vs {k2}x{n})"
        );
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        kernels::transpose(&self.data, &mut out, m, n);
        Tensor::new(vec![n, m], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape, rhs.shape,
            "add: shape mismatch {:?} vs {:?}",
            self.shape, rhs.shape
        );
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.shape, rhs.shape,
            "sub: shape mismatch {:?} vs {:?}",
            self.shape, rhs.shape
        );
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|a| a * c).collect(),
        )
    }
}

/// Shared low-level kernels. The tape ops and the eager [`Tensor`] methods go
/// through the same code so the two paths cannot drift apart numerically.
pub(crate) mod kernels {
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        // ikj loop order keeps the inner loop contiguous over b and out.
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let a_ik = a[i * k + kk];
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
    }

    pub fn transpose(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let out_row = &mut out[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                sum += e;
            }
            for v in out_row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

#[cfg(test)]
mod value_tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_panics() {
        let r = std::panic::catch_unwind(|| Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]));
        assert!(r.is_err());
    }

    #[test]
    fn eager_matmul_identity() {
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let id = Tensor::identity(2);
        assert_eq!(id.matmul(&m), m);
        assert_eq!(m.matmul(&id), m);
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().at(2, 1), 6.0);
    }
}
