use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NumericsError, Scalar};

/// Dense row-major matrix with an optional gradient buffer.
///
/// Every tensor in this crate is rank 2; vectors are `1 x d` and scalars are
/// `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
            grad: None,
        })
    }

    /// Builds a tensor from `f64` values, converting each element.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumericsError> {
        Self::from_vec(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::DataLength {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend(row.iter().map(|&x| T::lit(x)));
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::zero())
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(1, 1, value)
    }

    /// Samples every entry from `Normal(0, std)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| T::lit(normal.sample(rng))).collect();
        Self {
            shape: vec![rows, cols],
            data,
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Zero-filled gradient buffer of matching shape.
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![T::zero(); self.data.len()]);
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
            grad: None,
        }
    }

    /// Plain product without gradient tracking.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols() != other.rows() {
            return Err(NumericsError::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); self.rows() * other.cols()];
        matmul_into(
            &self.data,
            &other.data,
            &mut out,
            self.rows(),
            self.cols(),
            other.cols(),
        );
        Self::from_vec(self.rows(), other.cols(), out)
    }
}

/// `out[p x r] += a[p x q] * b[q x r]`
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[p x r] += a[p x q] * b[r x q]^T`
pub(crate) fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * r + j] = out[i * r + j] + acc;
        }
    }
}

/// `out[q x r] += a[p x q]^T * b[p x r]`
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let b_row = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}
