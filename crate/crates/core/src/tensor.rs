//! Dense row-major 2-D tensors.

use crate::error::{input_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 32 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(input_err!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor from `f64` literals; handy in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&v| T::of_f64(v)));
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    /// Bytes held by the values.
    pub fn nbytes(&self) -> usize {
        self.data.len() * T::DTYPE.size()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn check_same_shape<U: Scalar>(&self, other: &Tensor<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(input_err!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// `self @ rhs` with f64 accumulation, rounded to `T`.
    pub fn matmul<U: Scalar>(&self, rhs: &Tensor<U>) -> Result<Tensor<T>> {
        Ok(matmul_acc(self, rhs, None)?.cast())
    }
}

impl Tensor<f64> {
    /// Elementwise `self += other`.
    pub fn add_assign<U: Scalar>(&mut self, other: &Tensor<U>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b.as_f64();
        }
    }

    /// `self[row] += src` for a single row.
    #[inline]
    pub fn add_to_row<U: Scalar>(&mut self, row: usize, src: &[U]) {
        for (a, b) in self.row_mut(row).iter_mut().zip(src) {
            *a += b.as_f64();
        }
    }
}

/// `lhs @ rhs` accumulated in f64. When `rows` is given, only rows with a
/// `true` flag are computed and the others are left at zero.
pub fn matmul_acc<A: Scalar, B: Scalar>(
    lhs: &Tensor<A>,
    rhs: &Tensor<B>,
    rows: Option<&[bool]>,
) -> Result<Tensor<f64>> {
    if lhs.cols != rhs.rows {
        return Err(input_err!(
            "matmul inner dimensions differ: {}x{} @ {}x{}",
            lhs.rows,
            lhs.cols,
            rhs.rows,
            rhs.cols
        ));
    }
    if let Some(mask) = rows {
        if mask.len() != lhs.rows {
            return Err(input_err!("row mask length {} != {}", mask.len(), lhs.rows));
        }
    }
    let (m, k, n) = (lhs.rows, lhs.cols, rhs.cols);
    let mut out = Tensor::<f64>::zeros(m, n);
    for i in 0..m {
        if let Some(mask) = rows {
            if !mask[i] {
                continue;
            }
        }
        let arow = lhs.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &a) in arow.iter().enumerate().take(k) {
            let a = a.as_f64();
            if a == 0.0 {
                continue;
            }
            let brow = rhs.row(kk);
            for (o, &b) in orow.iter_mut().zip(brow) {
                *o += a * b.as_f64();
            }
        }
    }
    Ok(out)
}

/// `lhsᵀ @ rhs` accumulated in f64 (used for weight gradients).
pub fn matmul_tn<A: Scalar, B: Scalar>(lhs: &Tensor<A>, rhs: &Tensor<B>) -> Result<Tensor<f64>> {
    if lhs.rows != rhs.rows {
        return Err(input_err!(
            "matmul_tn row counts differ: {} vs {}",
            lhs.rows,
            rhs.rows
        ));
    }
    let (k, n) = (lhs.cols, rhs.cols);
    let mut out = Tensor::<f64>::zeros(k, n);
    for r in 0..lhs.rows {
        let arow = lhs.row(r);
        let brow = rhs.row(r);
        for (i, &a) in arow.iter().enumerate() {
            let a = a.as_f64();
            if a == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &b) in orow.iter_mut().zip(brow) {
                *o += a * b.as_f64();
            }
        }
    }
    Ok(out)
}

/// `lhs @ rhsᵀ` accumulated in f64 (used for input gradients).
pub fn matmul_nt<A: Scalar, B: Scalar>(lhs: &Tensor<A>, rhs: &Tensor<B>) -> Result<Tensor<f64>> {
    if lhs.cols != rhs.cols {
        return Err(input_err!(
            "matmul_nt column counts differ: {} vs {}",
            lhs.cols,
            rhs.cols
        ));
    }
    let (m, n) = (lhs.rows, rhs.rows);
    let mut out = Tensor::<f64>::zeros(m, n);
    for i in 0..m {
        let arow = lhs.row(i);
        for j in 0..n {
            out.data[i * n + j] = dot(arow, rhs.row(j));
        }
    }
    Ok(out)
}

/// Dot product in f64.
#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        s += x.as_f64() * y.as_f64();
    }
    s
}

/// Largest elementwise difference scaled by the reference magnitude:
/// `max|a - b| / max(max|b|, floor)`.
pub fn rel_diff<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_diff shape mismatch");
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        diff = diff.max((x.as_f64() - y.as_f64()).abs());
        scale = scale.max(y.as_f64().abs());
    }
    diff / scale.max(1e-30)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let i = Tensor::<f64>::identity(2);
        assert_eq!(i.matmul(&x).unwrap(), x);
    }

    #[test]
    fn small_product() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::<f32>::from_rows(&[&[1.0], &[1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Input(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 1.0]]);
        let b = Tensor::<f64>::from_rows(&[&[1.0, 0.0, 2.0], &[1.0, 4.0, -1.0], &[0.0, 1.0, 1.0]]);
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, a.transpose().matmul(&b).unwrap());
        let c = Tensor::<f64>::from_rows(&[&[1.0, 1.0], &[2.0, 0.0]]);
        let nt = matmul_nt(&a, &c).unwrap();
        assert_eq!(nt, a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn masked_rows_stay_zero() {
        let a = Tensor::<f64>::from_rows(&[&[1.0], &[2.0]]);
        let b = Tensor::<f64>::from_rows(&[&[3.0]]);
        let out = matmul_acc(&a, &b, Some(&[false, true])).unwrap();
        assert_eq!(out.data(), &[0.0, 6.0]);
    }
}
