use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{MedmixError, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MedmixError::Shape {
                op: "Tensor2::from_vec",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MedmixError::Shape { op: "Tensor2::from_rows", detail: "ragged rows".into() });
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor2<U> {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect() }
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

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(MedmixError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                axpy(out_row, a, other.row(k));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, accumulated into `acc` (shape `self.cols × other.cols`).
    pub fn matmul_tn_acc(&self, other: &Self, acc: &mut Self) -> Result<()> {
        if self.rows != other.rows || acc.shape() != (self.cols, other.cols) {
            return Err(MedmixError::Shape {
                op: "matmul_tn",
                detail: format!("{:?}ᵀ x {:?} into {:?}", self.shape(), other.shape(), acc.shape()),
            });
        }
        let n = other.cols;
        for i in 0..self.rows {
            let b_row = other.row(i);
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                axpy(&mut acc.data[k * n..(k + 1) * n], a, b_row);
            }
        }
        Ok(())
    }

    /// Sum over rows, accumulated into a `1 × cols` tensor.
    pub fn sum_rows_acc(&self, acc: &mut Self) -> Result<()> {
        if acc.shape() != (1, self.cols) {
            return Err(MedmixError::Shape {
                op: "sum_rows",
                detail: format!("{:?} into {:?}", self.shape(), acc.shape()),
            });
        }
        for i in 0..self.rows {
            axpy(&mut acc.data, T::one(), self.row(i));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MedmixError::Shape {
                op: "add_assign",
                detail: format!("{:?} += {:?}", self.shape(), other.shape()),
            });
        }
        axpy(&mut self.data, T::one(), &other.data);
        Ok(())
    }

    /// Rows `indices` of `self`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    /// Inverse of [`gather_rows`](Self::gather_rows): rows not listed stay zero.
    pub fn scatter_rows(src: &Self, indices: &[usize], rows: usize) -> Self {
        let mut out = Self::zeros(rows, src.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        out
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MedmixError::NonFinite(what.to_string()))
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four lanes keep the reduction vectorizable without reordering per call site.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dense boolean matrix used for expert masks and modality availability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, bits: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(MedmixError::Shape {
                op: "BitMatrix::from_vec",
                detail: format!("{} bits for {rows}x{cols}", bits.len()),
            });
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MedmixError::Shape { op: "BitMatrix::from_rows", detail: "ragged rows".into() });
        }
        Ok(Self { rows: rows.len(), cols, bits: rows.concat() })
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
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            bits.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, bits }
    }

    /// Column `j` as a vector.
    pub fn column(&self, j: usize) -> Vec<bool> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Learning-rate group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Router,
    Other,
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
    group: ParamGroup,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(value: Tensor2<T>, group: ParamGroup) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self { value, grad, group }
    }

    pub fn zeros(rows: usize, cols: usize, group: ParamGroup) -> Self {
        Self::new(Tensor2::zeros(rows, cols), group)
    }

    #[inline]
    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.data().len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> ParamTensor<U> {
        ParamTensor { value: self.value.cast(), grad: self.grad.cast(), group: self.group }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor2::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![5.0f64], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(a.matmul(&a.transpose().gather_rows(&[0])).is_err());
    }

    #[test]
    fn matmul_tn_matches_transpose() {
        let a = Tensor2::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![1.0f64, -1.0], vec![2.0, 0.5]]).unwrap();
        let mut acc = Tensor2::zeros(3, 2);
        a.matmul_tn_acc(&b, &mut acc).unwrap();
        assert_eq!(acc, a.transpose().matmul(&b).unwrap());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let a = Tensor2::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = a.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = Tensor2::scatter_rows(&g, &[2, 0], 3);
        assert_eq!(s.data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }
}
