//! Dense real tensors and matrices.
//!
//! Storage is row-major for both types: the last index varies fastest. Under
//! this linearization the vectorized mode-product chain factors in natural
//! order,
//!
//! ```text
//! vec(S x_1 A_1 x_2 A_2 ... x_J A_J) = (A_1 kron A_2 kron ... kron A_J) vec(S)
//! ```
//!
//! which is what [`kron`] and the operator materialization routines rely on.
//! No operation broadcasts: every shape disagreement is an error.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MtsError, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    fn lit(x: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MtsError::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(MtsError::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MtsError::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(MtsError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(MtsError::shape(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.check_same(rhs)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * alpha).collect(),
        }
    }

    pub fn dot(&self, rhs: &Self) -> Result<T> {
        self.check_same(rhs)?;
        Ok(dot_slices(&self.data, &rhs.data))
    }

    pub fn frobenius_norm(&self) -> T {
        dot_slices(&self.data, &self.data).sqrt()
    }

    fn check_same(&self, rhs: &Self) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(MtsError::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }
}

/// Kronecker product: block `(i, j)` of the result is `a[i, j] * b`.
pub fn kron<T: Real>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut data = vec![T::zero(); rows * cols];
    for ai in 0..a.rows {
        for bi in 0..b.rows {
            let row = ai * b.rows + bi;
            let out = &mut data[row * cols..(row + 1) * cols];
            for aj in 0..a.cols {
                let s = a.get(ai, aj);
                let brow = &b.data[bi * b.cols..(bi + 1) * b.cols];
                for (o, &v) in out[aj * b.cols..(aj + 1) * b.cols].iter_mut().zip(brow) {
                    *o = s * v;
                }
            }
        }
    }
    DenseMatrix { rows, cols, data }
}

/// Kronecker product of a non-empty chain, left to right.
pub fn kron_chain<T: Real>(factors: &[DenseMatrix<T>]) -> DenseMatrix<T> {
    let (first, rest) = factors.split_first().expect("kron_chain of empty list");
    rest.iter().fold(first.clone(), |acc, f| kron(&acc, f))
}

pub(crate) fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Dense J-dimensional tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(MtsError::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Builds a tensor by evaluating `f` at every multi-index in storage order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Flattens in row-major order.
    pub fn vectorize(&self) -> Vec<T> {
        self.data.clone()
    }

    pub fn devectorize(v: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), v)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.check_same(rhs)?;
        Ok(self.zip_with(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.check_same(rhs)?;
        Ok(self.zip_with(rhs, |a, b| a - b))
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        self.check_same(rhs)?;
        self.data.iter_mut().zip(&rhs.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// `self += alpha * rhs`.
    pub fn axpy(&mut self, alpha: T, rhs: &Self) -> Result<()> {
        self.check_same(rhs)?;
        self.data
            .iter_mut()
            .zip(&rhs.data)
            .for_each(|(a, &b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn dot(&self, rhs: &Self) -> Result<T> {
        self.check_same(rhs)?;
        Ok(dot_slices(&self.data, &rhs.data))
    }

    pub fn frobenius_norm(&self) -> T {
        dot_slices(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> Result<T> {
        self.check_same(rhs)?;
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64().unwrap())).collect(),
        }
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn check_same(&self, rhs: &Self) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(MtsError::shape(format!(
                "shapes {:?} and {:?} differ",
                self.shape, rhs.shape
            )));
        }
        Ok(())
    }

    /// (product of dims before `mode`, dim at `mode`, product of dims after).
    fn split_at_mode(&self, mode: usize) -> (usize, usize, usize) {
        let left = self.shape[..mode].iter().product();
        let right = self.shape[mode + 1..].iter().product();
        (left, self.shape[mode], right)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.ndim() {
            return Err(MtsError::shape(format!(
                "mode {mode} out of range for {}-dimensional tensor",
                self.ndim()
            )));
        }
        Ok(())
    }

    /// Mode-n product `self x_mode m`: contracts axis `mode` with the columns
    /// of `m`, replacing that dimension by `m.rows()`.
    pub fn mode_product(&self, m: &DenseMatrix<T>, mode: usize) -> Result<Self> {
        self.check_mode(mode)?;
        if m.cols != self.shape[mode] {
            return Err(MtsError::ModeMismatch {
                mode,
                expected: self.shape[mode],
                found: m.cols,
            });
        }
        let (left, mid, right) = self.split_at_mode(mode);
        let rows = m.rows;
        let mut shape = self.shape.clone();
        shape[mode] = rows;
        let mut out = vec![T::zero(); left * rows * right];

        if right == 1 {
            for (xin, xout) in self.data.chunks_exact(mid).zip(out.chunks_exact_mut(rows)) {
                for (o, mrow) in xout.iter_mut().zip(m.data.chunks_exact(mid)) {
                    *o = dot_slices(mrow, xin);
                }
            }
        } else {
            for (xin, xout) in self
                .data
                .chunks_exact(mid * right)
                .zip(out.chunks_exact_mut(rows * right))
            {
                for (orow, mrow) in xout.chunks_exact_mut(right).zip(m.data.chunks_exact(mid)) {
                    for (&a, irow) in mrow.iter().zip(xin.chunks_exact(right)) {
                        for (o, &v) in orow.iter_mut().zip(irow) {
                            *o += a * v;
                        }
                    }
                }
            }
        }
        Ok(Self { shape, data: out })
    }

    /// `self x_mode m^T`.
    pub fn mode_product_transposed(&self, m: &DenseMatrix<T>, mode: usize) -> Result<Self> {
        self.mode_product(&m.transpose(), mode)
    }

    /// Mode-n unfolding: row `i` holds every element whose `mode` index is
    /// `i`, columns ordered by the remaining indices in row-major order.
    pub fn unfold(&self, mode: usize) -> Result<DenseMatrix<T>> {
        self.check_mode(mode)?;
        let (left, mid, right) = self.split_at_mode(mode);
        let mut m = DenseMatrix::zeros(mid, left * right);
        for l in 0..left {
            for i in 0..mid {
                for r in 0..right {
                    m.data[i * left * right + l * right + r] = self.data[(l * mid + i) * right + r];
                }
            }
        }
        Ok(m)
    }

    /// Inverse of [`Tensor::unfold`].
    pub fn fold(m: &DenseMatrix<T>, mode: usize, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if mode >= shape.len() {
            return Err(MtsError::shape(format!("mode {mode} out of range")));
        }
        let left: usize = shape[..mode].iter().product();
        let right: usize = shape[mode + 1..].iter().product();
        let mid = shape[mode];
        if m.rows != mid || m.cols != left * right {
            return Err(MtsError::shape(format!(
                "cannot fold {}x{} matrix into {shape:?} along mode {mode}",
                m.rows, m.cols
            )));
        }
        let mut data = vec![T::zero(); mid * left * right];
        for l in 0..left {
            for i in 0..mid {
                for r in 0..right {
                    data[(l * mid + i) * right + r] = m.data[i * left * right + l * right + r];
                }
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// `unfold(a, mode) * unfold(b, mode)^T` without forming the unfoldings.
    /// All dimensions other than `mode` must agree.
    pub fn mode_gram(a: &Self, b: &Self, mode: usize) -> Result<DenseMatrix<T>> {
        a.check_mode(mode)?;
        let compatible = a.ndim() == b.ndim()
            && a
                .shape
                .iter()
                .zip(&b.shape)
                .enumerate()
                .all(|(d, (x, y))| d == mode || x == y);
        if !compatible {
            return Err(MtsError::shape(format!(
                "mode_gram shapes {:?} and {:?} differ outside mode {mode}",
                a.shape, b.shape
            )));
        }
        let (left, p, right) = a.split_at_mode(mode);
        let q = b.shape[mode];
        let mut g = DenseMatrix::zeros(p, q);
        if right == 1 {
            for (ar, br) in a.data.chunks_exact(p).zip(b.data.chunks_exact(q)) {
                for (grow, &av) in g.data.chunks_exact_mut(q).zip(ar) {
                    for (gv, &bv) in grow.iter_mut().zip(br) {
                        *gv += av * bv;
                    }
                }
            }
        } else {
            for l in 0..left {
                let ablk = &a.data[l * p * right..(l + 1) * p * right];
                let bblk = &b.data[l * q * right..(l + 1) * q * right];
                for (grow, arow) in g.data.chunks_exact_mut(q).zip(ablk.chunks_exact(right)) {
                    for (gv, brow) in grow.iter_mut().zip(bblk.chunks_exact(right)) {
                        *gv += dot_slices(arow, brow);
                    }
                }
            }
        }
        Ok(g)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(MtsError::shape(format!(
            "shape {shape:?} must have at least one mode and positive dimensions"
        )));
    }
    Ok(())
}
