//! Dense row-major matrices and vectors.
//!
//! Only what the recurrences need lives here: products, rank-one outer
//! products, Hadamard products, diagonal embedding and unit-lower-triangular
//! forward substitution. Every reduction runs left to right in index order so
//! that results are bit-reproducible for a given precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point precision tag carried in reports and CSV rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Scalar element type. Implemented for `f64` (verification) and `f32`
/// (benchmarks).
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("matrix is not unit lower triangular: entry ({row}, {col}) = {value}")]
    NotUnitLowerTriangular { row: usize, col: usize, value: f64 },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn check_finite<T: Real>(data: &[T]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector<T: Real = f64> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    /// Checked constructor: rejects NaN and infinities.
    pub fn new(data: Vec<T>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn from_vec_unchecked(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> T) -> Self {
        Self {
            data: (0..len).map(f).collect(),
        }
    }

    /// Standard basis vector `e_index`.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = T::one();
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.len() != other.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: (self.len(), 1),
                right: (other.len(), 1),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn l2_norm_sq(&self) -> T {
        l2_norm_sq(&self.data)
    }

    pub fn l2_norm(&self) -> T {
        self.l2_norm_sq().sqrt()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.len() != other.len() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: (self.len(), 1),
                right: (other.len(), 1),
            });
        }
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs(&self) -> T {
        max_abs(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: Real> std::ops::Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: Real> std::ops::IndexMut<usize> for Vector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i]
    }
}

impl<T: Real> From<Vec<T>> for Vector<T> {
    fn from(data: Vec<T>) -> Self {
        Self { data }
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Checked constructor: validates the length and rejects non-finite data.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor used on hot paths. Only the length is asserted,
    /// and only in debug builds.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
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
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows (checked).
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> Vector<T> {
        Vector::from_vec_unchecked(self.row(i).to_vec())
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

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: T) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// `selfᵀ x`, written into `out` (length `cols`).
    pub fn tmatvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(T::zero());
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += xi * r;
            }
        }
    }

    /// `selfᵀ x`.
    pub fn tmatvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.len() != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "tmatvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        self.tmatvec_into(x.as_slice(), &mut out);
        Ok(Vector::from_vec_unchecked(out))
    }

    /// `self x`.
    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if x.len() != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok(Vector::from_fn(self.rows, |i| dot(self.row(i), x.as_slice())))
    }

    /// `self += c · k eᵀ`.
    pub fn rank_one_update(&mut self, c: T, k: &[T], e: &[T]) {
        debug_assert_eq!(k.len(), self.rows);
        debug_assert_eq!(e.len(), self.cols);
        for (i, &ki) in k.iter().enumerate() {
            let w = c * ki;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &ej) in row.iter_mut().zip(e) {
                *r += w * ej;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        max_abs(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn frobenius_norm(&self) -> T {
        l2_norm_sq(&self.data).sqrt()
    }

    /// `⟨self, other⟩_F = tr(selfᵀ other)`.
    pub fn frobenius_inner(&self, other: &Self) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "frobenius_inner",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Deterministic left-to-right dot product.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `Σ v_i²`.
#[inline]
pub fn l2_norm_sq<T: Real>(v: &[T]) -> T {
    dot(v, v)
}

pub fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Row-major matrix product with a fixed `i, p, j` loop order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, p);
    for i in 0..m {
        let out_row = &mut out.data[i * p..(i + 1) * p];
        for kk in 0..n {
            let aik = a.data[i * n + kk];
            let b_row = &b.data[kk * p..(kk + 1) * p];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// `aᵀ b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, p);
    for r in 0..n {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &ari) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for (o, &brj) in out_row.iter_mut().zip(b_row) {
                *o += ari * brj;
            }
        }
    }
    debug_assert_eq!(out.rows, m);
    Ok(out)
}

/// `k eᵀ`.
pub fn outer<T: Real>(k: &Vector<T>, e: &Vector<T>) -> Matrix<T> {
    Matrix::from_fn(k.len(), e.len(), |i, j| k[i] * e[j])
}

pub fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

pub fn diag_from<T: Real>(v: &Vector<T>) -> Matrix<T> {
    let n = v.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.data[i * n + i] = v[i];
    }
    m
}

/// Solves `l U = rhs` for unit-lower-triangular `l`.
///
/// The structure of `l` is validated first: any diagonal entry other than
/// exactly one, or any nonzero strictly-upper entry, is an error.
pub fn forward_substitution<T: Real>(l: &Matrix<T>, rhs: &Matrix<T>) -> Result<Matrix<T>> {
    if l.rows != l.cols || l.rows != rhs.rows {
        return Err(TensorError::ShapeMismatch {
            op: "forward_substitution",
            left: l.shape(),
            right: rhs.shape(),
        });
    }
    let n = l.rows;
    for i in 0..n {
        for j in i..n {
            let v = l.get(i, j);
            let expected = if i == j { T::one() } else { T::zero() };
            if v != expected {
                return Err(TensorError::NotUnitLowerTriangular {
                    row: i,
                    col: j,
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
    }
    Ok(forward_substitution_unit(l, rhs))
}

/// Unchecked forward substitution: reads only the strict lower triangle of
/// `l` and treats the diagonal as one.
pub fn forward_substitution_unit<T: Real>(l: &Matrix<T>, rhs: &Matrix<T>) -> Matrix<T> {
    let n = l.rows;
    let d = rhs.cols;
    let mut u = rhs.clone();
    for i in 0..n {
        for j in 0..i {
            let lij = l.data[i * n + j];
            if lij == T::zero() {
                continue;
            }
            let (done, rest) = u.data.split_at_mut(i * d);
            let uj = &done[j * d..(j + 1) * d];
            let ui = &mut rest[..d];
            for (a, &b) in ui.iter_mut().zip(uj) {
                *a -= lij * b;
            }
        }
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_unit_lower(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => rng.random_range(-1.0..1.0) / n as f64,
            std::cmp::Ordering::Less => 0.0,
        })
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        assert_eq!(matmul(&Matrix::zeros(3, 3), &b).unwrap(), Matrix::zeros(3, 3));
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 4, 3);
        let c = random(&mut rng, 5, 2);
        assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&matmul(&a, &b.transpose()).unwrap()).unwrap() < 1e-15);
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&matmul(&a.transpose(), &c).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn outer_examples() {
        let k = Vector::from(vec![1.0, 2.0]);
        assert_eq!(outer(&k, &Vector::zeros(3)), Matrix::zeros(2, 3));
        assert_eq!(outer(&k, &Vector::from(vec![3.0])), m(&[&[3.0], &[6.0]]));
        let v = Vector::from(vec![4.0, 5.0]);
        let e1 = Vector::basis(3, 0);
        assert_eq!(outer(&e1, &v), m(&[&[4.0, 5.0], &[0.0, 0.0], &[0.0, 0.0]]));
    }

    #[test]
    fn forward_substitution_examples() {
        let rhs = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(forward_substitution(&Matrix::identity(2), &rhs).unwrap(), rhs);
        let l = m(&[&[1.0, 0.0], &[2.0, 1.0]]);
        let u = forward_substitution(&l, &m(&[&[1.0], &[0.0]])).unwrap();
        assert_eq!(u, m(&[&[1.0], &[-2.0]]));
    }

    #[test]
    fn forward_substitution_rejects_bad_structure() {
        let l = m(&[&[2.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            forward_substitution(&l, &Matrix::zeros(2, 1)),
            Err(TensorError::NotUnitLowerTriangular { row: 0, col: 0, .. })
        ));
        let l = m(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(
            forward_substitution(&l, &Matrix::zeros(2, 1)),
            Err(TensorError::NotUnitLowerTriangular { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn forward_substitution_random_c8_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = random_unit_lower(&mut rng, 8);
        let rhs = random(&mut rng, 8, 5);
        let u = forward_substitution(&l, &rhs).unwrap();
        let residual = matmul(&l, &u).unwrap().max_abs_diff(&rhs).unwrap();
        assert!(residual <= 1e-12, "residual {residual}");
    }

    #[test]
    fn hadamard_diag_norm() {
        let a = m(&[&[1.0, -2.0], &[3.5, 4.0]]);
        let ones = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert!(hadamard(&a, &Matrix::zeros(2, 3)).is_err());
        assert_eq!(Vector::<f64>::zeros(4).l2_norm_sq(), 0.0);
        assert_eq!(Vector::from(vec![3.0, 4.0]).l2_norm_sq(), 25.0);
        assert_eq!(diag_from(&Vector::from(vec![1.0, 2.0])), m(&[&[1.0, 0.0], &[0.0, 2.0]]));
    }

    #[test]
    fn checked_construction_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1 })
        ));
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn forward_substitution_residual_bound(n in 1usize..=128, d in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_unit_lower(&mut rng, n);
            let rhs = random(&mut rng, n, d);
            let u = forward_substitution(&l, &rhs).unwrap();
            let residual = matmul(&l, &u).unwrap().max_abs_diff(&rhs).unwrap();
            prop_assert!(residual <= 1e-11, "residual {}", residual);
        }

        #[test]
        fn matmul_is_associative(m_ in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m_, n);
            let b = random(&mut rng, n, p);
            let c = random(&mut rng, p, q);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale <= 1e-10);
        }

        #[test]
        fn outer_has_rank_at_most_one(
            k in proptest::collection::vec(-2.0f64..2.0, 2..6),
            e in proptest::collection::vec(-2.0f64..2.0, 2..6),
        ) {
            let o = outer(&Vector::from(k), &Vector::from(e));
            for i in 0..o.rows() {
                for i2 in i + 1..o.rows() {
                    for j in 0..o.cols() {
                        for j2 in j + 1..o.cols() {
                            let minor = o.get(i, j) * o.get(i2, j2) - o.get(i, j2) * o.get(i2, j);
                            prop_assert!(minor.abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }
}
