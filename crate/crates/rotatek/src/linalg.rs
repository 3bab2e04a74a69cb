//! Dense double-precision linear algebra for small fixed shapes.
//!
//! Everything here is self-contained: plain row-major storage, triple-loop
//! GEMM, Cholesky factorization with triangular solves, and a cyclic Jacobi
//! eigendecomposition that serves as the accuracy oracle for the subspace
//! iteration. Head dimensions stay in the low hundreds, so none of this
//! needs blocking or external solvers.

use thiserror::Error;

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_RTOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error(
        "dimension mismatch in {op}: left {left_rows}x{left_cols}, right {right_rows}x{right_cols}"
    )]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("not positive definite: pivot {pivot} is non-positive")]
    NotPositiveDefinite { pivot: usize },
    #[error("singular triangular factor: zero diagonal at index {index}")]
    SingularTriangle { index: usize },
    #[error("not symmetric: relative asymmetry {asymmetry:.3e} exceeds {limit:.1e}")]
    NotSymmetric { asymmetry: f64, limit: f64 },
    #[error("nonzero strict upper entry at ({row}, {col}) in a lower-triangular factor")]
    NotLowerTriangular { row: usize, col: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::BadShape {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    /// Diagonal square matrix from the given entries.
    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.set(i, i, v);
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of diagonal entries. Requires a square matrix.
    pub fn trace(&self) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "sub",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// Keeps the leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        debug_assert!(k <= self.cols);
        let mut m = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            for j in 0..k {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// Downcast to single-precision storage.
    pub fn to_f32(&self) -> MatrixF32 {
        MatrixF32 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Row-major single-precision matrix, used only as cache/trace storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF32 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MatrixF32 {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        for (idx, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite {
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
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
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Upcast back to the double-precision compute domain.
    pub fn to_f64(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Lower-triangular factor with strictly positive diagonal, stored row-major
/// with zeroed strict upper part.
#[derive(Debug, Clone)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    /// Validates the triangular structure: strict upper entries must be zero
    /// and diagonal entries strictly positive.
    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != dim * dim {
            return Err(LinalgError::BadShape {
                rows: dim,
                cols: dim,
                len: data.len(),
            });
        }
        for i in 0..dim {
            if data[i * dim + i] <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite { pivot: i });
            }
            for j in (i + 1)..dim {
                if data[i * dim + j] != 0.0 {
                    return Err(LinalgError::NotLowerTriangular { row: i, col: j });
                }
            }
        }
        Ok(Self { dim, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }
}

/// Standard dense product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // ikj ordering keeps the inner loop on contiguous rows of b and out.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Gram matrix `aᵀ a` without materializing the transpose.
#[allow(clippy::needless_range_loop)] // triangular update over two views
pub fn gram(a: &Matrix) -> Matrix {
    let n = a.cols;
    let mut g = Matrix::zeros(n, n);
    for row in 0..a.rows {
        let r = a.row(row);
        for i in 0..n {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..n {
                let v = g.get(i, j) + ri * r[j];
                g.set(i, j, v);
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g.set(i, j, g.get(j, i));
        }
    }
    g
}

fn relative_asymmetry(c: &Matrix) -> f64 {
    let norm = c.frobenius_norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut asym = 0.0f64;
    for i in 0..c.rows {
        for j in 0..c.cols {
            let d = c.get(i, j) - c.get(j, i);
            asym += d * d;
        }
    }
    asym.sqrt() / norm
}

/// Checks symmetry within [`SYMMETRY_RTOL`] and returns the symmetrized
/// `(c + cᵀ)/2`, absorbing roundoff without accepting misuse.
pub fn symmetrize_checked(c: &Matrix) -> Result<Matrix, LinalgError> {
    if c.rows != c.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "symmetrize",
            left_rows: c.rows,
            left_cols: c.cols,
            right_rows: c.cols,
            right_cols: c.rows,
        });
    }
    let asym = relative_asymmetry(c);
    if asym > SYMMETRY_RTOL {
        return Err(LinalgError::NotSymmetric {
            asymmetry: asym,
            limit: SYMMETRY_RTOL,
        });
    }
    let mut s = c.clone();
    for i in 0..c.rows {
        for j in 0..i {
            let v = 0.5 * (c.get(i, j) + c.get(j, i));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Cholesky factorization `g = L Lᵀ` of a symmetric positive-definite matrix.
///
/// A non-positive pivot yields [`LinalgError::NotPositiveDefinite`] carrying
/// the failing pivot index.
pub fn cholesky(g: &Matrix) -> Result<LowerTriangular, LinalgError> {
    let s = symmetrize_checked(g)?;
    let n = s.rows;
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut diag = s.get(j, j);
        for t in 0..j {
            diag -= l[j * n + t] * l[j * n + t];
        }
        if diag <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut v = s.get(i, j);
            for t in 0..j {
                v -= l[i * n + t] * l[j * n + t];
            }
            l[i * n + j] = v / ljj;
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

/// Solves `X Lᵀ = V` for `X`, i.e. applies `L⁻ᵀ` from the right.
pub fn solve_triangular_right(v: &Matrix, l: &LowerTriangular) -> Result<Matrix, LinalgError> {
    if v.cols != l.dim {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_triangular_right",
            left_rows: v.rows,
            left_cols: v.cols,
            right_rows: l.dim,
            right_cols: l.dim,
        });
    }
    for j in 0..l.dim {
        if l.get(j, j) == 0.0 {
            return Err(LinalgError::SingularTriangle { index: j });
        }
    }
    let n = l.dim;
    let mut x = Matrix::zeros(v.rows, n);
    // Row-wise forward substitution: x[b] = (v[b] - Σ_{a<b} x[a]·L[b,a]) / L[b,b].
    for i in 0..v.rows {
        for b in 0..n {
            let mut acc = v.get(i, b);
            for a in 0..b {
                acc -= x.get(i, a) * l.get(b, a);
            }
            x.set(i, b, acc / l.get(b, b));
        }
    }
    Ok(x)
}

/// Maximum Jacobi sweeps before giving up on further off-diagonal reduction.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm threshold, relative to the input norm.
const JACOBI_OFF_RTOL: f64 = 1e-12;

/// Full symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns, each flipped so its largest-magnitude entry is positive. This is
/// the accuracy oracle for the truncated subspace iteration.
pub fn eigh_full(c: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let mut a = symmetrize_checked(c)?;
    let n = a.rows;
    let mut u = Matrix::identity(n);
    let norm_c = a.frobenius_norm();

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() <= JACOBI_OFF_RTOL * norm_c {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                // Stable rotation angle per Numerical Recipes §11.1.
                let theta = 0.5 * (a.get(q, q) - a.get(p, p)) / apq;
                let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                if theta < 0.0 {
                    t = -t;
                }
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = t * cos;

                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, cos * aip - sin * aiq);
                    a.set(i, q, sin * aip + cos * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, cos * apj - sin * aqj);
                    a.set(q, j, sin * apj + cos * aqj);
                }
                for i in 0..n {
                    let uip = u.get(i, p);
                    let uiq = u.get(i, q);
                    u.set(i, p, cos * uip - sin * uiq);
                    u.set(i, q, sin * uip + cos * uiq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());

    let mut values = Vec::with_capacity(n);
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(a.get(src, src));
        // Sign convention: largest-magnitude entry positive.
        let mut max_idx = 0;
        let mut max_abs = 0.0f64;
        for i in 0..n {
            let v = u.get(i, src).abs();
            if v > max_abs {
                max_abs = v;
                max_idx = i;
            }
        }
        let flip = if u.get(max_idx, src) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.set(i, dst, flip * u.get(i, src));
        }
    }
    Ok((values, vectors))
}

/// Dot product of equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Matrix-vector product `m · x`.
pub fn matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols, x.len());
    (0..m.rows).map(|i| dot(m.row(i), x)).collect()
}

/// Vector-matrix product `xᵀ · m`, returned as a plain vector.
pub fn vecmat(x: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(m.rows, x.len());
    let mut out = vec![0.0; m.cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &mv) in out.iter_mut().zip(m.row(i)) {
            *o += xi * mv;
        }
    }
    out
}
