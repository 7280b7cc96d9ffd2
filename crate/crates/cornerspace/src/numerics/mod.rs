//! Dense and sparse complex linear algebra used by every other module.
//!
//! Matrices are row-major over [`Complex64`]. Dense products go through
//! `matrixmultiply::zgemm`; conjugate-transposed operands are handled with
//! stride tricks so no dagger is ever materialized in a hot loop. Sparse
//! matrices use a compressed-row layout and exist mainly to hold Fock-basis
//! operators, which stay extremely sparse before corner projection.

use num_complex::Complex64;
use thiserror::Error;

mod eigen;
mod qr;

pub use eigen::{hermitian_eig, EigenDecomposition};
pub use qr::nullspace_vector;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix violates Hermiticity: max |A - A^H| = {deviation:.3e} > {allowed:.3e}")]
    NotHermitian { deviation: f64, allowed: f64 },

    #[error("eigensolver failed to converge at row {row} after {iters} iterations")]
    NoConvergence { row: usize, iters: usize },

    #[error("dimension mismatch: {left} vs {right} in {context}")]
    DimensionMismatch {
        left: String,
        right: String,
        context: &'static str,
    },

    #[error("Kronecker product dimensions overflow: {0}x{1}")]
    KronOverflow(usize, usize),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("null space is degenerate: {tiny} diagonal entries below rank tolerance")]
    DegenerateNullSpace { tiny: usize },

    #[error("matrix has no null vector within tolerance (smallest pivot {pivot:.3e})")]
    NoNullVector { pivot: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Drop tolerance for sparse construction, relative to the largest entry.
pub const SPARSE_DROP_TOL: f64 = 1e-15;

// ---------------------------------------------------------------------------
// Dense matrices
// ---------------------------------------------------------------------------

/// Dense complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct ComplexDense {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl std::fmt::Debug for ComplexDense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "ComplexDense {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                let v = self[(r, c)];
                write!(f, "{:+.3e}{:+.3e}i ", v.re, v.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexDense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Real diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(d, 0.0);
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Column `c` as an owned vector.
    pub fn col(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[Complex64]) {
        assert_eq!(v.len(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn dagger(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn scale_mut(&mut self, s: Complex64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: Complex64, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> Complex64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest `|A[i,j] - conj(A[j,i])|` over all entries.
    pub fn hermiticity_deviation(&self) -> f64 {
        assert!(self.is_square());
        let mut dev: f64 = 0.0;
        for r in 0..self.rows {
            for c in r..self.cols {
                dev = dev.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        dev
    }

    /// (A + A^H) / 2.
    pub fn hermitize(&self) -> Self {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |r, c| {
            0.5 * (self[(r, c)] + self[(c, r)].conj())
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// y = A x.
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![Complex64::new(0.0, 0.0); self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[Complex64], y: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            *yi = acc;
        }
    }

    /// C = A B.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut c = Self::zeros(self.rows, other.cols);
        gemm_into(GemmSide::plain(self), GemmSide::plain(other), ONE, ZERO, &mut c);
        c
    }

    /// C = A^H B.
    pub fn dag_mul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "inner dimensions must agree");
        let mut c = Self::zeros(self.cols, other.cols);
        gemm_into(GemmSide::dagger(self), GemmSide::plain(other), ONE, ZERO, &mut c);
        c
    }

    /// C = A B^H.
    pub fn mul_dag(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "inner dimensions must agree");
        let mut c = Self::zeros(self.rows, other.rows);
        gemm_into(GemmSide::plain(self), GemmSide::dagger(other), ONE, ZERO, &mut c);
        c
    }

    /// C += alpha * A B with optional conjugate-transposition of each side.
    pub fn gemm_acc(&mut self, alpha: Complex64, a: GemmSide<'_>, b: GemmSide<'_>) {
        gemm_into(a, b, alpha, ONE, self);
    }

    /// tr(self * other).
    pub fn trace_product(&self, other: &Self) -> Complex64 {
        assert_eq!(self.cols, other.rows);
        assert_eq!(self.rows, other.cols);
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..self.rows {
            for j in 0..self.cols {
                acc += self[(i, j)] * other[(j, i)];
            }
        }
        acc
    }
}

impl std::ops::Index<(usize, usize)> for ComplexDense {
    type Output = Complex64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexDense {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// One operand of a gemm call: a matrix read either as-is or as its
/// conjugate transpose (by swapping strides, without copying).
#[derive(Clone, Copy)]
pub struct GemmSide<'a> {
    mat: &'a ComplexDense,
    dagger: bool,
}

impl<'a> GemmSide<'a> {
    pub fn plain(mat: &'a ComplexDense) -> Self {
        Self { mat, dagger: false }
    }

    pub fn dagger(mat: &'a ComplexDense) -> Self {
        Self { mat, dagger: true }
    }

    fn rows(&self) -> usize {
        if self.dagger {
            self.mat.cols
        } else {
            self.mat.rows
        }
    }

    fn cols(&self) -> usize {
        if self.dagger {
            self.mat.rows
        } else {
            self.mat.cols
        }
    }
}

/// c = alpha * a * b + beta * c via zgemm.
///
/// zgemm has no conjugation flag, so a daggered side is handled by
/// conjugating into a temporary (O(n^2), negligible next to the product)
/// and reading it transposed through swapped strides.
fn gemm_into(a: GemmSide<'_>, b: GemmSide<'_>, alpha: Complex64, beta: Complex64, c: &mut ComplexDense) {
    use matrixmultiply::CGemmOption;
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "gemm inner dimensions must agree");
    assert_eq!(c.rows, m);
    assert_eq!(c.cols, n);
    if m == 0 || n == 0 || ka == 0 {
        return;
    }
    let conj_a;
    let (pa, rsa, csa) = if a.dagger {
        conj_a = a.mat.conj();
        (conj_a.data.as_ptr(), 1isize, a.mat.cols as isize)
    } else {
        (a.mat.data.as_ptr(), a.mat.cols as isize, 1isize)
    };
    let conj_b;
    let (pb, rsb, csb) = if b.dagger {
        conj_b = b.mat.conj();
        (conj_b.data.as_ptr(), 1isize, b.mat.cols as isize)
    } else {
        (b.mat.data.as_ptr(), b.mat.cols as isize, 1isize)
    };
    unsafe {
        matrixmultiply::zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            ka,
            n,
            [alpha.re, alpha.im],
            pa as *const [f64; 2],
            rsa,
            csa,
            pb as *const [f64; 2],
            rsb,
            csb,
            [beta.re, beta.im],
            c.data.as_mut_ptr() as *mut [f64; 2],
            c.cols as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Sparse matrices (CSR)
// ---------------------------------------------------------------------------

/// Compressed-row complex sparse matrix. Column indices are sorted and
/// unique within each row; entries below [`SPARSE_DROP_TOL`] relative to
/// the largest magnitude are dropped at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSparse {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<Complex64>,
}

impl ComplexSparse {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![ONE; n],
        }
    }

    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, Complex64)]) -> Self {
        let max_abs = triplets.iter().map(|t| t.2.norm()).fold(0.0, f64::max);
        let drop = SPARSE_DROP_TOL * max_abs;
        let mut sorted: Vec<_> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<Complex64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let mut out = Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        };
        out.drop_small(drop);
        out
    }

    pub fn from_dense(m: &ComplexDense) -> Self {
        let drop = SPARSE_DROP_TOL * m.max_abs();
        let mut indptr = vec![0usize; m.rows() + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = m[(r, c)];
                if v.norm() > drop {
                    indices.push(c);
                    values.push(v);
                    indptr[r + 1] += 1;
                }
            }
        }
        for r in 0..m.rows() {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            indptr,
            indices,
            values,
        }
    }

    fn drop_small(&mut self, drop: f64) {
        if self.values.iter().all(|v| v.norm() > drop) {
            return;
        }
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k].norm() > drop {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                    indptr[r + 1] += 1;
                }
            }
        }
        for r in 0..self.rows {
            indptr[r + 1] += indptr[r];
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn density(&self) -> f64 {
        if self.rows * self.cols == 0 {
            0.0
        } else {
            self.nnz() as f64 / (self.rows * self.cols) as f64
        }
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> ComplexDense {
        let mut m = ComplexDense::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    pub fn dagger(&self) -> Self {
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                trips.push((c, r, v.conj()));
            }
        }
        Self::from_triplets(self.cols, self.rows, &trips)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut trips = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                trips.push((r, c, v));
            }
            for (c, v) in other.row_entries(r) {
                trips.push((r, c, v));
            }
        }
        Self::from_triplets(self.rows, self.cols, &trips)
    }

    /// y = A x.
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![ZERO; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[Complex64], y: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = ZERO;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *out = acc;
        }
    }

    /// C = S D (sparse times dense).
    pub fn mul_dense(&self, d: &ComplexDense) -> ComplexDense {
        assert_eq!(self.cols, d.rows());
        let mut c = ComplexDense::zeros(self.rows, d.cols());
        self.mul_dense_into(d, &mut c);
        c
    }

    pub fn mul_dense_into(&self, d: &ComplexDense, c: &mut ComplexDense) {
        debug_assert_eq!(self.cols, d.rows());
        debug_assert_eq!(c.rows(), self.rows);
        debug_assert_eq!(c.cols(), d.cols());
        let n = d.cols();
        c.data_mut().fill(ZERO);
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                let drow = d.row(self.indices[k]);
                let crow = &mut c.data_mut()[r * n..(r + 1) * n];
                for (ci, di) in crow.iter_mut().zip(drow.iter()) {
                    *ci += v * di;
                }
            }
        }
    }

    /// C = D S (dense times sparse).
    pub fn dense_mul(&self, d: &ComplexDense) -> ComplexDense {
        assert_eq!(d.cols(), self.rows);
        let mut c = ComplexDense::zeros(d.rows(), self.cols);
        self.dense_mul_into(d, &mut c);
        c
    }

    pub fn dense_mul_into(&self, d: &ComplexDense, c: &mut ComplexDense) {
        debug_assert_eq!(d.cols(), self.rows);
        debug_assert_eq!(c.rows(), d.rows());
        debug_assert_eq!(c.cols(), self.cols);
        let n = self.cols;
        c.data_mut().fill(ZERO);
        for i in 0..d.rows() {
            let drow = d.row(i);
            let crow = &mut c.data_mut()[i * n..(i + 1) * n];
            for (j, &dij) in drow.iter().enumerate() {
                for k in self.indptr[j]..self.indptr[j + 1] {
                    crow[self.indices[k]] += dij * self.values[k];
                }
            }
        }
    }

    /// C = A B (both sparse).
    pub fn mul_sparse(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut trips = Vec::new();
        let mut acc: Vec<Complex64> = vec![ZERO; other.cols];
        let mut mark = vec![false; other.cols];
        let mut touched: Vec<usize> = Vec::new();
        for r in 0..self.rows {
            for (j, v) in self.row_entries(r) {
                for (c, w) in other.row_entries(j) {
                    if !mark[c] {
                        mark[c] = true;
                        touched.push(c);
                    }
                    acc[c] += v * w;
                }
            }
            for &c in &touched {
                trips.push((r, c, acc[c]));
                acc[c] = ZERO;
                mark[c] = false;
            }
            touched.clear();
        }
        Self::from_triplets(self.rows, other.cols, &trips)
    }
}

// ---------------------------------------------------------------------------
// Kronecker products
// ---------------------------------------------------------------------------

/// Cap on each dimension of a Kronecker product result.
pub const KRON_DIM_CAP: usize = 1 << 26;

/// Dense Kronecker product: entry ((i*rB + k), (j*cB + l)) = A(i,j) B(k,l).
pub fn kron(a: &ComplexDense, b: &ComplexDense) -> Result<ComplexDense> {
    let rows = a
        .rows()
        .checked_mul(b.rows())
        .filter(|&r| r <= KRON_DIM_CAP)
        .ok_or(NumericsError::KronOverflow(a.rows(), b.rows()))?;
    let cols = a
        .cols()
        .checked_mul(b.cols())
        .filter(|&c| c <= KRON_DIM_CAP)
        .ok_or(NumericsError::KronOverflow(a.cols(), b.cols()))?;
    let mut out = ComplexDense::zeros(rows, cols);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out[(i * b.rows() + k, j * b.cols() + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    Ok(out)
}

/// Sparse Kronecker product with the same index convention as [`kron`].
pub fn kron_sparse(a: &ComplexSparse, b: &ComplexSparse) -> Result<ComplexSparse> {
    let rows = a
        .rows()
        .checked_mul(b.rows())
        .filter(|&r| r <= KRON_DIM_CAP)
        .ok_or(NumericsError::KronOverflow(a.rows(), b.rows()))?;
    let cols = a
        .cols()
        .checked_mul(b.cols())
        .filter(|&c| c <= KRON_DIM_CAP)
        .ok_or(NumericsError::KronOverflow(a.cols(), b.cols()))?;
    let mut trips = Vec::with_capacity(a.nnz() * b.nnz());
    for i in 0..a.rows() {
        for (j, v) in a.row_entries(i) {
            for k in 0..b.rows() {
                for (l, w) in b.row_entries(k) {
                    trips.push((i * b.rows() + k, j * b.cols() + l, v * w));
                }
            }
        }
    }
    Ok(ComplexSparse::from_triplets(rows, cols, &trips))
}

// ---------------------------------------------------------------------------
// Runge-Kutta stepping
// ---------------------------------------------------------------------------

/// Time-derivative map: `f(t, y, out)` writes dy/dt into `out`.
pub type DerivativeFn<'a> = dyn FnMut(f64, &[Complex64], &mut [Complex64]) + 'a;

/// One classical fourth-order Runge-Kutta step.
///
/// Returns an error if the derivative produces non-finite values.
pub fn rk4_step(
    f: &mut DerivativeFn<'_>,
    y: &[Complex64],
    t: f64,
    dt: f64,
) -> Result<Vec<Complex64>> {
    assert!(dt.is_finite() && dt > 0.0, "rk4 step size must be positive");
    let mut ws = Rk4Workspace::new(y.len());
    let mut out = y.to_vec();
    ws.step(f, &mut out, t, dt);
    if out.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(out)
    } else {
        Err(NumericsError::NonFinite("rk4_step"))
    }
}

/// Reusable buffers for repeated RK4 stepping without allocation.
pub struct Rk4Workspace {
    k: Vec<Complex64>,
    stage: Vec<Complex64>,
    acc: Vec<Complex64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            k: vec![ZERO; dim],
            stage: vec![ZERO; dim],
            acc: vec![ZERO; dim],
        }
    }

    /// Advance `y` in place from `t` to `t + dt`.
    pub fn step(
        &mut self,
        f: &mut DerivativeFn<'_>,
        y: &mut [Complex64],
        t: f64,
        dt: f64,
    ) {
        let h = Complex64::new(dt, 0.0);
        let half = Complex64::new(0.5 * dt, 0.0);
        let sixth = Complex64::new(dt / 6.0, 0.0);
        let third = Complex64::new(dt / 3.0, 0.0);

        // k1
        f(t, y, &mut self.k);
        for ((acc, yi), ki) in self.acc.iter_mut().zip(y.iter()).zip(&self.k) {
            *acc = yi + sixth * ki;
        }
        for ((st, yi), ki) in self.stage.iter_mut().zip(y.iter()).zip(&self.k) {
            *st = yi + half * ki;
        }
        // k2
        f(t + 0.5 * dt, &self.stage, &mut self.k);
        for (acc, ki) in self.acc.iter_mut().zip(&self.k) {
            *acc += third * ki;
        }
        for ((st, yi), ki) in self.stage.iter_mut().zip(y.iter()).zip(&self.k) {
            *st = yi + half * ki;
        }
        // k3
        f(t + 0.5 * dt, &self.stage, &mut self.k);
        for (acc, ki) in self.acc.iter_mut().zip(&self.k) {
            *acc += third * ki;
        }
        for ((st, yi), ki) in self.stage.iter_mut().zip(y.iter()).zip(&self.k) {
            *st = yi + h * ki;
        }
        // k4
        f(t + dt, &self.stage, &mut self.k);
        for (acc, ki) in self.acc.iter_mut().zip(&self.k) {
            *acc += sixth * ki;
        }
        y.copy_from_slice(&self.acc);
    }
}

// ---------------------------------------------------------------------------
// Operator: dense-or-sparse wrapper
// ---------------------------------------------------------------------------

/// A square operator stored dense or sparse, whichever suits its origin.
/// Fock-basis operators stay sparse; corner-projected operators are dense
/// unless projection left them sparse enough to matter in the dissipator.
#[derive(Clone, Debug)]
pub enum Operator {
    Dense(ComplexDense),
    Sparse(ComplexSparse),
}

impl Operator {
    pub fn dim(&self) -> usize {
        match self {
            Operator::Dense(m) => m.rows(),
            Operator::Sparse(s) => s.rows(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Operator::Sparse(_))
    }

    pub fn to_dense(&self) -> ComplexDense {
        match self {
            Operator::Dense(m) => m.clone(),
            Operator::Sparse(s) => s.to_dense(),
        }
    }

    pub fn matvec_into(&self, x: &[Complex64], y: &mut [Complex64]) {
        match self {
            Operator::Dense(m) => m.matvec_into(x, y),
            Operator::Sparse(s) => s.matvec_into(x, y),
        }
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        match self {
            Operator::Dense(m) => m.matvec(x),
            Operator::Sparse(s) => s.matvec(x),
        }
    }

    pub fn dagger(&self) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m.dagger()),
            Operator::Sparse(s) => Operator::Sparse(s.dagger()),
        }
    }

    pub fn scale(&self, s: Complex64) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m.scale(s)),
            Operator::Sparse(sp) => Operator::Sparse(sp.scale(s)),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Operator::Dense(m) => m.max_abs(),
            Operator::Sparse(s) => s.max_abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Operator::Dense(m) => m.data().iter().all(|z| *z == ZERO),
            Operator::Sparse(s) => s.nnz() == 0,
        }
    }

    /// tr(rho * self) for a dense rho.
    pub fn expectation(&self, rho: &ComplexDense) -> Complex64 {
        match self {
            Operator::Dense(m) => rho.trace_product(m),
            Operator::Sparse(s) => {
                let mut acc = ZERO;
                for r in 0..s.rows() {
                    for (c, v) in s.row_entries(r) {
                        acc += rho[(c, r)] * v;
                    }
                }
                acc
            }
        }
    }

    /// <x| self |x> without normalizing.
    pub fn quadratic_form(&self, x: &[Complex64], scratch: &mut [Complex64]) -> Complex64 {
        self.matvec_into(x, scratch);
        x.iter()
            .zip(scratch.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }
}

/// 2-norm of a complex vector.
pub fn vec_norm(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// <a|b>.
pub fn vec_dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}
