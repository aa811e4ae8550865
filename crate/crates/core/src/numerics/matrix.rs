use std::ops::{Index, IndexMut};

use num_complex::Complex64 as C64;

use super::EIGEN_FLOOR;
use crate::error::{Error, Result};

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(*v, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape("matrix sizes differ".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, rhs: &CMatrix) -> Result<CMatrix> {
        self.add(&rhs.scaled(C64::new(-1.0, 0.0)))
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square complex matrix equal to its own conjugate transpose.
///
/// Only [`hermitize`], [`regularize`] and the crate's covariance
/// accumulators construct these, so the symmetry holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn diag(values: &[f64]) -> Self {
        Self(CMatrix::diag(values))
    }

    /// Outer product `v vᴴ`.
    pub fn outer(v: &[C64]) -> Self {
        let mut m = CMatrix::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj());
        for i in 0..v.len() {
            m[(i, i)].im = 0.0;
        }
        Self(m)
    }

    pub(crate) fn from_raw(m: CMatrix) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].re).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.scaled(C64::new(c, 0.0)))
    }

    pub fn add(&self, rhs: &HermitianMatrix) -> Result<Self> {
        Ok(Self(self.0.add(&rhs.0)?))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    /// Simultaneous row/column permutation: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(CMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            self.0[(perm[i], perm[j])]
        }))
    }
}

impl Index<(usize, usize)> for HermitianMatrix {
    type Output = C64;

    fn index(&self, idx: (usize, usize)) -> &C64 {
        &self.0[idx]
    }
}

/// `(A + Aᴴ) / 2`.
pub fn hermitize(a: &CMatrix) -> Result<HermitianMatrix> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "hermitize needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = C64::new(a[(i, i)].re, 0.0);
        for j in (i + 1)..n {
            let v = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    Ok(HermitianMatrix(out))
}

/// Diagonal loading `A + ε·(tr(A)/M)·I`, or `A + ε·I` when the trace is zero.
pub fn regularize(a: &HermitianMatrix, eps: f64) -> HermitianMatrix {
    let n = a.dim();
    let tr = a.trace();
    let load = if tr == 0.0 || n == 0 {
        eps
    } else {
        eps * tr / n as f64
    };
    let mut out = a.0.clone();
    for i in 0..n {
        out[(i, i)].re += load;
    }
    HermitianMatrix(out)
}

/// Cholesky factor `A = L Lᴴ` of a Hermitian positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    dim: usize,
    // row-major lower triangle, upper part zero
    l: Vec<C64>,
}

impl Cholesky {
    /// Returns `None` when `a` is not numerically positive definite.
    pub fn factor(a: &HermitianMatrix) -> Option<Self> {
        let n = a.dim();
        let src = a.0.as_slice();
        let mut l = vec![C64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = src[j * n + j].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = C64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = src[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(Self { dim: n, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.l[i * self.dim + i].re.ln())
            .sum::<f64>()
            * 2.0
    }

    /// Solves `L z = b` in place.
    fn forward(&self, b: &mut [C64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let mut s = b[i];
            for (lk, zk) in row.iter().zip(&b[..i]) {
                s -= lk * zk;
            }
            b[i] = s / self.l[i * n + i].re;
        }
    }

    /// Solves `Lᴴ x = z` in place.
    fn backward(&self, z: &mut [C64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i].conj() * z[k];
            }
            z[i] = s / self.l[i * n + i].re;
        }
    }

    pub fn solve_vec_in_place(&self, b: &mut [C64]) {
        self.forward(b);
        self.backward(b);
    }

    /// `yᴴ A⁻¹ y`, using `scratch` (length ≥ dim) as workspace.
    pub fn quad_form(&self, y: &[C64], scratch: &mut [C64]) -> f64 {
        let z = &mut scratch[..self.dim];
        z.copy_from_slice(&y[..self.dim]);
        self.forward(z);
        z.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Factorization of a Hermitian positive (semi)definite matrix used for
/// solves, quadratic forms and log-determinants.
///
/// Tries Cholesky first; when that fails the eigenvalues are floored at
/// `EIGEN_FLOOR · λ_max` and the inverse is applied through the real
/// symmetric embedding `[[Re, −Im], [Im, Re]]`.
#[derive(Clone, Debug)]
pub enum PdFactor {
    Cholesky(Cholesky),
    Eigen(FlooredEigen),
}

#[derive(Clone, Debug)]
pub struct FlooredEigen {
    dim: usize,
    // eigen pairs of the 2M×2M real embedding; each complex eigenvalue appears twice
    values: Vec<f64>,
    vectors: Vec<f64>,
}

impl PdFactor {
    pub fn new(a: &HermitianMatrix) -> Result<Self> {
        if !a.is_finite() {
            return Err(Error::Singular { frequency: None });
        }
        if let Some(c) = Cholesky::factor(a) {
            return Ok(PdFactor::Cholesky(c));
        }
        let (mut values, vectors) = symmetric_eigen(&real_embedding(a), 2 * a.dim());
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Singular { frequency: None });
        }
        let floor = EIGEN_FLOOR * max;
        for v in &mut values {
            if *v < floor {
                *v = floor;
            }
        }
        Ok(PdFactor::Eigen(FlooredEigen {
            dim: a.dim(),
            values,
            vectors,
        }))
    }

    pub fn dim(&self) -> usize {
        match self {
            PdFactor::Cholesky(c) => c.dim,
            PdFactor::Eigen(e) => e.dim,
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            PdFactor::Cholesky(c) => c.log_det(),
            PdFactor::Eigen(e) => 0.5 * e.values.iter().map(|v| v.ln()).sum::<f64>(),
        }
    }

    pub fn solve_vec_in_place(&self, b: &mut [C64]) {
        match self {
            PdFactor::Cholesky(c) => c.solve_vec_in_place(b),
            PdFactor::Eigen(e) => e.solve_vec_in_place(b),
        }
    }

    pub fn quad_form(&self, y: &[C64], scratch: &mut [C64]) -> f64 {
        match self {
            PdFactor::Cholesky(c) => c.quad_form(y, scratch),
            PdFactor::Eigen(e) => {
                let x = &mut scratch[..e.dim];
                x.copy_from_slice(&y[..e.dim]);
                e.solve_vec_in_place(x);
                y.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum()
            }
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &CMatrix) -> Result<CMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::Shape(format!(
                "right-hand side has {} rows, system has {n}",
                b.rows()
            )));
        }
        let mut out = CMatrix::zeros(n, b.cols());
        let mut col = vec![C64::new(0.0, 0.0); n];
        for j in 0..b.cols() {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            self.solve_vec_in_place(&mut col);
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }
}

impl FlooredEigen {
    fn solve_vec_in_place(&self, b: &mut [C64]) {
        let n = self.dim;
        let n2 = 2 * n;
        let rhs: Vec<f64> = b.iter().map(|c| c.re).chain(b.iter().map(|c| c.im)).collect();
        let mut x = vec![0.0; n2];
        for k in 0..n2 {
            // column k of the eigenvector matrix
            let proj: f64 = (0..n2).map(|i| self.vectors[i * n2 + k] * rhs[i]).sum();
            let c = proj / self.values[k];
            for i in 0..n2 {
                x[i] += c * self.vectors[i * n2 + k];
            }
        }
        for i in 0..n {
            b[i] = C64::new(x[i], x[n + i]);
        }
    }
}

/// Solves `A X = B` for Hermitian positive definite `A` without forming `A⁻¹`.
pub fn hermitian_solve(a: &HermitianMatrix, b: &CMatrix) -> Result<CMatrix> {
    PdFactor::new(a)?.solve(b)
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(a: &HermitianMatrix) -> Vec<f64> {
    let (mut values, _) = symmetric_eigen(&real_embedding(a), 2 * a.dim());
    values.sort_by(f64::total_cmp);
    values.into_iter().step_by(2).collect()
}

fn real_embedding(a: &HermitianMatrix) -> Vec<f64> {
    let n = a.dim();
    let n2 = 2 * n;
    let mut s = vec![0.0; n2 * n2];
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            s[i * n2 + j] = v.re;
            s[(n + i) * n2 + (n + j)] = v.re;
            s[i * n2 + (n + j)] = -v.im;
            s[(n + i) * n2 + j] = v.im;
        }
    }
    s
}

/// Cyclic Jacobi eigen-decomposition of a real symmetric `n×n` matrix.
/// Returns eigenvalues and the row-major eigenvector matrix (columns).
fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let total: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}
