//! Dense row-major matrices and a one-sided Jacobi thin SVD.

use crate::error::{Error, Result};

/// Sweep limit for the Jacobi iteration.
pub const DEFAULT_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// Elementwise `self - other`; panics on shape mismatch.
    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!(self.shape(), other.shape());
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

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// Row combination `uᵀ·self`, a vector of length `cols`.
    pub fn left_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "left vector of length {} against {} rows",
                u.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &uk) in u.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(k)) {
                *o += uk * w;
            }
        }
        Ok(out)
    }

    /// Column combination `self·v`, a vector of length `rows`.
    pub fn right_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "right vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin SVD `A = U·diag(σ)·Vᵀ` with `R = min(m, n)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    rows: usize,
    cols: usize,
    left: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    right: Vec<Vec<f64>>,
}

impl SpectralDecomposition {
    #[inline]
    pub fn rank(&self) -> usize {
        self.sigma.len()
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
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Left singular vector `u^r` (0-based `r`), length `rows`.
    #[inline]
    pub fn u(&self, r: usize) -> &[f64] {
        &self.left[r]
    }

    /// Right singular vector `v^r` (0-based `r`), length `cols`.
    #[inline]
    pub fn v(&self, r: usize) -> &[f64] {
        &self.right[r]
    }

    pub fn u_matrix(&self) -> Matrix {
        columns_to_matrix(self.rows, &self.left)
    }

    pub fn v_matrix(&self) -> Matrix {
        columns_to_matrix(self.cols, &self.right)
    }
}

fn columns_to_matrix(rows: usize, columns: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(rows, columns.len());
    for (j, c) in columns.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            m.set(i, j, x);
        }
    }
    m
}

pub fn svd(a: &Matrix) -> Result<SpectralDecomposition> {
    svd_with_limit(a, DEFAULT_MAX_SWEEPS)
}

pub fn svd_with_limit(a: &Matrix, max_sweeps: usize) -> Result<SpectralDecomposition> {
    if !a.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (tall_left, sigma, tall_right) = jacobi_tall(&work, max_sweeps)?;

    let (mut left, mut right) = if transposed {
        (tall_right, tall_left)
    } else {
        (tall_left, tall_right)
    };

    for (u, v) in left.iter_mut().zip(right.iter_mut()) {
        let mut pivot = 0.0f64;
        for &x in u.iter() {
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        if pivot < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SpectralDecomposition {
        rows: a.rows,
        cols: a.cols,
        left,
        sigma,
        right,
    })
}

type Triplets = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Hestenes one-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall(a: &Matrix, max_sweeps: usize) -> Result<Triplets> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (m.max(1) as f64);
    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (head, tail) = w.split_at_mut(q);
                let (wp, wq) = (&mut head[p], &mut tail[0]);
                let alpha = dot(wp, wp);
                let beta = dot(wq, wq);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(wp, wq);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(wp, wq, c, s);
                let (head, tail) = v.split_at_mut(q);
                rotate(&mut head[p], &mut tail[0], c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure(max_sweeps));
    }

    let norms: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut sigma = Vec::with_capacity(n);
    let mut left: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        sigma.push(s);
        left.push((s > 0.0).then(|| w[j].iter().map(|x| x / s).collect()));
        right.push(std::mem::take(&mut v[j]));
    }
    let left = complete_orthonormal(m, left);
    Ok((left, sigma, right))
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal
/// to every other column, by Gram-Schmidt over the standard basis.
fn complete_orthonormal(m: usize, columns: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    if columns.iter().all(Option::is_some) {
        return columns.into_iter().flatten().collect();
    }
    let mut basis: Vec<Vec<f64>> = columns.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(columns.len());
    let mut candidate = 0usize;
    for slot in columns {
        if let Some(c) = slot {
            out.push(c);
            continue;
        }
        // Some basis vector always keeps a residual of at least 1/m.
        let threshold = 0.5 / (m as f64);
        let filled = loop {
            assert!(candidate < m, "ran out of completion candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(b, &e);
                    e.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let nrm = norm(&e);
            if nrm * nrm >= threshold {
                e.iter_mut().for_each(|x| *x /= nrm);
                break e;
            }
        };
        basis.push(filled.clone());
        out.push(filled);
    }
    out
}

/// `Σ_r sigma_override[r]·u^r·(v^r)ᵀ`.
pub fn reconstruct(d: &SpectralDecomposition, sigma_override: &[f64]) -> Result<Matrix> {
    if sigma_override.len() != d.rank() {
        return Err(Error::LengthMismatch {
            expected: d.rank(),
            found: sigma_override.len(),
        });
    }
    let mut out = Matrix::zeros(d.rows, d.cols);
    for (r, &s) in sigma_override.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let v = &d.right[r];
        for (i, &ui) in d.left[r].iter().enumerate() {
            let a = s * ui;
            let row = &mut out.data[i * d.cols..(i + 1) * d.cols];
            for (x, &vj) in row.iter_mut().zip(v) {
                *x += a * vj;
            }
        }
    }
    Ok(out)
}
