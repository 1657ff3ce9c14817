#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use spectral_merge::{Basis, Matrix};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Tasks sharing a common component, so cross terms are mostly positive.
pub fn correlated_tasks(rng: &mut StdRng, k: usize, rows: usize, cols: usize) -> Vec<Matrix> {
    let shared = random_matrix(rng, rows, cols);
    (0..k)
        .map(|_| {
            let own = random_matrix(rng, rows, cols);
            let w = rng.gen_range(0.0..1.5);
            Matrix::new(
                rows,
                cols,
                own.as_slice()
                    .iter()
                    .zip(shared.as_slice())
                    .map(|(a, b)| a + w * b)
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.sub(b).frobenius_norm()
}

pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    frob_diff(a, b) / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// Singular values from the eigenvalues of the smaller Gram matrix, descending.
pub fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let a = to_na(m);
    let g = if m.rows() >= m.cols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let mut ev: Vec<f64> = g
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Sorted `(σ, u, v)` triplets from nalgebra's SVD.
pub fn na_triplets(m: &Matrix) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    let svd = to_na(m).svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out: Vec<_> = (0..svd.singular_values.len())
        .map(|r| {
            (
                svd.singular_values[r],
                u.column(r).iter().copied().collect::<Vec<_>>(),
                vt.row(r).iter().copied().collect::<Vec<_>>(),
            )
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn row_combo(u: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[j] += u[i] * m.get(i, j);
        }
    }
    out
}

fn col_combo(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[i] += m.get(i, j) * v[j];
        }
    }
    out
}

/// Per-subspace factors computed step by step from an independent SVD.
pub fn oracle_gammas(
    deltas: &[Matrix],
    merged: &Matrix,
    alpha: f64,
    basis: Basis,
    target: Option<usize>,
) -> Vec<(f64, f64, Vec<f64>, Vec<f64>)> {
    let triplets = na_triplets(merged);
    let sigma_max = triplets[0].0;
    let mut out = Vec::new();
    for (sigma, u, v) in triplets {
        let mut gamma = 1.0;
        if sigma > 1e-12 * sigma_max {
            let response = |m: &Matrix| match basis {
                Basis::ColumnSpace => row_combo(&u, m),
                Basis::RowSpace => col_combo(m, &v),
            };
            let a_merge = response(merged);
            let mut s = Vec::new();
            for (i, d) in deltas.iter().enumerate() {
                let a = response(d);
                let nsq = dotv(&a, &a);
                let threshold = 1e-9 * d.frobenius_norm().max(1.0);
                if nsq.sqrt() > threshold {
                    s.push((i, dotv(&a_merge, &a) / nsq));
                }
            }
            match target {
                None => {
                    if !s.is_empty() {
                        let mut denom = 0.0;
                        for &(_, si) in &s {
                            denom += if si > alpha { si } else { alpha };
                        }
                        gamma = s.len() as f64 / denom;
                    }
                }
                Some(t) => {
                    if let Some(&(_, st)) = s.iter().find(|(i, _)| *i == t) {
                        gamma = 1.0 / if st > alpha { st } else { alpha };
                    }
                }
            }
        }
        out.push((sigma, gamma, u, v));
    }
    out
}

pub fn oracle_calibrate(
    deltas: &[Matrix],
    merged: &Matrix,
    alpha: f64,
    basis: Basis,
    target: Option<usize>,
) -> Matrix {
    let mut out = Matrix::zeros(merged.rows(), merged.cols());
    for (sigma, gamma, u, v) in oracle_gammas(deltas, merged, alpha, basis, target) {
        for i in 0..merged.rows() {
            for j in 0..merged.cols() {
                let x = out.get(i, j) + gamma * sigma * u[i] * v[j];
                out.set(i, j, x);
            }
        }
    }
    out
}

/// Golden-section minimizer of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// `|Proj_{a}(γ·m) - a|²` evaluated directly.
pub fn projection_objective(gamma: f64, a_merge: &[f64], a: &[f64]) -> f64 {
    let coeff = dotv(a_merge, a) * gamma / dotv(a, a);
    a.iter().map(|&x| (coeff * x - x).powi(2)).sum()
}

/// Cosines of principal angles between the column spans of two orthonormal bases.
pub fn principal_cosines(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let n = a[0].len();
    let qa = DMatrix::from_fn(n, a.len(), |i, j| a[j][i]);
    let qb = DMatrix::from_fn(n, b.len(), |i, j| b[j][i]);
    (qa.transpose() * qb)
        .singular_values()
        .iter()
        .copied()
        .collect()
}

/// `k` tasks, task `t` nonzero only on row block `t` and column block `t`.
pub fn block_diagonal_tasks(rng: &mut StdRng, k: usize, rb: usize, cb: usize) -> Vec<Matrix> {
    (0..k)
        .map(|t| {
            let mut m = Matrix::zeros(k * rb, k * cb);
            for i in 0..rb {
                for j in 0..cb {
                    m.set(t * rb + i, t * cb + j, rng.gen_range(-1.0..1.0));
                }
            }
            m
        })
        .collect()
}
