//! Per-subspace overlap diagnostics of a merged task matrix.
//!
//! For a merged update with SVD `U·diag(σ)·Vᵀ`, task `i` responds in subspace
//! `r` with `a_i = (u^r)ᵀ·ΔW_i`. The projection coefficient
//! `s_i = <a_merge, a_i> / |a_i|²` measures how strongly the merged response
//! scales that task along its own direction; `s_i > 1` means over-counting.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, SpectralDecomposition};

/// A task is dropped from subspace `r` when `|a_i^r| <= RESPONSE_REL_TOL · max(1, |ΔW_i|_F)`.
pub const RESPONSE_REL_TOL: f64 = 1e-9;
/// Subspaces with `σ^r <= SIGMA_NOISE_FLOOR · σ^1` are flagged and never rescaled.
pub const SIGMA_NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub response_rel: f64,
    pub sigma_noise_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            response_rel: RESPONSE_REL_TOL,
            sigma_noise_floor: SIGMA_NOISE_FLOOR,
        }
    }
}

impl Tolerances {
    pub fn response_threshold(&self, delta_frobenius: f64) -> f64 {
        self.response_rel * delta_frobenius.max(1.0)
    }

    pub fn is_noise(&self, sigma: f64, sigma_max: f64) -> bool {
        sigma <= self.sigma_noise_floor * sigma_max
    }
}

/// Which singular vectors define the shared basis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `a_i^r = (u^r)ᵀ·ΔW_i`.
    #[default]
    ColumnSpace,
    /// `a_i^r = ΔW_i·v^r`.
    RowSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Task(usize),
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceResponse {
    /// 1-based subspace index.
    pub r: usize,
    pub source: Source,
    vector: Vec<f64>,
    norm_sq: f64,
}

impl SubspaceResponse {
    pub fn new(r: usize, source: Source, vector: Vec<f64>) -> Self {
        let norm_sq = dot(&vector, &vector);
        Self {
            r,
            source,
            vector,
            norm_sq,
        }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq.sqrt()
    }
}

fn check_unit(direction: &[f64]) -> Result<()> {
    let n = dot(direction, direction).sqrt();
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(())
}

/// `a = uᵀ·delta`, a weighted combination of the rows of `delta`.
pub fn subspace_response(
    r: usize,
    source: Source,
    u: &[f64],
    delta: &Matrix,
) -> Result<SubspaceResponse> {
    check_unit(u)?;
    Ok(SubspaceResponse::new(r, source, delta.left_apply(u)?))
}

/// `a = delta·v`, the row-space counterpart used by the ablation basis.
pub fn row_space_response(
    r: usize,
    source: Source,
    v: &[f64],
    delta: &Matrix,
) -> Result<SubspaceResponse> {
    check_unit(v)?;
    Ok(SubspaceResponse::new(r, source, delta.right_apply(v)?))
}

pub fn response_in(
    basis: Basis,
    decomp: &SpectralDecomposition,
    r: usize,
    source: Source,
    delta: &Matrix,
) -> Result<SubspaceResponse> {
    match basis {
        Basis::ColumnSpace => subspace_response(r + 1, source, decomp.u(r), delta),
        Basis::RowSpace => row_space_response(r + 1, source, decomp.v(r), delta),
    }
}

/// `s = <a_merge, a_i> / |a_i|²`; fails when `|a_i| <= threshold`.
pub fn projection_coefficient(
    a_merge: &SubspaceResponse,
    a_i: &SubspaceResponse,
    threshold: f64,
) -> Result<f64> {
    if a_merge.vector.len() != a_i.vector.len() {
        return Err(Error::LengthMismatch {
            expected: a_i.vector.len(),
            found: a_merge.vector.len(),
        });
    }
    if a_merge.r != a_i.r {
        return Err(Error::DimensionMismatch(format!(
            "responses from subspaces {} and {}",
            a_merge.r, a_i.r
        )));
    }
    if a_i.norm() <= threshold {
        return Err(Error::DegenerateResponse {
            norm: a_i.norm(),
            threshold,
        });
    }
    Ok(dot(&a_merge.vector, &a_i.vector) / a_i.norm_sq)
}

/// Closed form `(s - 1)²·|a_i|²` of `|Proj_{a_i}(a_merge) - a_i|²`.
pub fn interference_energy(s: f64, norm_sq: f64) -> f64 {
    let d = s - 1.0;
    d * d * norm_sq
}

/// Minimizer over `γ >= 0` of `|Proj_{a_i}(γ·a_merge) - a_i|²`.
pub fn optimal_scaling(s: f64) -> f64 {
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// Gram matrix `G[i][j] = <a_i^r, a_j^r>` of one subspace's task responses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossTermMatrix {
    pub r: usize,
    pub gram: Vec<Vec<f64>>,
}

pub fn cross_term_matrix(responses: &[SubspaceResponse]) -> Result<CrossTermMatrix> {
    let Some(first) = responses.first() else {
        return Err(Error::EmptyTaskList);
    };
    for a in responses {
        if a.vector.len() != first.vector.len() {
            return Err(Error::LengthMismatch {
                expected: first.vector.len(),
                found: a.vector.len(),
            });
        }
        if a.r != first.r {
            return Err(Error::DimensionMismatch(format!(
                "responses from subspaces {} and {}",
                first.r, a.r
            )));
        }
    }
    let k = responses.len();
    let mut gram = vec![vec![0.0; k]; k];
    for i in 0..k {
        gram[i][i] = responses[i].norm_sq;
        for j in i + 1..k {
            let g = dot(&responses[i].vector, &responses[j].vector);
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    Ok(CrossTermMatrix { r: first.r, gram })
}

/// Task responses and retained coefficients for one subspace.
#[derive(Debug, Clone)]
pub(crate) struct SubspaceCoefficients {
    pub responses: Vec<SubspaceResponse>,
    /// `None` for tasks whose response falls under the degeneracy threshold.
    pub s: Vec<Option<f64>>,
}

pub(crate) fn coefficients(
    basis: Basis,
    decomp: &SpectralDecomposition,
    r: usize,
    deltas: &[Matrix],
    thresholds: &[f64],
    merged_response: &SubspaceResponse,
) -> Result<SubspaceCoefficients> {
    let mut responses = Vec::with_capacity(deltas.len());
    let mut s = Vec::with_capacity(deltas.len());
    for (i, (delta, &threshold)) in deltas.iter().zip(thresholds).enumerate() {
        let a = response_in(basis, decomp, r, Source::Task(i), delta)?;
        s.push(
            match projection_coefficient(merged_response, &a, threshold) {
                Ok(v) => Some(v),
                Err(Error::DegenerateResponse { .. }) => None,
                Err(e) => return Err(e),
            },
        );
        responses.push(a);
    }
    Ok(SubspaceCoefficients { responses, s })
}

pub(crate) fn check_task_shapes(deltas: &[Matrix], rows: usize, cols: usize) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::EmptyTaskList);
    }
    for (i, d) in deltas.iter().enumerate() {
        if d.shape() != (rows, cols) {
            return Err(Error::DimensionMismatch(format!(
                "task {i} is {}x{}, merged update is {rows}x{cols}",
                d.rows(),
                d.cols()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalysisOptions {
    pub basis: Basis,
    /// Floor used for the calibration factor reported alongside the gap.
    pub alpha: f64,
    pub tolerances: Tolerances,
}

impl AnalysisOptions {
    pub fn new(alpha: f64) -> Self {
        Self {
            basis: Basis::ColumnSpace,
            alpha,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubspaceEntry {
    /// 1-based subspace index.
    pub r: usize,
    pub sigma: f64,
    pub s: Vec<Option<f64>>,
    pub gamma_opt: Vec<Option<f64>>,
    pub sigma_star: f64,
    pub gap: f64,
    pub interference: Vec<Option<f64>>,
    pub retained: Vec<bool>,
    pub below_noise_floor: bool,
    /// Aggregate calibration factor for this subspace.
    pub gamma: f64,
}

impl SubspaceEntry {
    pub fn retained_s(&self) -> impl Iterator<Item = f64> + '_ {
        self.s.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubspaceOverlapReport {
    pub basis: Basis,
    pub tasks: usize,
    pub subspaces: Vec<SubspaceEntry>,
    pub cross_terms: Vec<CrossTermMatrix>,
}

/// Singular-value gap `σ^r - σ*^r`, where `σ*^r` is `σ^r` times the mean of the
/// retained task-wise optimal scalings.
pub fn gap_report(
    decomp: &SpectralDecomposition,
    deltas: &[Matrix],
    opts: &AnalysisOptions,
) -> Result<SubspaceOverlapReport> {
    check_task_shapes(deltas, decomp.rows(), decomp.cols())?;
    let tol = opts.tolerances;
    let thresholds: Vec<f64> = deltas
        .iter()
        .map(|d| tol.response_threshold(d.frobenius_norm()))
        .collect();
    let sigma_max = decomp.sigma().first().copied().unwrap_or(0.0);

    let mut subspaces = Vec::with_capacity(decomp.rank());
    let mut cross_terms = Vec::with_capacity(decomp.rank());
    for r in 0..decomp.rank() {
        let sigma = decomp.sigma()[r];
        // a_merge^r = σ^r·(v^r)ᵀ in the column basis, σ^r·u^r in the row basis.
        let direction = match opts.basis {
            Basis::ColumnSpace => decomp.v(r),
            Basis::RowSpace => decomp.u(r),
        };
        let merged = SubspaceResponse::new(
            r + 1,
            Source::Merged,
            direction.iter().map(|x| sigma * x).collect(),
        );
        let coeffs = coefficients(opts.basis, decomp, r, deltas, &thresholds, &merged)?;

        let gamma_opt: Vec<Option<f64>> = coeffs.s.iter().map(|s| s.map(optimal_scaling)).collect();
        let interference = coeffs
            .s
            .iter()
            .zip(&coeffs.responses)
            .map(|(s, a)| s.map(|s| interference_energy(s, a.norm_sq())))
            .collect();
        let retained: Vec<bool> = coeffs.s.iter().map(Option::is_some).collect();
        let kept: Vec<f64> = gamma_opt.iter().flatten().copied().collect();
        let sigma_star = if kept.is_empty() {
            sigma
        } else {
            sigma * kept.iter().sum::<f64>() / kept.len() as f64
        };
        let below_noise_floor = tol.is_noise(sigma, sigma_max);
        let retained_s: Vec<f64> = coeffs.s.iter().flatten().copied().collect();
        let gamma = if below_noise_floor || retained_s.is_empty() {
            1.0
        } else {
            crate::svc::calibration_factor(&retained_s, opts.alpha)?
        };

        cross_terms.push(cross_term_matrix(&coeffs.responses)?);
        subspaces.push(SubspaceEntry {
            r: r + 1,
            sigma,
            s: coeffs.s,
            gamma_opt,
            sigma_star,
            gap: sigma - sigma_star,
            interference,
            retained,
            below_noise_floor,
            gamma,
        });
    }
    Ok(SubspaceOverlapReport {
        basis: opts.basis,
        tasks: deltas.len(),
        subspaces,
        cross_terms,
    })
}
