//! Singular value calibration of merged task updates.
//!
//! The merged update keeps its singular vectors; each singular value is
//! rescaled by `γ^r = K_r / Σ_i max(α, s_i^r)`, the harmonic mean of the
//! clipped task-wise optimal scalings over the `K_r` tasks with a usable
//! response in that subspace.

use std::collections::BTreeMap;

use glob::Pattern;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{DeltaStore, DeltaTensor};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, reconstruct, svd, Matrix};
use crate::merge::{check_consistent, MergedDelta};
use crate::spectral::{self, Basis, Source, Tolerances};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Harmonic aggregation over all retained tasks.
    #[default]
    Aggregate,
    /// `γ^r = 1 / max(α, s_target^r)`, favouring a single task.
    Preference { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub mode: CalibrationMode,
    pub basis: Basis,
    pub tolerances: Tolerances,
}

impl CalibrationConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            mode: CalibrationMode::Aggregate,
            basis: Basis::ColumnSpace,
            tolerances: Tolerances::default(),
        }
    }

    /// Default floor `α = 1/K`.
    pub fn for_tasks(tasks: usize) -> Self {
        Self::new(1.0 / tasks.max(1) as f64)
    }

    pub fn with_mode(mut self, mode: CalibrationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_basis(mut self, basis: Basis) -> Self {
        self.basis = basis;
        self
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        check_alpha(self.alpha)?;
        if let CalibrationMode::Preference { target } = self.mode {
            if target >= tasks {
                return Err(Error::InvalidTargetTask { target, tasks });
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// `len(s) / Σ max(alpha, s_i)`.
pub fn calibration_factor(s: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if s.is_empty() {
        return Err(Error::EmptyTaskList);
    }
    let total: f64 = s.iter().map(|&x| x.max(alpha)).sum();
    Ok(s.len() as f64 / total)
}

fn subspace_gamma(s: &[Option<f64>], cfg: &CalibrationConfig) -> Result<f64> {
    match cfg.mode {
        CalibrationMode::Aggregate => {
            let kept: Vec<f64> = s.iter().flatten().copied().collect();
            if kept.is_empty() {
                Ok(1.0)
            } else {
                calibration_factor(&kept, cfg.alpha)
            }
        }
        CalibrationMode::Preference { target } => Ok(match s[target] {
            Some(st) => 1.0 / st.max(cfg.alpha),
            None => 1.0,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
    /// Tasks with a usable response per subspace (0 for noise-floor subspaces).
    pub retained: Vec<usize>,
    /// Set when the merged update was identically zero.
    pub degenerate: bool,
    #[serde(skip)]
    pub calibrated: Matrix,
}

pub fn calibrate_matrix(
    deltas: &[Matrix],
    merged: &Matrix,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    spectral::check_task_shapes(deltas, merged.rows(), merged.cols())?;
    cfg.validate(deltas.len())?;
    let rank = merged.rows().min(merged.cols());

    if merged.as_slice().iter().all(|&x| x == 0.0) {
        return Ok(CalibrationResult {
            sigma: vec![0.0; rank],
            gamma: vec![1.0; rank],
            sigma_tilde: vec![0.0; rank],
            retained: vec![0; rank],
            degenerate: true,
            calibrated: merged.clone(),
        });
    }

    let decomp = svd(merged)?;
    let tol = cfg.tolerances;
    let thresholds: Vec<f64> = deltas
        .iter()
        .map(|d| tol.response_threshold(d.frobenius_norm()))
        .collect();
    let sigma_max = decomp.sigma()[0];

    let mut gamma = Vec::with_capacity(rank);
    let mut retained = Vec::with_capacity(rank);
    for (r, &sigma) in decomp.sigma().iter().enumerate() {
        if tol.is_noise(sigma, sigma_max) {
            gamma.push(1.0);
            retained.push(0);
            continue;
        }
        let a_merge = spectral::response_in(cfg.basis, &decomp, r, Source::Merged, merged)?;
        let coeffs = spectral::coefficients(cfg.basis, &decomp, r, deltas, &thresholds, &a_merge)?;
        retained.push(coeffs.s.iter().flatten().count());
        gamma.push(subspace_gamma(&coeffs.s, cfg)?);
    }

    let sigma = decomp.sigma().to_vec();
    let sigma_tilde: Vec<f64> = sigma.iter().zip(&gamma).map(|(s, g)| g * s).collect();
    let calibrated = reconstruct(&decomp, &sigma_tilde)?;
    Ok(CalibrationResult {
        sigma,
        gamma,
        sigma_tilde,
        retained,
        degenerate: false,
        calibrated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorCalibration {
    pub gamma: f64,
    pub s: Vec<Option<f64>>,
    #[serde(skip)]
    pub calibrated: Vec<f64>,
}

/// Scale-only calibration of a 1D merged update against its task vectors.
pub fn calibrate_vector_detailed(
    task_vectors: &[&[f64]],
    merged: &[f64],
    cfg: &CalibrationConfig,
) -> Result<VectorCalibration> {
    if task_vectors.is_empty() {
        return Err(Error::EmptyTaskList);
    }
    cfg.validate(task_vectors.len())?;
    for t in task_vectors {
        if t.len() != merged.len() {
            return Err(Error::LengthMismatch {
                expected: merged.len(),
                found: t.len(),
            });
        }
    }
    let s: Vec<Option<f64>> = task_vectors
        .iter()
        .map(|t| {
            let n = norm(t);
            (n > cfg.tolerances.response_threshold(n)).then(|| dot(merged, t) / (n * n))
        })
        .collect();
    let gamma = subspace_gamma(&s, cfg)?;
    Ok(VectorCalibration {
        gamma,
        s,
        calibrated: merged.iter().map(|x| gamma * x).collect(),
    })
}

pub fn calibrate_vector(
    task_vectors: &[&[f64]],
    merged: &[f64],
    cfg: &CalibrationConfig,
) -> Result<Vec<f64>> {
    Ok(calibrate_vector_detailed(task_vectors, merged, cfg)?.calibrated)
}

/// Include/exclude glob selection of parameter names.
///
/// A name is selected when it matches some include pattern (or no include
/// patterns were given) and matches no exclude pattern.
#[derive(Debug, Clone, Default)]
pub struct ParamFilter {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl ParamFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self> {
        let compile = |pats: &[S]| -> Result<Vec<Pattern>> {
            pats.iter()
                .map(|p| {
                    Pattern::new(p.as_ref()).map_err(|e| Error::InvalidPattern {
                        pattern: p.as_ref().to_string(),
                        reason: e.msg.to_string(),
                    })
                })
                .collect()
        };
        Ok(Self {
            include: compile(include)?,
            exclude: compile(exclude)?,
        })
    }

    pub fn selects(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| p.matches(name)))
            && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PassReason {
    Excluded,
    Scalar,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamOutcome {
    Matrix {
        rows: usize,
        cols: usize,
        #[serde(flatten)]
        result: CalibrationResult,
    },
    Vector(VectorCalibration),
    PassThrough {
        reason: PassReason,
    },
}

#[derive(Debug, Clone)]
pub struct StoreCalibration {
    pub merged: MergedDelta,
    pub outcomes: BTreeMap<String, ParamOutcome>,
}

fn calibrate_param(
    tasks: &[&DeltaTensor],
    merged: &DeltaTensor,
    cfg: &CalibrationConfig,
) -> Result<(DeltaTensor, ParamOutcome)> {
    if merged.values().is_empty() {
        let reason = PassReason::Empty;
        return Ok((merged.clone(), ParamOutcome::PassThrough { reason }));
    }
    match merged.ndim() {
        0 => Ok((
            merged.clone(),
            ParamOutcome::PassThrough {
                reason: PassReason::Scalar,
            },
        )),
        1 => {
            let views: Vec<&[f64]> = tasks.iter().map(|t| t.values()).collect();
            let out = calibrate_vector_detailed(&views, merged.values(), cfg)?;
            let tensor = merged.with_values(out.calibrated.clone())?;
            Ok((tensor, ParamOutcome::Vector(out)))
        }
        _ => {
            let task_mats: Vec<Matrix> = tasks
                .iter()
                .map(|t| t.unfold().expect("rank >= 2"))
                .collect();
            let merged_mat = merged.unfold().expect("rank >= 2");
            let (rows, cols) = merged_mat.shape();
            let mut result = calibrate_matrix(&task_mats, &merged_mat, cfg)?;
            let values = std::mem::replace(&mut result.calibrated, Matrix::zeros(0, 0)).into_vec();
            let tensor = merged.with_values(values)?;
            Ok((tensor, ParamOutcome::Matrix { rows, cols, result }))
        }
    }
}

/// Layer-wise calibration of every selected parameter.
///
/// Rank >= 2 parameters are unfolded to `(shape[0], Π shape[1..])`, rank-1
/// ones use the vector rule, scalars and excluded names pass through.
pub fn calibrate_store_detailed(
    deltas: &[DeltaStore],
    merged: &MergedDelta,
    cfg: &CalibrationConfig,
    filter: &ParamFilter,
) -> Result<StoreCalibration> {
    check_consistent(deltas)?;
    cfg.validate(deltas.len())?;
    for (name, t) in merged.iter() {
        let d = deltas[0].get(name).ok_or_else(|| {
            Error::ParameterSetMismatch(format!("merged update has `{name}` which the tasks lack"))
        })?;
        if d.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: d.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    if merged.len() != deltas[0].len() {
        return Err(Error::ParameterSetMismatch(
            "merged update does not cover every task parameter".into(),
        ));
    }

    let names: Vec<&str> = merged.iter().map(|(n, _)| n).collect();
    let results = names
        .par_iter()
        .map(|&name| {
            let m = merged.get(name).unwrap();
            if !filter.selects(name) {
                let reason = PassReason::Excluded;
                return Ok((
                    name.to_string(),
                    (m.clone(), ParamOutcome::PassThrough { reason }),
                ));
            }
            let tasks: Vec<&DeltaTensor> = deltas.iter().map(|d| d.get(name).unwrap()).collect();
            calibrate_param(&tasks, m, cfg)
                .map(|out| (name.to_string(), out))
                .map_err(|e| e.in_parameter(name))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = BTreeMap::new();
    let mut outcomes = BTreeMap::new();
    for (name, (tensor, outcome)) in results {
        entries.insert(name.clone(), tensor);
        outcomes.insert(name, outcome);
    }
    Ok(StoreCalibration {
        merged: merged.replace_entries(entries),
        outcomes,
    })
}

pub fn calibrate_store(
    deltas: &[DeltaStore],
    merged: &MergedDelta,
    cfg: &CalibrationConfig,
    filter: &ParamFilter,
) -> Result<MergedDelta> {
    Ok(calibrate_store_detailed(deltas, merged, cfg, filter)?.merged)
}
