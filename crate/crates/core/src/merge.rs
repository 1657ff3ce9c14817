//! Training-free base merges of task deltas, and final weight assembly.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{DeltaStore, DeltaTensor, Tensor, TensorData, TensorStore};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::KeyedStream;

pub const DEFAULT_TIES_TRIM: f64 = 0.2;
pub const DEFAULT_DARE_DROP: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DareBase {
    Sum,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeMethod {
    /// Task arithmetic: plain sum of task deltas.
    Sum,
    Average,
    Ties {
        trim_fraction: f64,
    },
    Dare {
        drop_rate: f64,
        base: DareBase,
        seed: u64,
    },
}

impl MergeMethod {
    pub fn ties() -> Self {
        MergeMethod::Ties {
            trim_fraction: DEFAULT_TIES_TRIM,
        }
    }

    pub fn dare(seed: u64) -> Self {
        MergeMethod::Dare {
            drop_rate: DEFAULT_DARE_DROP,
            base: DareBase::Sum,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MergeMethod::Ties { trim_fraction } => check_trim(trim_fraction),
            MergeMethod::Dare { drop_rate, .. } => check_drop(drop_rate),
            _ => Ok(()),
        }
    }
}

fn check_trim(trim: f64) -> Result<()> {
    if trim > 0.0 && trim <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTrimFraction(trim))
    }
}

fn check_drop(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidDropRate(rate))
    }
}

fn check_lengths(deltas: &[&[f64]]) -> Result<usize> {
    let first = deltas.first().ok_or(Error::EmptyTaskList)?;
    for d in &deltas[1..] {
        if d.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                found: d.len(),
            });
        }
    }
    Ok(first.len())
}

/// Entries where every task holds the same value, as `Some(value)`.
fn shared_value(deltas: &[&[f64]], j: usize) -> Option<f64> {
    let x = deltas[0][j];
    deltas[1..]
        .iter()
        .all(|d| d[j].to_bits() == x.to_bits())
        .then_some(x)
}

// Repeated addition and sum-then-divide both round; identical task values
// are special-cased so clones merge to exactly `K·x` and `x`.
fn sum_kernel(deltas: &[&[f64]]) -> Result<Vec<f64>> {
    let n = check_lengths(deltas)?;
    let k = deltas.len() as f64;
    Ok((0..n)
        .map(|j| match shared_value(deltas, j) {
            Some(x) => k * x,
            None => deltas.iter().map(|d| d[j]).sum(),
        })
        .collect())
}

fn average_kernel(deltas: &[&[f64]]) -> Result<Vec<f64>> {
    let n = check_lengths(deltas)?;
    let k = deltas.len() as f64;
    Ok((0..n)
        .map(|j| match shared_value(deltas, j) {
            Some(x) => x,
            None => deltas.iter().map(|d| d[j]).sum::<f64>() / k,
        })
        .collect())
}

/// Keeps the entries whose magnitude reaches the `ceil(trim·n)`-th largest
/// magnitude (ties at the threshold are all kept); everything else is zeroed.
fn trim_top_magnitude(values: &[f64], trim: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    // The small offset keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up.
    let keep = ((trim * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut mags: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    let (_, &mut threshold, _) = mags.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
    values
        .iter()
        .map(|&x| {
            if x != 0.0 && x.abs() >= threshold {
                x
            } else {
                0.0
            }
        })
        .collect()
}

fn ties_kernel(deltas: &[&[f64]], trim: f64) -> Result<Vec<f64>> {
    check_trim(trim)?;
    let n = check_lengths(deltas)?;
    let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| trim_top_magnitude(d, trim)).collect();
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[j]).sum();
        if total == 0.0 {
            continue;
        }
        let elected = total.signum();
        let (sum, count) = trimmed
            .iter()
            .map(|t| t[j])
            .filter(|&x| x != 0.0 && x.signum() == elected)
            .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if count > 0 {
            *o = sum / count as f64;
        }
    }
    Ok(out)
}

fn dare_kernel(
    deltas: &[&[f64]],
    task_ids: &[u64],
    parameter: &str,
    drop_rate: f64,
    base: DareBase,
    seed: u64,
) -> Result<Vec<f64>> {
    check_drop(drop_rate)?;
    check_lengths(deltas)?;
    if task_ids.len() != deltas.len() {
        return Err(Error::LengthMismatch {
            expected: deltas.len(),
            found: task_ids.len(),
        });
    }
    let rescale = 1.0 / (1.0 - drop_rate);
    let masked: Vec<Vec<f64>> = deltas
        .iter()
        .zip(task_ids)
        .map(|(d, &id)| {
            let stream = KeyedStream::new(seed, parameter, id);
            d.iter()
                .enumerate()
                .map(|(j, &x)| {
                    if stream.uniform_at(j as u64) < drop_rate {
                        0.0
                    } else {
                        x * rescale
                    }
                })
                .collect()
        })
        .collect();
    let views: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
    match base {
        DareBase::Sum => sum_kernel(&views),
        DareBase::Average => average_kernel(&views),
    }
}

/// Applies `method` elementwise to equal-length task buffers.
///
/// DARE draws are keyed by `(seed, parameter, task_ids[i])`.
pub fn merge_values(
    deltas: &[&[f64]],
    task_ids: &[u64],
    parameter: &str,
    method: &MergeMethod,
) -> Result<Vec<f64>> {
    match *method {
        MergeMethod::Sum => sum_kernel(deltas),
        MergeMethod::Average => average_kernel(deltas),
        MergeMethod::Ties { trim_fraction } => ties_kernel(deltas, trim_fraction),
        MergeMethod::Dare {
            drop_rate,
            base,
            seed,
        } => dare_kernel(deltas, task_ids, parameter, drop_rate, base, seed),
    }
}

fn matrix_views(deltas: &[Matrix]) -> Result<Vec<&[f64]>> {
    let first = deltas.first().ok_or(Error::EmptyTaskList)?;
    for d in &deltas[1..] {
        if d.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                name: String::new(),
                expected: vec![first.rows(), first.cols()],
                found: vec![d.rows(), d.cols()],
            });
        }
    }
    Ok(deltas.iter().map(Matrix::as_slice).collect())
}

fn like(template: &Matrix, values: Vec<f64>) -> Matrix {
    Matrix::new(template.rows(), template.cols(), values).expect("same shape")
}

pub fn merge_sum(deltas: &[Matrix]) -> Result<Matrix> {
    let views = matrix_views(deltas)?;
    Ok(like(&deltas[0], sum_kernel(&views)?))
}

pub fn merge_average(deltas: &[Matrix]) -> Result<Matrix> {
    let views = matrix_views(deltas)?;
    Ok(like(&deltas[0], average_kernel(&views)?))
}

pub fn merge_ties(deltas: &[Matrix], trim_fraction: f64) -> Result<Matrix> {
    check_trim(trim_fraction)?;
    let views = matrix_views(deltas)?;
    Ok(like(&deltas[0], ties_kernel(&views, trim_fraction)?))
}

/// DARE over positional task ids and an anonymous parameter key.
pub fn merge_dare(deltas: &[Matrix], drop_rate: f64, base: DareBase, seed: u64) -> Result<Matrix> {
    let ids: Vec<u64> = (0..deltas.len() as u64).collect();
    merge_dare_keyed(deltas, &ids, "", drop_rate, base, seed)
}

pub fn merge_dare_keyed(
    deltas: &[Matrix],
    task_ids: &[u64],
    parameter: &str,
    drop_rate: f64,
    base: DareBase,
    seed: u64,
) -> Result<Matrix> {
    check_drop(drop_rate)?;
    let views = matrix_views(deltas)?;
    let values = dare_kernel(&views, task_ids, parameter, drop_rate, base, seed)?;
    Ok(like(&deltas[0], values))
}

/// Merged task update for every parameter, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    entries: BTreeMap<String, DeltaTensor>,
    method: MergeMethod,
    tasks: usize,
}

impl MergedDelta {
    pub fn new(
        entries: BTreeMap<String, DeltaTensor>,
        method: MergeMethod,
        tasks: usize,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::EmptyTaskList);
        }
        if let Some((name, _)) = entries
            .iter()
            .find(|(_, t)| t.values().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFiniteValue(name.clone()));
        }
        Ok(Self {
            entries,
            method,
            tasks,
        })
    }

    pub fn method(&self) -> &MergeMethod {
        &self.method
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, name: &str) -> Option<&DeltaTensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DeltaTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn replace_entries(&self, entries: BTreeMap<String, DeltaTensor>) -> Self {
        Self {
            entries,
            method: self.method,
            tasks: self.tasks,
        }
    }
}

/// Checks that every store holds the same parameters with the same shapes.
pub fn check_consistent(deltas: &[DeltaStore]) -> Result<()> {
    let first = deltas.first().ok_or(Error::EmptyTaskList)?;
    for (i, other) in deltas.iter().enumerate().skip(1) {
        if other.len() != first.len() || other.names().any(|n| first.get(n).is_none()) {
            return Err(Error::ParameterSetMismatch(format!(
                "task {i} does not share task 0's parameter set"
            )));
        }
        for (name, t) in first.iter() {
            let o = other.get(name).expect("checked above");
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// Merges every parameter with positional task ids.
pub fn merge_store(deltas: &[DeltaStore], method: &MergeMethod) -> Result<MergedDelta> {
    let ids: Vec<u64> = (0..deltas.len() as u64).collect();
    merge_store_keyed(deltas, &ids, method)
}

pub fn merge_store_keyed(
    deltas: &[DeltaStore],
    task_ids: &[u64],
    method: &MergeMethod,
) -> Result<MergedDelta> {
    method.validate()?;
    check_consistent(deltas)?;
    let names: Vec<&str> = deltas[0].names().collect();
    let entries = names
        .par_iter()
        .map(|&name| {
            let views: Vec<&[f64]> = deltas
                .iter()
                .map(|d| d.get(name).unwrap().values())
                .collect();
            let values =
                merge_values(&views, task_ids, name, method).map_err(|e| e.in_parameter(name))?;
            let tensor = deltas[0].get(name).unwrap().with_values(values)?;
            Ok((name.to_string(), tensor))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    MergedDelta::new(entries, *method, deltas.len())
}

/// `W_pre + lambda·delta` per parameter, written back in the pre-trained dtype.
pub fn assemble_weights(
    pretrained: &TensorStore,
    delta: &MergedDelta,
    lambda: f64,
) -> Result<TensorStore> {
    if !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "lambda {lambda} is not finite"
        )));
    }
    if let Some(extra) = delta.entries.keys().find(|n| pretrained.get(n).is_none()) {
        return Err(Error::ParameterSetMismatch(format!(
            "merged delta has `{extra}` which the pre-trained checkpoint lacks"
        )));
    }
    let mut out = TensorStore::new();
    out.set_metadata(pretrained.metadata().cloned());
    for (name, pre) in pretrained.iter() {
        let d = delta.get(name).ok_or_else(|| {
            Error::ParameterSetMismatch(format!("merged delta is missing `{name}`"))
        })?;
        if d.shape() != pre.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: pre.shape().to_vec(),
                found: d.shape().to_vec(),
            });
        }
        let values: Vec<f64> = pre
            .to_f64()
            .iter()
            .zip(d.values())
            .map(|(w, x)| w + lambda * x)
            .collect();
        let data = TensorData::from_f64(pre.dtype(), &values);
        out.insert(name, Tensor::new(pre.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
