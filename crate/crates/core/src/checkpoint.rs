//! Checkpoint container I/O and task-delta extraction.
//!
//! On-disk layout (little-endian throughout):
//!
//! ```text
//! [u64 header length N][N bytes of UTF-8 JSON header][tensor payloads]
//! ```
//!
//! The header maps each tensor name to
//! `{"data_offsets":[begin,end],"dtype":"F32"|"F64","shape":[..]}`, with
//! offsets relative to the first payload byte. An optional `__metadata__`
//! object of string pairs is carried through unchanged. Writers emit keys in
//! lexicographic order and lay payloads out in that same order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Values widened to `f64` (exact for both dtypes).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Narrows `values` into `dtype`; `f64 -> f32` rounds to nearest-even.
    pub fn from_f64(dtype: DType, values: &[f64]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(values.to_vec()),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, raw: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = element_count(&shape).ok_or_else(|| Error::ShapeDataMismatch {
            name: String::new(),
            reason: format!("shape {shape:?} overflows"),
        })?;
        if expected != data.len() {
            return Err(Error::ShapeDataMismatch {
                name: String::new(),
                reason: format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.to_f64()
    }
}

/// A checkpoint in memory: named tensors in header order plus optional metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: IndexMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::InvalidConfig(format!(
                "`{METADATA_KEY}` is reserved and cannot name a tensor"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate tensor `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {n} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Value = serde_json::from_str(header)
            .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::MalformedHeader("header is not a JSON object".into()));
        };
        let payload = &bytes[header_end..];

        let mut store = TensorStore::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::with_capacity(header.len());
        for (name, entry) in header {
            if name == METADATA_KEY {
                store.metadata = Some(parse_metadata(entry)?);
                continue;
            }
            let (dtype, shape, begin, end) = parse_entry(&name, &entry)?;
            let mismatch = |reason: String| Error::ShapeDataMismatch {
                name: name.clone(),
                reason,
            };
            let count = element_count(&shape)
                .ok_or_else(|| mismatch(format!("shape {shape:?} overflows")))?;
            let nbytes = count
                .checked_mul(dtype.size())
                .ok_or_else(|| mismatch(format!("shape {shape:?} overflows")))?;
            if end < begin || end > payload.len() {
                return Err(mismatch(format!(
                    "offsets [{begin}, {end}] outside payload of {} bytes",
                    payload.len()
                )));
            }
            if end - begin != nbytes {
                return Err(mismatch(format!(
                    "offsets span {} bytes but shape {shape:?} x {} needs {nbytes}",
                    end - begin,
                    dtype.as_str()
                )));
            }
            let data = TensorData::read_le(dtype, &payload[begin..end]);
            spans.push((begin, end, name.clone()));
            store.insert(name, Tensor { shape, data })?;
        }

        spans.sort();
        let mut cursor = 0usize;
        for (begin, end, name) in &spans {
            if *begin != cursor {
                return Err(Error::ShapeDataMismatch {
                    name: name.clone(),
                    reason: format!(
                        "payload starts at {begin}, expected {cursor} (gap or overlap)"
                    ),
                });
            }
            cursor = *end;
        }
        if cursor != payload.len() {
            return Err(Error::ShapeDataMismatch {
                name: String::new(),
                reason: format!(
                    "{} trailing payload bytes not covered by any tensor",
                    payload.len() - cursor
                ),
            });
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Entry<'a> {
            data_offsets: [usize; 2],
            dtype: &'a str,
            shape: &'a [usize],
        }

        let mut names: Vec<&String> = self.entries.keys().collect();
        names.sort();

        let mut header: BTreeMap<&str, Value> = BTreeMap::new();
        let mut payload = Vec::new();
        for name in names {
            let tensor = &self.entries[name];
            let begin = payload.len();
            tensor.data.write_le(&mut payload);
            let entry = Entry {
                data_offsets: [begin, payload.len()],
                dtype: tensor.dtype().as_str(),
                shape: &tensor.shape,
            };
            header.insert(name, serde_json::to_value(entry).expect("header entry"));
        }
        if let Some(meta) = &self.metadata {
            header.insert(METADATA_KEY, serde_json::to_value(meta).expect("metadata"));
        }
        let header = serde_json::to_vec(&header).expect("header");

        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = entry else {
        return Err(Error::MalformedHeader(format!(
            "`{METADATA_KEY}` is not an object"
        )));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::MalformedHeader(format!(
                "`{METADATA_KEY}` value for `{k}` is not a string"
            ))),
        })
        .collect()
}

fn parse_entry(name: &str, entry: &Value) -> Result<(DType, Vec<usize>, usize, usize)> {
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor `{name}`: {what}"));
    let obj = entry
        .as_object()
        .ok_or_else(|| malformed("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string `dtype`"))?;
    let dtype = DType::parse(dtype).ok_or_else(|| Error::UnsupportedDtype {
        name: name.to_string(),
        dtype: dtype.to_string(),
    })?;
    let as_usizes = |key: &str| -> Result<Vec<usize>> {
        obj.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&format!("missing array `{key}`")))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|x| usize::try_from(x).ok())
                    .ok_or_else(|| malformed(&format!("`{key}` holds a non-integer")))
            })
            .collect()
    };
    let shape = as_usizes("shape")?;
    let offsets = as_usizes("data_offsets")?;
    let [begin, end] = offsets[..] else {
        return Err(malformed("`data_offsets` must have two entries"));
    };
    Ok((dtype, shape, begin, end))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorStore::from_bytes(&bytes)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so a failed write never leaves a partial file behind.
pub fn write_checkpoint(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &store.to_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// A dense `f64` parameter of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DeltaTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        match element_count(&shape) {
            Some(n) if n == values.len() => Ok(Self { shape, values }),
            _ => Err(Error::ShapeDataMismatch {
                name: String::new(),
                reason: format!("shape {shape:?} does not hold {} values", values.len()),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Mode-0 unfolding `(shape[0], Π shape[1..])`; `None` below rank 2.
    pub fn unfold(&self) -> Option<Matrix> {
        if self.shape.len() < 2 {
            return None;
        }
        let rows = self.shape[0];
        let cols = self.shape[1..].iter().product();
        Some(Matrix::new(rows, cols, self.values.clone()).expect("consistent unfolding"))
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), values)
    }
}

/// Per-parameter task update `W_i - W_pre` in `f64`, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaStore {
    entries: BTreeMap<String, DeltaTensor>,
}

impl DeltaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DeltaTensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&DeltaTensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DeltaTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<(String, DeltaTensor)> for DeltaStore {
    fn from_iter<T: IntoIterator<Item = (String, DeltaTensor)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

pub fn compute_deltas(pretrained: &TensorStore, finetuned: &TensorStore) -> Result<DeltaStore> {
    if let Some(extra) = finetuned.names().find(|n| pretrained.get(n).is_none()) {
        return Err(Error::ParameterSetMismatch(format!(
            "`{extra}` is in the fine-tuned checkpoint but not the pre-trained one"
        )));
    }
    if let Some(missing) = pretrained.names().find(|n| finetuned.get(n).is_none()) {
        return Err(Error::ParameterSetMismatch(format!(
            "`{missing}` is missing from the fine-tuned checkpoint"
        )));
    }
    pretrained
        .iter()
        .map(|(name, pre)| {
            let ft = &finetuned.entries[name];
            if ft.shape() != pre.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: pre.shape().to_vec(),
                    found: ft.shape().to_vec(),
                });
            }
            let values: Vec<f64> = ft
                .to_f64()
                .iter()
                .zip(pre.to_f64())
                .map(|(w, p)| w - p)
                .collect();
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(name.to_string()));
            }
            Ok((
                name.to_string(),
                DeltaTensor::new(pre.shape().to_vec(), values)?,
            ))
        })
        .collect()
}
