//! Checkpoint container I/O and task-update extraction.
//!
//! The on-disk layout is the one used by safetensors:
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! offsets being relative to the start of the payload. An optional
//! `__metadata__` entry holding string pairs is accepted and ignored. Only
//! `F32` tensors are supported.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::Value;

use crate::scaling::LayerRules;

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TensorStoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: tensor `{name}` needs bytes up to {needed}, payload has {available}")]
    Truncated {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("tensor `{name}` has unsupported dtype `{dtype}` (only F32 is supported)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("duplicate tensor name `{0}` in header")]
    DuplicateName(String),
    #[error("tensor name sets differ: {0}")]
    NameMismatch(String),
    #[error("shape mismatch for `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("no task updates supplied")]
    NoUpdates,
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorStoreError>;

/// A dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> std::result::Result<Self, String> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Widen a 2-D tensor into an `f64` matrix.
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        if !self.is_matrix() {
            return None;
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        Some(DMatrix::from_fn(rows, cols, |i, j| {
            f64::from(self.data[i * cols + j])
        }))
    }

    /// Collapse all leading axes so the tensor reads as `rows × last_dim`.
    pub fn to_row_matrix(&self) -> Option<DMatrix<f64>> {
        let cols = *self.shape.last()?;
        if cols == 0 {
            return None;
        }
        let rows = self.data.len() / cols;
        Some(DMatrix::from_fn(rows, cols, |i, j| {
            f64::from(self.data[i * cols + j])
        }))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)] as f32);
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Named tensors, kept in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, DenseTensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Option<DenseTensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape == b.shape
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl FromIterator<(String, DenseTensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, DenseTensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Header entries in file order, duplicates preserved so they can be reported.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parse a container from raw bytes.
pub fn decode_tensor_map(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(TensorStoreError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            TensorStoreError::MalformedHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| TensorStoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let RawHeader(raw) = serde_json::from_str(header_text.trim_end_matches(' '))
        .map_err(|e| TensorStoreError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut entries = BTreeMap::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| TensorStoreError::MalformedHeader(format!("entry `{name}`: {e}")))?;
        if info.dtype != "F32" {
            return Err(TensorStoreError::UnsupportedDtype {
                name,
                dtype: info.dtype,
            });
        }
        let [start, end] = info.data_offsets;
        let numel = info
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorStoreError::MalformedHeader(format!("entry `{name}`: shape overflows")))?;
        if end < start || end - start != numel * 4 {
            return Err(TensorStoreError::MalformedHeader(format!(
                "entry `{name}`: offsets [{start}, {end}] do not span {numel} f32 values"
            )));
        }
        if end > payload.len() {
            return Err(TensorStoreError::Truncated {
                name,
                needed: end,
                available: payload.len(),
            });
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = DenseTensor {
            shape: info.shape,
            data,
        };
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(TensorStoreError::DuplicateName(name));
        }
    }
    Ok(TensorMap { entries })
}

/// Serialize a map; tensors are laid out in name order so output bytes are deterministic.
pub fn encode_tensor_map(map: &TensorMap) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, tensor) in &map.entries {
        let len = tensor.data.len() * 4;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": tensor.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(HEADER_ALIGN) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in map.entries.values() {
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_tensor_map(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorStoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensor_map(&bytes)
}

pub fn save_tensor_map(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| TensorStoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&encode_tensor_map(map)).map_err(io_err)?;
    file.flush().map_err(io_err)
}

/// Per-expert parameter differences against the base checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskUpdate {
    pub matrix_layers: BTreeMap<String, DMatrix<f64>>,
    pub other_params: BTreeMap<String, DenseTensor>,
}

fn check_same_structure(base: &TensorMap, other: &TensorMap) -> Result<()> {
    let missing: Vec<&str> = base.names().filter(|n| !other.contains(n)).collect();
    let extra: Vec<&str> = other.names().filter(|n| !base.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(TensorStoreError::NameMismatch(format!(
            "missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, t) in base.iter() {
        let o = &other.entries[name];
        if t.shape != o.shape {
            return Err(TensorStoreError::ShapeMismatch {
                name: name.to_string(),
                left: t.shape.clone(),
                right: o.shape.clone(),
            });
        }
    }
    Ok(())
}

/// `expert − base` for every tensor, split into merge-able matrices and the rest.
pub fn compute_task_update(base: &TensorMap, expert: &TensorMap, rules: &LayerRules) -> Result<TaskUpdate> {
    check_same_structure(base, expert)?;
    let mut matrix_layers = BTreeMap::new();
    let mut other_params = BTreeMap::new();
    for (name, b) in base.iter() {
        let e = &expert.entries[name];
        if b.is_matrix() && rules.is_matrix_layer(name) {
            let (rows, cols) = (b.shape[0], b.shape[1]);
            let delta = DMatrix::from_fn(rows, cols, |i, j| {
                let k = i * cols + j;
                f64::from(e.data[k]) - f64::from(b.data[k])
            });
            matrix_layers.insert(name.to_string(), delta);
        } else {
            let data = b
                .data
                .iter()
                .zip(&e.data)
                .map(|(&bv, &ev)| (f64::from(ev) - f64::from(bv)) as f32)
                .collect();
            other_params.insert(
                name.to_string(),
                DenseTensor {
                    shape: b.shape.clone(),
                    data,
                },
            );
        }
    }
    Ok(TaskUpdate {
        matrix_layers,
        other_params,
    })
}

/// `base + delta`, leaving the base value untouched (bit for bit) where `delta == 0`.
pub(crate) fn add_delta(base: f32, delta: f64) -> f32 {
    if delta == 0.0 {
        base
    } else {
        (f64::from(base) + delta) as f32
    }
}

/// Base value plus the arithmetic mean of each task's non-matrix update.
pub fn average_non_matrix(base: &TensorMap, updates: &[TaskUpdate]) -> Result<BTreeMap<String, DenseTensor>> {
    let first = updates.first().ok_or(TensorStoreError::NoUpdates)?;
    for u in &updates[1..] {
        if u.other_params.len() != first.other_params.len()
            || u.other_params.keys().any(|k| !first.other_params.contains_key(k))
        {
            return Err(TensorStoreError::NameMismatch(
                "task updates carry different non-matrix parameter sets".into(),
            ));
        }
    }
    let t = updates.len() as f64;
    let mut out = BTreeMap::new();
    for name in first.other_params.keys() {
        let b = base.get(name).ok_or_else(|| {
            TensorStoreError::NameMismatch(format!("`{name}` absent from base checkpoint"))
        })?;
        let mut sum = vec![0.0f64; b.numel()];
        for u in updates {
            let d = &u.other_params[name];
            if d.shape != b.shape {
                return Err(TensorStoreError::ShapeMismatch {
                    name: name.clone(),
                    left: b.shape.clone(),
                    right: d.shape.clone(),
                });
            }
            for (acc, &v) in sum.iter_mut().zip(&d.data) {
                *acc += f64::from(v);
            }
        }
        let data = b
            .data
            .iter()
            .zip(&sum)
            .map(|(&bv, &s)| add_delta(bv, s / t))
            .collect();
        out.insert(
            name.clone(),
            DenseTensor {
                shape: b.shape.clone(),
                data,
            },
        );
    }
    Ok(out)
}
