//! Named-tensor checkpoints.
//!
//! Layout on disk:
//!
//! ```text
//! [u64 LE header length][canonical JSON header, space padded to 8 bytes][f32 LE payload]
//! ```
//!
//! The header follows the common header-prefixed tensor container shape:
//! one entry per tensor (`dtype`, `shape`, `data_offsets` relative to the
//! payload start) plus a `__metadata__` string map that carries
//! `format_version`. Tensors are laid out contiguously in lexicographic name
//! order, and a file is only accepted if its header is byte-for-byte the
//! canonical encoding, which makes `write(read(f)) == f` hold for every
//! accepted file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_TAG: &str = "F32";
const METADATA_KEY: &str = "__metadata__";
const VERSION_KEY: &str = "format_version";
const HEADER_ALIGN: usize = 8;
/// Refuse absurd header lengths before allocating.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header is not in canonical form")]
    NonCanonicalHeader,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(String),
    #[error("tensor `{name}`: unsupported dtype `{dtype}` (only {DTYPE_TAG})")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: {reason}")]
    BadShape { name: String, reason: String },
    #[error("tensor `{name}`: data offsets [{begin}, {end}) overlap or leave a gap (expected start {expected})")]
    OffsetLayout {
        name: String,
        begin: u64,
        end: u64,
        expected: u64,
    },
    #[error("tensor `{name}`: file truncated, needs payload bytes up to {needed} but only {available} present")]
    Truncated {
        name: String,
        needed: u64,
        available: u64,
    },
    #[error("{0} trailing payload bytes not covered by any tensor")]
    TrailingBytes(u64),
    #[error("tensor `{name}`: non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("invalid tensor name `{0}`")]
    InvalidName(String),
    #[error("reserved metadata key `{0}`")]
    ReservedMetadata(String),
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("no checkpoints given")]
    Empty,
    #[error("checkpoint {index} is missing tensors {missing:?} and has extra tensors {extra:?}")]
    NameMismatch {
        index: usize,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error(
        "tensor `{name}`: shape {expected:?} in checkpoint 0 but {found:?} in checkpoint {index}"
    )]
    ShapeMismatch {
        name: String,
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// A rank-1 or rank-2 row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, String> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, String> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<(), String> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(format!("rank {} not supported (1 or 2)", shape.len()));
    }
    if shape.contains(&0) {
        return Err(format!("shape {shape:?} has a zero dimension"));
    }
    Ok(())
}

/// Ordered map from tensor name to tensor, plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of tensors and metadata.
    pub fn bit_eq(&self, other: &NamedTensorMap) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Checks names, metadata keys and finiteness.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        for key in self.metadata.keys() {
            if key == VERSION_KEY {
                return Err(CheckpointError::ReservedMetadata(key.clone()));
            }
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name == METADATA_KEY {
                return Err(CheckpointError::InvalidName(name.clone()));
            }
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for NamedTensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

fn header_bytes(map: &NamedTensorMap) -> Vec<u8> {
    let mut root = Map::new();
    let mut meta = Map::new();
    for (k, v) in &map.metadata {
        meta.insert(k.clone(), Value::String(v.clone()));
    }
    meta.insert(
        VERSION_KEY.to_string(),
        Value::String(FORMAT_VERSION.to_string()),
    );
    root.insert(METADATA_KEY.to_string(), Value::Object(meta));
    let mut offset = 0u64;
    for (name, t) in &map.tensors {
        let len = (t.numel() * 4) as u64;
        root.insert(
            name.clone(),
            json!({
                "data_offsets": [offset, offset + len],
                "dtype": DTYPE_TAG,
                "shape": t.shape,
            }),
        );
        offset += len;
    }
    let mut bytes = serde_json::to_vec(&Value::Object(root)).expect("json map serializes");
    let padded = bytes.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    bytes.resize(padded, b' ');
    bytes
}

/// Encode a checkpoint to bytes. Validation happens before any encoding.
pub fn encode_checkpoint(map: &NamedTensorMap) -> Result<Vec<u8>, CheckpointError> {
    map.validate()?;
    let header = header_bytes(map);
    let payload_len: usize = map.total_elements() * 4;
    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in map.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(
    map: &NamedTensorMap,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(map)?;
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.flush().map_err(io_err)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensorMap, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

struct Descriptor {
    name: String,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

fn parse_descriptor(name: &str, v: &Value) -> Result<Descriptor, CheckpointError> {
    let malformed =
        |what: &str| CheckpointError::MalformedHeader(format!("tensor `{name}`: {what}"));
    let obj = v
        .as_object()
        .ok_or_else(|| malformed("descriptor is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing dtype"))?;
    if dtype != DTYPE_TAG {
        return Err(CheckpointError::UnsupportedDtype {
            name: name.to_string(),
            dtype: dtype.to_string(),
        });
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    check_shape(&shape).map_err(|reason| CheckpointError::BadShape {
        name: name.to_string(),
        reason,
    })?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing data_offsets"))?;
    let (begin, end) = match offsets.as_slice() {
        [b, e] => (
            b.as_u64().ok_or_else(|| malformed("bad data_offsets"))?,
            e.as_u64().ok_or_else(|| malformed("bad data_offsets"))?,
        ),
        _ => return Err(malformed("data_offsets must have two entries")),
    };
    let numel: u64 = shape.iter().map(|&d| d as u64).product();
    if end < begin || end - begin != numel * 4 {
        return Err(CheckpointError::BadShape {
            name: name.to_string(),
            reason: format!("data_offsets [{begin}, {end}) do not hold {numel} f32 values"),
        });
    }
    Ok(Descriptor {
        name: name.to_string(),
        shape,
        begin,
        end,
    })
}

/// Decode and fully validate checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensorMap, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::MalformedHeader(
            "file shorter than the 8-byte header length".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > MAX_HEADER_LEN || 8 + header_len > bytes.len() as u64 {
        return Err(CheckpointError::MalformedHeader(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_raw = &bytes[8..8 + header_len as usize];
    let header_str = std::str::from_utf8(header_raw)
        .map_err(|e| CheckpointError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let root: Map<String, Value> = serde_json::from_str(header_str.trim_end_matches(' '))
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let mut map = NamedTensorMap::new();
    let meta = root
        .get(METADATA_KEY)
        .and_then(Value::as_object)
        .ok_or_else(|| CheckpointError::MalformedHeader("missing __metadata__".into()))?;
    let mut version = None;
    for (k, v) in meta {
        let s = v.as_str().ok_or_else(|| {
            CheckpointError::MalformedHeader(format!("metadata `{k}` is not a string"))
        })?;
        if k == VERSION_KEY {
            version = Some(s.to_string());
        } else {
            map.metadata.insert(k.clone(), s.to_string());
        }
    }
    match version {
        Some(v) if v == FORMAT_VERSION.to_string() => {}
        Some(v) => return Err(CheckpointError::UnsupportedVersion(v)),
        None => return Err(CheckpointError::UnsupportedVersion("<missing>".into())),
    }

    let mut descriptors = root
        .iter()
        .filter(|(k, _)| k.as_str() != METADATA_KEY)
        .map(|(k, v)| {
            if k.is_empty() {
                return Err(CheckpointError::InvalidName(k.clone()));
            }
            parse_descriptor(k, v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    descriptors.sort_by_key(|d| (d.begin, d.end));

    let payload = &bytes[8 + header_len as usize..];
    let available = payload.len() as u64;
    let mut expected = 0u64;
    for d in &descriptors {
        if d.begin != expected {
            return Err(CheckpointError::OffsetLayout {
                name: d.name.clone(),
                begin: d.begin,
                end: d.end,
                expected,
            });
        }
        if d.end > available {
            return Err(CheckpointError::Truncated {
                name: d.name.clone(),
                needed: d.end,
                available,
            });
        }
        let data: Vec<f32> = payload[d.begin as usize..d.end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                name: d.name.clone(),
                index,
            });
        }
        let tensor =
            Tensor::new(d.shape.clone(), data).map_err(|reason| CheckpointError::BadShape {
                name: d.name.clone(),
                reason,
            })?;
        map.tensors.insert(d.name.clone(), tensor);
        expected = d.end;
    }
    if expected != available {
        return Err(CheckpointError::TrailingBytes(available - expected));
    }
    if header_bytes(&map) != header_raw {
        return Err(CheckpointError::NonCanonicalHeader);
    }
    Ok(map)
}

/// Succeeds iff all maps share tensor names and per-name shapes.
pub fn validate_same_geometry(maps: &[&NamedTensorMap]) -> Result<(), GeometryError> {
    let first = maps.first().ok_or(GeometryError::Empty)?;
    let names: BTreeSet<&String> = first.tensors.keys().collect();
    for (index, m) in maps.iter().enumerate().skip(1) {
        let other: BTreeSet<&String> = m.tensors.keys().collect();
        if other != names {
            return Err(GeometryError::NameMismatch {
                index,
                missing: names.difference(&other).map(|s| s.to_string()).collect(),
                extra: other.difference(&names).map(|s| s.to_string()).collect(),
            });
        }
        for (name, t) in &first.tensors {
            let found = m.tensors[name].shape();
            if found != t.shape() {
                return Err(GeometryError::ShapeMismatch {
                    name: name.clone(),
                    index,
                    expected: t.shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
    }
    Ok(())
}
