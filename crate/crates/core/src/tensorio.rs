//! Checkpoint container I/O and canonical fingerprinting.
//!
//! The on-disk format is the single-file "JSON header + raw data" tensor
//! container used by released checkpoints:
//!
//!   ┌──────────────┬──────────────────────┬───────────────────────┐
//!   │ 8 bytes      │ N bytes              │ raw tensor bytes      │
//!   │ header size  │ JSON header (UTF-8)  │ (little-endian)       │
//!   │ (u64 LE)     │                      │                       │
//!   └──────────────┴──────────────────────┴───────────────────────┘
//!
//! Header example:
//!
//!   {
//!     "__metadata__": { "chronovec.role": "model" },
//!     "layer.weight": {
//!       "dtype": "F32",
//!       "shape": [64, 128],
//!       "data_offsets": [0, 32768]
//!     }
//!   }
//!
//! Offsets are relative to the end of the header. Writes are canonical:
//! tensors are serialized in lexicographic name order with contiguous,
//! gap-free offsets and no whitespace in the header, so writing the same
//! checkpoint twice yields byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use half::{bf16, f16};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Refuse to allocate headers larger than this; anything bigger is corrupt.
const MAX_HEADER_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}: {1}")]
    InvalidName(String, &'static str),
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("shape {shape:?} implies {expected} elements but buffer holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

/// Storage scalar types. All arithmetic happens in F32; the narrow types
/// exist for interoperability with released checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    /// Bytes per scalar.
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(TensorIoError::UnsupportedDtype(other.to_string())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense row-major tensor. The buffer holds raw little-endian scalars in
/// the storage dtype; loads and stores never round-trip through f32 unless
/// a conversion is requested, so containers survive bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn from_raw(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Tensor> {
        let elems = element_count(&shape).ok_or_else(|| TensorIoError::ShapeDataMismatch {
            shape: shape.clone(),
            expected: usize::MAX,
            actual: data.len(),
        })?;
        if elems * dtype.width() != data.len() {
            return Err(TensorIoError::ShapeDataMismatch {
                shape,
                expected: elems,
                actual: data.len() / dtype.width().max(1),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Tensor> {
        let elems = element_count(&shape).unwrap_or(usize::MAX);
        if elems != values.len() {
            return Err(TensorIoError::ShapeDataMismatch {
                shape,
                expected: elems,
                actual: values.len(),
            });
        }
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Ok(Tensor {
            dtype: Dtype::F32,
            shape,
            data,
        })
    }

    /// Scalar tensor (empty shape, one element).
    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_f32(vec![], &[value]).unwrap()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn raw_data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dtype.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Upconvert to f32 for compute.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => self
                .data
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
        }
    }

    /// Convert to `dtype`, saturating finite overflows to the largest finite
    /// value. Returns the converted tensor and how many scalars saturated.
    pub fn cast(&self, dtype: Dtype) -> (Tensor, u64) {
        if dtype == self.dtype {
            return (self.clone(), 0);
        }
        let values = self.to_f32();
        let mut saturated = 0u64;
        let mut data = Vec::with_capacity(values.len() * dtype.width());
        match dtype {
            Dtype::F32 => {
                for v in &values {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in &values {
                    let mut h = f16::from_f32(v);
                    if h.is_infinite() && v.is_finite() {
                        saturated += 1;
                        h = if v > 0.0 { f16::MAX } else { f16::MIN };
                    }
                    data.extend_from_slice(&h.to_le_bytes());
                }
            }
            Dtype::BF16 => {
                for &v in &values {
                    let mut h = bf16::from_f32(v);
                    if h.is_infinite() && v.is_finite() {
                        saturated += 1;
                        h = if v > 0.0 { bf16::MAX } else { bf16::MIN };
                    }
                    data.extend_from_slice(&h.to_le_bytes());
                }
            }
        }
        (
            Tensor {
                dtype,
                shape: self.shape.clone(),
                data,
            },
            saturated,
        )
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(TensorIoError::InvalidName(
            name.to_string(),
            "name is empty",
        ));
    }
    if name.chars().any(|c| c.is_control()) {
        return Err(TensorIoError::InvalidName(
            name.to_string(),
            "name contains control characters",
        ));
    }
    Ok(())
}

/// An ordered map of named tensors plus free-form string metadata.
/// Iteration order is always lexicographic by name, independent of how the
/// checkpoint was built or what order a file stored it in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Add a tensor. Rejects empty names, control characters, and duplicates.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        validate_name(name)?;
        if self.tensors.contains_key(name) {
            return Err(TensorIoError::DuplicateName(name.to_string()));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Tensors in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// SHA-256 over the sorted (name, dtype, shape) inventory. Values are
/// excluded by construction, so a pretrained model and anything finetuned
/// from it share a fingerprint.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub fn from_bytes(digest: [u8; 32]) -> Fingerprint {
        Fingerprint(digest)
    }

    pub fn to_hex(self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            use fmt::Write;
            write!(s, "{b:02x}").unwrap();
        }
        s
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl FromStr for Fingerprint {
    type Err = TensorIoError;

    fn from_str(s: &str) -> Result<Fingerprint> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return Err(TensorIoError::MalformedHeader(format!(
                "fingerprint must be 64 hex chars, got {}",
                bytes.len()
            )));
        }
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks_exact(2).enumerate() {
            let hi = (pair[0] as char).to_digit(16);
            let lo = (pair[1] as char).to_digit(16);
            match (hi, lo) {
                (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
                _ => {
                    return Err(TensorIoError::MalformedHeader(
                        "fingerprint contains non-hex characters".to_string(),
                    ))
                }
            }
        }
        Ok(Fingerprint(out))
    }
}

/// Digest of the checkpoint's inventory. Names cannot contain control
/// characters, so newline delimiting is unambiguous.
pub fn fingerprint(ckpt: &Checkpoint) -> Fingerprint {
    let mut hasher = Sha256::new();
    for (name, tensor) in ckpt.iter() {
        hasher.update(name.as_bytes());
        hasher.update(b"\n");
        hasher.update(tensor.dtype().as_str().as_bytes());
        hasher.update(b"\n");
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        hasher.update(dims.join(",").as_bytes());
        hasher.update(b"\n");
    }
    Fingerprint(hasher.finalize().into())
}

// ---------------------------------------------------------------------------
// Container writing
// ---------------------------------------------------------------------------

/// Saturation tally from a container write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteStats {
    /// Scalars clamped to the largest finite value during a narrowing cast.
    pub saturated: u64,
}

fn json_escape(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Serialize a checkpoint to its canonical container bytes.
pub fn to_container_bytes(
    ckpt: &Checkpoint,
    dtype_override: Option<Dtype>,
) -> (Vec<u8>, WriteStats) {
    let mut stats = WriteStats::default();
    let mut converted: Vec<(&str, Tensor)> = Vec::with_capacity(ckpt.len());
    for (name, tensor) in ckpt.iter() {
        match dtype_override {
            Some(dt) => {
                let (t, saturated) = tensor.cast(dt);
                stats.saturated += saturated;
                converted.push((name, t));
            }
            None => converted.push((name, tensor.clone())),
        }
    }

    let mut header = String::from("{");
    let mut first = true;
    if !ckpt.metadata.is_empty() {
        header.push_str("\"__metadata__\":{");
        for (i, (k, v)) in ckpt.metadata.iter().enumerate() {
            if i > 0 {
                header.push(',');
            }
            header.push_str(&json_escape(k));
            header.push(':');
            header.push_str(&json_escape(v));
        }
        header.push('}');
        first = false;
    }
    let mut offset = 0usize;
    for (name, tensor) in &converted {
        if !first {
            header.push(',');
        }
        first = false;
        let end = offset + tensor.raw_data().len();
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_escape(name),
            tensor.dtype().as_str(),
            dims.join(","),
            offset,
            end
        ));
        offset = end;
    }
    header.push('}');

    let header_bytes = header.into_bytes();
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in &converted {
        out.extend_from_slice(tensor.raw_data());
    }
    (out, stats)
}

/// Write the canonical container to `path`.
pub fn write_checkpoint(
    ckpt: &Checkpoint,
    path: &Path,
    dtype_override: Option<Dtype>,
) -> Result<WriteStats> {
    let (bytes, stats) = to_container_bytes(ckpt, dtype_override);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Container reading
// ---------------------------------------------------------------------------

/// Header entries in file order, duplicates preserved for detection.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push(entry);
                }
                Ok(HeaderEntries(entries))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn as_usize(v: &serde_json::Value, what: &str) -> Result<usize> {
    v.as_u64().map(|n| n as usize).ok_or_else(|| {
        TensorIoError::MalformedHeader(format!("{what} must be a non-negative integer"))
    })
}

struct RawEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_tensor_entry(name: &str, value: &serde_json::Value) -> Result<RawEntry> {
    let obj = value.as_object().ok_or_else(|| {
        TensorIoError::MalformedHeader(format!("entry for {name:?} is not an object"))
    })?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "dtype" | "shape" | "data_offsets") {
            return Err(TensorIoError::MalformedHeader(format!(
                "entry for {name:?} has unknown key {key:?}"
            )));
        }
    }
    let dtype_str = obj
        .get("dtype")
        .and_then(|v| v.as_str())
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("{name:?} missing dtype")))?;
    let dtype = Dtype::parse(dtype_str)?;
    let shape_val = obj
        .get("shape")
        .and_then(|v| v.as_array())
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("{name:?} missing shape")))?;
    let shape = shape_val
        .iter()
        .map(|d| as_usize(d, "shape dimension"))
        .collect::<Result<Vec<_>>>()?;
    let offs = obj
        .get("data_offsets")
        .and_then(|v| v.as_array())
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("{name:?} missing data_offsets")))?;
    if offs.len() != 2 {
        return Err(TensorIoError::MalformedHeader(format!(
            "{name:?} data_offsets must have exactly two entries"
        )));
    }
    Ok(RawEntry {
        name: name.to_string(),
        dtype,
        shape,
        begin: as_usize(&offs[0], "data offset")?,
        end: as_usize(&offs[1], "data offset")?,
    })
}

/// Decode a checkpoint from container bytes.
pub fn from_container_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(TensorIoError::MalformedHeader(
            "file too short for header length".to_string(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > MAX_HEADER_BYTES {
        return Err(TensorIoError::MalformedHeader(format!(
            "header length {header_len} exceeds limit"
        )));
    }
    let header_len = header_len as usize;
    if 8 + header_len > bytes.len() {
        return Err(TensorIoError::MalformedHeader(format!(
            "header length {} exceeds file size {}",
            header_len,
            bytes.len()
        )));
    }
    let header = &bytes[8..8 + header_len];
    let data = &bytes[8 + header_len..];

    let entries: HeaderEntries = serde_json::from_slice(header)
        .map_err(|e| TensorIoError::MalformedHeader(e.to_string()))?;

    let mut seen = BTreeSet::new();
    let mut metadata = BTreeMap::new();
    let mut raw_entries = Vec::new();
    for (key, value) in &entries.0 {
        if !seen.insert(key.clone()) {
            return Err(TensorIoError::DuplicateName(key.clone()));
        }
        if key == "__metadata__" {
            let obj = value.as_object().ok_or_else(|| {
                TensorIoError::MalformedHeader("__metadata__ is not an object".to_string())
            })?;
            for (k, v) in obj {
                let s = v.as_str().ok_or_else(|| {
                    TensorIoError::MalformedHeader(format!(
                        "__metadata__ value for {k:?} is not a string"
                    ))
                })?;
                metadata.insert(k.clone(), s.to_string());
            }
        } else {
            validate_name(key)?;
            raw_entries.push(parse_tensor_entry(key, value)?);
        }
    }

    // Bounds and overlap checks over the data region.
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    for e in &raw_entries {
        let elems = element_count(&e.shape).ok_or_else(|| TensorIoError::BadTensor {
            name: e.name.clone(),
            reason: "shape element count overflows".to_string(),
        })?;
        let expected_bytes = elems * e.dtype.width();
        if e.begin > e.end || e.end > data.len() {
            return Err(TensorIoError::BadTensor {
                name: e.name.clone(),
                reason: format!(
                    "data offsets [{}, {}] out of bounds for data region of {} bytes",
                    e.begin,
                    e.end,
                    data.len()
                ),
            });
        }
        if e.end - e.begin != expected_bytes {
            return Err(TensorIoError::BadTensor {
                name: e.name.clone(),
                reason: format!(
                    "offsets span {} bytes but shape {:?} with dtype {} needs {}",
                    e.end - e.begin,
                    e.shape,
                    e.dtype,
                    expected_bytes
                ),
            });
        }
        if e.begin != e.end {
            spans.push((e.begin, e.end, &e.name));
        }
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(TensorIoError::BadTensor {
                name: pair[1].2.to_string(),
                reason: format!("data range overlaps tensor {:?}", pair[0].2),
            });
        }
    }

    let mut ckpt = Checkpoint::new();
    ckpt.metadata = metadata;
    for e in raw_entries {
        let tensor = Tensor::from_raw(e.dtype, e.shape, data[e.begin..e.end].to_vec())?;
        ckpt.insert(&e.name, tensor)?;
    }
    Ok(ckpt)
}

/// Load a checkpoint container, materializing every tensor eagerly.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_container_bytes(&bytes)
}
