//! Safetensors container codec.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{"dtype","shape","data_offsets"}` (plus an
//! optional string map under `__metadata__`), then the tensor byte buffer.
//! The writer lays tensors out in key-sorted order with no gaps and pads the
//! header with spaces to an 8-byte boundary.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    BF16,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F64 => "F64",
        }
    }

    fn parse(name: &str, s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            "F64" => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }
}

/// One named tensor with its raw little-endian payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel * dtype.size() != data.len() {
            return Err(Error::InvalidShape {
                name,
                reason: format!(
                    "shape {shape:?} of {} needs {} bytes, buffer has {}",
                    dtype.as_str(),
                    numel * dtype.size(),
                    data.len()
                ),
            });
        }
        Ok(Self { name, dtype, shape, data })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F32, shape, data)
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, DType::F64, shape, data)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Widen every element to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
                .collect(),
            DType::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| half::bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
                .collect(),
        }
    }
}

/// Decoded container: tensors sorted by name, plus the optional metadata map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Safetensors {
    pub tensors: Vec<TensorRecord>,
    pub metadata: Option<BTreeMap<String, String>>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn as_usize(v: &Value, what: &str, name: &str) -> Result<usize> {
    v.as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| malformed(format!("`{name}`: {what} must be a non-negative integer")))
}

pub fn parse(bytes: &[u8]) -> Result<Safetensors> {
    if bytes.len() < 8 {
        return Err(malformed(format!("file is {} bytes, shorter than the 8-byte length prefix", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| malformed(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let header: Value = serde_json::from_str(header).map_err(|e| malformed(e.to_string()))?;
    let Value::Object(entries) = header else {
        return Err(malformed("header is not a JSON object"));
    };

    let buffer = &bytes[header_end..];
    let mut out = Safetensors::default();
    for (name, entry) in entries {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(malformed("__metadata__ is not an object"));
            };
            let mut map = BTreeMap::new();
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(malformed(format!("__metadata__ value for `{k}` is not a string")));
                };
                map.insert(k, s);
            }
            out.metadata = Some(map);
            continue;
        }
        let obj = entry
            .as_object()
            .ok_or_else(|| malformed(format!("entry `{name}` is not an object")))?;
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("`{name}`: missing dtype")))?;
        let dtype = DType::parse(&name, dtype)?;
        let shape = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(format!("`{name}`: missing shape")))?
            .iter()
            .map(|d| as_usize(d, "shape entry", &name))
            .collect::<Result<Vec<_>>>()?;
        let offsets = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| malformed(format!("`{name}`: data_offsets must be [begin, end]")))?;
        let begin = as_usize(&offsets[0], "data offset", &name)?;
        let end = as_usize(&offsets[1], "data offset", &name)?;
        if end < begin {
            return Err(malformed(format!("`{name}`: data_offsets end {end} < begin {begin}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("`{name}`: shape overflows")))?;
        if numel.checked_mul(dtype.size()) != Some(end - begin) {
            return Err(malformed(format!(
                "`{name}`: shape {shape:?} of {} does not match {} payload bytes",
                dtype.as_str(),
                end - begin
            )));
        }
        if end > buffer.len() {
            return Err(Error::Truncated {
                name,
                begin,
                end,
                available: buffer.len(),
            });
        }
        out.tensors.push(TensorRecord {
            name,
            dtype,
            shape,
            data: buffer[begin..end].to_vec(),
        });
    }
    out.tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

pub fn serialize(tensors: &[&TensorRecord], metadata: Option<&BTreeMap<String, String>>) -> Result<Vec<u8>> {
    let mut sorted: Vec<&TensorRecord> = tensors.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(w) = sorted.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(Error::InvalidArgument(format!("duplicate tensor name `{}`", w[0].name)));
    }

    let mut header = Map::new();
    let mut offset = 0usize;
    for t in &sorted {
        if t.name == METADATA_KEY {
            return Err(Error::InvalidArgument(format!("`{METADATA_KEY}` is reserved")));
        }
        let end = offset + t.data.len();
        header.insert(
            t.name.clone(),
            json!({"dtype": t.dtype.as_str(), "shape": t.shape, "data_offsets": [offset, end]}),
        );
        offset = end;
    }
    if let Some(meta) = metadata {
        header.insert(METADATA_KEY.to_string(), json!(meta));
    }
    let mut header = serde_json::to_vec(&Value::Object(header))?;
    let padded = header.len().next_multiple_of(8);
    header.resize(padded, b' ');

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &sorted {
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}
