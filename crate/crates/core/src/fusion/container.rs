//! Named-tensor container files.
//!
//! Layout: 8-byte little-endian header length `N`, `N` bytes of JSON header,
//! then the raw tensor bytes. The header maps tensor names to
//! `{"dtype", "shape", "data_offsets": [begin, end]}` (offsets relative to
//! the start of the byte buffer) and carries a `__metadata__` string map.
//! This is the safetensors layout, so PEFT adapter files load directly.

use std::fs;
use std::path::Path;

use half::{bf16, f16};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";
/// Refuse absurd header lengths before allocating.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F16")]
    F16,
    #[serde(rename = "BF16")]
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} has a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("buffer holds {actual} bytes, shape {shape:?} of {dtype:?} needs {expected}")]
    LengthMismatch {
        dtype: DType,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

/// A dense little-endian tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected = shape.iter().product::<usize>() * dtype.size();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                dtype,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Encodes values into `dtype`, rounding to nearest-even for half types.
    pub fn from_f32(dtype: DType, shape: Vec<usize>, values: &[f32]) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(values.len() * dtype.size());
        for &v in values {
            match dtype {
                DType::F32 => data.extend_from_slice(&v.to_le_bytes()),
                DType::F16 => data.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
                DType::BF16 => data.extend_from_slice(&bf16::from_f32(v).to_le_bytes()),
            }
        }
        Self::new(dtype, shape, data)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes every element to f32 (exact for all three dtypes).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        let size = self.dtype.size();
        self.data
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                DType::F16 => f16::from_le_bytes([b[0], b[1]]).to_f32(),
                DType::BF16 => bf16::from_le_bytes([b[0], b[1]]).to_f32(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMetadata {
    pub rank: u32,
    pub alpha: f64,
    pub target_modules: Vec<String>,
    /// Remaining `__metadata__` entries, kept in file order.
    pub extras: IndexMap<String, String>,
}

impl AdapterMetadata {
    pub fn new(rank: u32, alpha: f64, target_modules: Vec<String>) -> Self {
        Self {
            rank,
            alpha,
            target_modules,
            extras: IndexMap::new(),
        }
    }

    fn to_header(&self) -> Map<String, Value> {
        let mut map = Map::new();
        map.insert("rank".into(), Value::String(self.rank.to_string()));
        map.insert("alpha".into(), Value::String(format_alpha(self.alpha)));
        map.insert(
            "target_modules".into(),
            Value::String(serde_json::to_string(&self.target_modules).expect("strings serialize")),
        );
        for (key, value) in &self.extras {
            map.insert(key.clone(), Value::String(value.clone()));
        }
        map
    }
}

fn format_alpha(alpha: f64) -> String {
    if alpha.fract() == 0.0 && alpha.abs() < 1e15 {
        format!("{}", alpha as i64)
    } else {
        alpha.to_string()
    }
}

/// LoRA adapter weights plus their rank/alpha metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub tensors: IndexMap<String, Tensor>,
    pub metadata: AdapterMetadata,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header length: {0}")]
    BadHeaderLength(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {tensor:?} has unknown dtype {dtype:?}")]
    UnknownDtype { tensor: String, dtype: String },
    #[error("truncated payload: header needs {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("overlapping offsets between {first:?} and {second:?}")]
    OverlappingOffsets { first: String, second: String },
    #[error("tensor {tensor:?}: {source}")]
    Tensor {
        tensor: String,
        #[source]
        source: TensorError,
    },
    #[error("missing metadata field {0:?}")]
    MissingMetadata(&'static str),
    #[error("invalid metadata field {field:?}: {detail}")]
    InvalidMetadata { field: &'static str, detail: String },
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<AdapterCheckpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let sidecar = path.parent().map(|dir| dir.join("adapter_config.json"));
    decode_checkpoint(&bytes, sidecar.as_deref())
}

/// Parses container bytes. When rank/alpha are absent from `__metadata__`,
/// an optional PEFT `adapter_config.json` supplies them.
pub fn decode_checkpoint(bytes: &[u8], adapter_config: Option<&Path>) -> Result<AdapterCheckpoint, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::BadHeaderLength(format!(
            "file has {} bytes, need at least 8",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
        return Err(CheckpointError::BadHeaderLength(format!(
            "header claims {header_len} bytes, file has {}",
            bytes.len() - 8
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: Map<String, Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let buffer = &bytes[header_end..];

    let mut raw_metadata = IndexMap::new();
    let mut entries = Vec::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            let Value::Object(map) = value else {
                return Err(CheckpointError::Header("__metadata__ must be an object".into()));
            };
            for (key, value) in map {
                match value {
                    Value::String(s) => {
                        raw_metadata.insert(key, s);
                    }
                    other => {
                        return Err(CheckpointError::Header(format!(
                            "__metadata__ value for {key:?} must be a string, found {other}"
                        )))
                    }
                }
            }
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| CheckpointError::Header(format!("{name}: {e}")))?;
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| CheckpointError::UnknownDtype {
            tensor: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(CheckpointError::Header(format!("{name}: data_offsets begin > end")));
        }
        entries.push((name, dtype, entry.shape, begin, end));
    }

    let needed = entries.iter().map(|e| e.4).max().unwrap_or(0);
    if needed > buffer.len() {
        return Err(CheckpointError::Truncated {
            needed,
            available: buffer.len(),
        });
    }
    let mut by_offset: Vec<_> = entries.iter().collect();
    by_offset.sort_by_key(|e| (e.3, e.4));
    for pair in by_offset.windows(2) {
        if pair[1].3 < pair[0].4 {
            return Err(CheckpointError::OverlappingOffsets {
                first: pair[0].0.clone(),
                second: pair[1].0.clone(),
            });
        }
    }
    if needed < buffer.len() {
        return Err(CheckpointError::TrailingBytes(buffer.len() - needed));
    }

    let mut tensors = IndexMap::with_capacity(entries.len());
    for (name, dtype, shape, begin, end) in entries {
        let tensor = Tensor::new(dtype, shape, buffer[begin..end].to_vec())
            .map_err(|source| CheckpointError::Tensor {
                tensor: name.clone(),
                source,
            })?;
        tensors.insert(name, tensor);
    }

    let metadata = parse_metadata(raw_metadata, adapter_config)?;
    Ok(AdapterCheckpoint { tensors, metadata })
}

fn parse_metadata(
    mut raw: IndexMap<String, String>,
    adapter_config: Option<&Path>,
) -> Result<AdapterMetadata, CheckpointError> {
    let config: Option<Value> = if raw.contains_key("rank") {
        None
    } else {
        adapter_config
            .filter(|p| p.is_file())
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|text| serde_json::from_str(&text).ok())
    };

    let rank = match raw.shift_remove("rank") {
        Some(text) => text.trim().parse::<u32>().map_err(|e| CheckpointError::InvalidMetadata {
            field: "rank",
            detail: format!("{text:?}: {e}"),
        })?,
        None => config
            .as_ref()
            .and_then(|c| c.get("r"))
            .and_then(Value::as_u64)
            .and_then(|r| u32::try_from(r).ok())
            .ok_or(CheckpointError::MissingMetadata("rank"))?,
    };
    if rank == 0 {
        return Err(CheckpointError::InvalidMetadata {
            field: "rank",
            detail: "must be > 0".into(),
        });
    }
    let alpha = match raw.shift_remove("alpha") {
        Some(text) => text.trim().parse::<f64>().map_err(|e| CheckpointError::InvalidMetadata {
            field: "alpha",
            detail: format!("{text:?}: {e}"),
        })?,
        None => config
            .as_ref()
            .and_then(|c| c.get("lora_alpha"))
            .and_then(Value::as_f64)
            .ok_or(CheckpointError::MissingMetadata("alpha"))?,
    };
    let target_modules = match raw.shift_remove("target_modules") {
        Some(text) => parse_module_list(&text),
        None => config
            .as_ref()
            .and_then(|c| c.get("target_modules"))
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_owned).collect())
            .unwrap_or_default(),
    };
    Ok(AdapterMetadata {
        rank,
        alpha,
        target_modules,
        extras: raw,
    })
}

/// Accepts a JSON array of strings or a comma-separated list.
fn parse_module_list(text: &str) -> Vec<String> {
    if let Ok(list) = serde_json::from_str::<Vec<String>>(text) {
        return list;
    }
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Serializes a checkpoint. Tensors are laid out contiguously in map order
/// and the header is space-padded to a multiple of 8 bytes.
pub fn encode_checkpoint(ckpt: &AdapterCheckpoint) -> Vec<u8> {
    let mut header = Map::new();
    header.insert(METADATA_KEY.into(), Value::Object(ckpt.metadata.to_header()));
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.tensors {
        let end = offset + tensor.data.len();
        let mut entry = Map::new();
        entry.insert("dtype".into(), Value::String(tensor.dtype.as_str().into()));
        entry.insert("shape".into(), serde_json::to_value(&tensor.shape).expect("shape serializes"));
        entry.insert("data_offsets".into(), serde_json::to_value([offset, end]).expect("offsets serialize"));
        header.insert(name.clone(), Value::Object(entry));
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in ckpt.tensors.values() {
        out.extend_from_slice(&tensor.data);
    }
    out
}

pub fn write_checkpoint(ckpt: &AdapterCheckpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AdapterCheckpoint {
        let mut tensors = IndexMap::new();
        tensors.insert(
            "base_model.model.layers.0.self_attn.q_proj.lora_A.weight".to_string(),
            Tensor::from_f32(DType::F32, vec![2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 7.25]).unwrap(),
        );
        tensors.insert(
            "base_model.model.layers.0.self_attn.q_proj.lora_B.weight".to_string(),
            Tensor::from_f32(DType::BF16, vec![3, 2], &[0.5, 0.25, -1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        AdapterCheckpoint {
            tensors,
            metadata: AdapterMetadata::new(128, 128.0, vec!["q_proj".into(), "v_proj".into()]),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes, None).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[1].dtype(), DType::BF16);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn header_is_aligned_and_carries_metadata() {
        let bytes = encode_checkpoint(&sample());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["__metadata__"]["rank"], "128");
        assert_eq!(header["__metadata__"]["alpha"], "128");
        assert_eq!(header["__metadata__"]["target_modules"], r#"["q_proj","v_proj"]"#);
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let ckpt = AdapterCheckpoint {
            tensors: IndexMap::new(),
            metadata: AdapterMetadata::new(8, 16.0, vec![]),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt), None).unwrap();
        assert!(back.tensors.is_empty());
        assert_eq!(back.metadata.rank, 8);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_checkpoint(&sample());
        bytes.truncate(bytes.len() - 3);
        let err = decode_checkpoint(&bytes, None).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn bad_header_length() {
        assert!(matches!(decode_checkpoint(&[1, 2, 3], None), Err(CheckpointError::BadHeaderLength(_))));
        let mut bytes = encode_checkpoint(&sample());
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes, None), Err(CheckpointError::BadHeaderLength(_))));
    }

    fn raw_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn overlapping_offsets_and_unknown_dtype() {
        let header = r#"{"__metadata__": {"rank": "4", "alpha": "8"},
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(header, &[0; 8]), None),
            Err(CheckpointError::OverlappingOffsets { .. })
        ));
        let header = r#"{"__metadata__": {"rank": "4", "alpha": "8"},
            "a": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(header, &[0; 8]), None),
            Err(CheckpointError::UnknownDtype { .. })
        ));
    }

    #[test]
    fn shape_and_offsets_must_agree() {
        let header = r#"{"__metadata__": {"rank": "4", "alpha": "8"},
            "a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}"#;
        assert!(matches!(
            decode_checkpoint(&raw_file(header, &[0; 8]), None),
            Err(CheckpointError::Tensor { .. })
        ));
    }

    #[test]
    fn missing_rank_uses_adapter_config() {
        let header = r#"{"__metadata__": {"format": "pt"},
            "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}"#;
        let bytes = raw_file(header, &[0; 4]);
        assert!(matches!(
            decode_checkpoint(&bytes, None),
            Err(CheckpointError::MissingMetadata("rank"))
        ));
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("adapter_config.json");
        fs::write(&config, r#"{"r": 128, "lora_alpha": 128, "target_modules": ["q_proj"]}"#).unwrap();
        let ckpt = decode_checkpoint(&bytes, Some(&config)).unwrap();
        assert_eq!(ckpt.metadata.rank, 128);
        assert_eq!(ckpt.metadata.alpha, 128.0);
        assert_eq!(ckpt.metadata.target_modules, ["q_proj"]);
        assert_eq!(ckpt.metadata.extras["format"], "pt");
    }

    #[test]
    fn comma_separated_modules() {
        assert_eq!(parse_module_list("q_proj, v_proj"), ["q_proj", "v_proj"]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(DType::F32, vec![0, 3], vec![]).is_err());
    }
}
