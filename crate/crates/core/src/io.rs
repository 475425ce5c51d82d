//! On-disk formats: single tensors, whole-model checkpoints and run reports.
//!
//! A tensor file is
//!
//! ```text
//! u32 LE header length | JSON header {"magic":"SSA1","dtype":..,"shape":[..]} | LE payload
//! ```
//!
//! A checkpoint is a concatenation of length-prefixed tensor files followed by
//! a JSON manifest (model config, dtype, `path → (offset, length)` entries),
//! the manifest length as u64 LE and the 8-byte trailer [`CHECKPOINT_MAGIC`].
//! All integers are little-endian, so files are portable byte for byte.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{checked_numel, DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &str = "SSA1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSA1CKPT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub magic: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let header = serde_json::to_vec(&TensorHeader {
        magic: TENSOR_MAGIC.into(),
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(4 + header.len() + t.len() * T::DTYPE.size());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses the header and returns it with the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(TensorHeader, &[u8])> {
    let len_bytes: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| FormatError::Length(format!("{} bytes is too short for a header prefix", bytes.len())))?;
    let hlen = u32::from_le_bytes(len_bytes) as usize;
    let raw = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| FormatError::Length(format!("header of {hlen} bytes runs past end of file")))?;
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| FormatError::Header(e.to_string()))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != TENSOR_MAGIC {
        return Err(FormatError::Magic {
            expected: TENSOR_MAGIC.into(),
            found: magic.into(),
        }
        .into());
    }
    let header: TensorHeader = serde_json::from_value(value).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, &bytes[4 + hlen..]))
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (header, payload) = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(FormatError::Dtype {
            expected: T::DTYPE.to_string(),
            found: header.dtype.to_string(),
        }
        .into());
    }
    let numel = checked_numel(&header.shape)?;
    let want = numel
        .checked_mul(T::DTYPE.size())
        .ok_or_else(|| Error::Size(header.shape.clone()))?;
    if payload.len() != want {
        return Err(FormatError::Length(format!(
            "shape {:?} needs {want} payload bytes, found {}",
            header.shape,
            payload.len()
        ))
        .into());
    }
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(&header.shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&read_file(path.as_ref())?)
}

/// Header only; lets callers pick the element type before loading.
pub fn peek_tensor(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let bytes = read_file(path.as_ref())?;
    Ok(decode_header(&bytes)?.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub dtype: DType,
    pub entries: Vec<ManifestEntry>,
}

pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut entries = Vec::new();
    for (path, t) in params.named_params() {
        let rec = encode_tensor(t);
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        entries.push(ManifestEntry {
            path,
            offset: out.len() as u64,
            length: rec.len() as u64,
        });
        out.extend_from_slice(&rec);
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config.clone(),
        dtype: T::DTYPE,
        entries,
    })
    .expect("manifest serializes");
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out
}

pub fn decode_manifest(bytes: &[u8]) -> Result<Manifest> {
    let n = bytes.len();
    if n < 16 {
        return Err(FormatError::Length(format!("{n} bytes is too short for a checkpoint")).into());
    }
    if &bytes[n - 8..] != CHECKPOINT_MAGIC {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[n - 8..]).into(),
        }
        .into());
    }
    let mlen = u64::from_le_bytes(bytes[n - 16..n - 8].try_into().unwrap());
    let start = (n as u64 - 16)
        .checked_sub(mlen)
        .ok_or_else(|| FormatError::Length(format!("manifest of {mlen} bytes exceeds the file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[start as usize..n - 16])
        .map_err(|e| FormatError::Manifest(format!("unreadable manifest: {e}")))?;
    manifest
        .config
        .validate()
        .map_err(|e| FormatError::Manifest(format!("embedded config is invalid: {e}")))?;
    for e in &manifest.entries {
        if e.offset.checked_add(e.length).is_none_or(|end| end > start) {
            return Err(FormatError::Length(format!("record `{}` lies outside the data section", e.path)).into());
        }
    }
    Ok(manifest)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let manifest = decode_manifest(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(FormatError::Dtype {
            expected: T::DTYPE.to_string(),
            found: manifest.dtype.to_string(),
        }
        .into());
    }
    let mut index: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &manifest.entries {
        if index.insert(e.path.as_str(), e).is_some() {
            return Err(FormatError::Manifest(format!("parameter `{}` appears more than once", e.path)).into());
        }
    }
    let mut params = ModelParams::<T>::zeros(&manifest.config)?;
    let mut used = HashSet::new();
    for (path, slot) in params.named_params_mut() {
        let e = index
            .get(path.as_str())
            .ok_or_else(|| FormatError::MissingParam(path.clone()))?;
        let rec = &bytes[e.offset as usize..(e.offset + e.length) as usize];
        let t: Tensor<T> = decode_tensor(rec)?;
        if t.shape() != slot.shape() {
            return Err(FormatError::Manifest(format!(
                "`{path}` has shape {:?}, config requires {:?}",
                t.shape(),
                slot.shape()
            ))
            .into());
        }
        *slot = t;
        used.insert(path);
    }
    if let Some(extra) = manifest.entries.iter().find(|e| !used.contains(&e.path)) {
        return Err(FormatError::Manifest(format!("unexpected parameter `{}`", extra.path)).into());
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<Manifest> {
    decode_manifest(&read_file(path.as_ref())?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the value's JSON encoding.
pub fn config_hash<S: Serialize>(config: &S) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Machine-readable record of one CLI invocation. Everything outside
/// `timings` is a pure function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub results: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<serde_json::Value>,
}

impl RunReport {
    pub fn new<S: Serialize>(command: &str, config: &S, results: serde_json::Value) -> Self {
        RunReport {
            command: command.into(),
            config_hash: config_hash(config),
            results,
            timings: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn tensor_bytes_round_trip() {
        let t = Tensor::<f64>::randn(&[2, 3, 4], &mut Rng::seed(1), 1.0);
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let scalar = Tensor::<f32>::from_vec(&[], vec![2.5]).unwrap();
        assert_eq!(decode_tensor::<f32>(&encode_tensor(&scalar)).unwrap(), scalar);
    }

    #[test]
    fn tensor_decode_errors() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_tensor(&t);
        let truncated = &good[..good.len() - 4];
        assert!(matches!(decode_tensor::<f32>(truncated), Err(Error::Format(FormatError::Length(_)))));
        let mut bad = good.clone();
        let pos = bad.windows(4).position(|w| w == b"SSA1").unwrap();
        bad[pos..pos + 4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor::<f32>(&bad), Err(Error::Format(FormatError::Magic { .. }))));
        assert!(matches!(decode_tensor::<f64>(&good), Err(Error::Format(FormatError::Dtype { .. }))));
        assert!(matches!(decode_tensor::<f32>(&[1, 0]), Err(Error::Format(FormatError::Length(_)))));
        let mut garbled = good.clone();
        garbled[5] = b'!';
        assert!(matches!(decode_tensor::<f32>(&garbled), Err(Error::Format(FormatError::Header(_)))));
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&ModelConfig::ssvit_t());
        assert_eq!(a, config_hash(&ModelConfig::ssvit_t()));
        assert_ne!(a, config_hash(&ModelConfig::ssvit_s()));
        assert_eq!(a.len(), 64);
    }
}
