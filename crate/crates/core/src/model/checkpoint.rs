//! Single-file generator checkpoints.
//!
//! Layout: 8-byte magic `MCMSRCK1`, little-endian `u64` header length, UTF-8
//! JSON header, then the tensor blob. Every tensor is stored contiguously in
//! row-major little-endian order of the header's dtype; the header records
//! name, shape and byte offset of each and the SHA-256 of the whole blob.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::NetConfig;
use super::generator::Generator;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MCMSRCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

/// Provenance recorded next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Hex SHA-256 of the serialized training configuration.
    pub train_config_hash: String,
    pub train_config: Option<serde_json::Value>,
    pub epoch: Option<usize>,
    pub val_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: NetConfig,
    pub dtype: String,
    pub meta: CheckpointMeta,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Load(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Load(format!("unsupported dtype `{other}`"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Load(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let dev = Device::Cpu;
    Ok(match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        _ => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
    })
}

/// Hex SHA-256 of any serializable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

pub fn save_checkpoint(path: &Path, generator: &Generator, meta: CheckpointMeta) -> Result<CheckpointHeader> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, var) in generator.params().iter() {
        let bytes = tensor_bytes(var.as_tensor())?;
        tensors.push(TensorEntry { name: name.to_string(), shape: var.dims().to_vec(), offset: blob.len(), bytes: bytes.len() });
        blob.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: generator.config().clone(),
        dtype: dtype_name(generator.dtype())?.to_string(),
        meta,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(header)
}

fn split_file(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Load("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Load("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Load(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!("format version {} is not supported", header.format_version)));
    }
    Ok((header, &body[len..]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    Ok(split_file(&bytes)?.0)
}

/// Field-by-field differences between two network configurations.
pub fn header_diff(expected: &NetConfig, found: &NetConfig) -> Vec<String> {
    let (a, b) = (serde_json::to_value(expected).unwrap_or_default(), serde_json::to_value(found).unwrap_or_default());
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        for k in keys {
            if a.get(k) != b.get(k) {
                diffs.push(format!(
                    "{k}: expected {}, found {}",
                    a.get(k).map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    b.get(k).map(|v| v.to_string()).unwrap_or_else(|| "-".into())
                ));
            }
        }
    }
    diffs
}

/// Load a generator, verifying the blob checksum and the tensor inventory.
pub fn load_checkpoint(path: &Path) -> Result<(Generator, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let (header, blob) = split_file(&bytes)?;
    let digest = hex::encode(Sha256::digest(blob));
    if digest != header.blob_sha256 {
        return Err(Error::Checksum(format!("weights hash {digest} does not match header {}", header.blob_sha256)));
    }
    let dtype = parse_dtype(&header.dtype)?;
    let generator = Generator::new(header.config.clone(), header.meta.seed, dtype)?;
    let expected: BTreeSet<&str> = generator.params().names().collect();
    let stored: BTreeSet<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != stored {
        let missing: Vec<_> = expected.difference(&stored).collect();
        let extra: Vec<_> = stored.difference(&expected).collect();
        return Err(Error::Load(format!("tensor set mismatch: missing {missing:?}, unexpected {extra:?}")));
    }
    for entry in &header.tensors {
        let end = entry.offset.checked_add(entry.bytes).filter(|e| *e <= blob.len());
        let Some(end) = end else {
            return Err(Error::Load(format!("tensor `{}` exceeds the blob", entry.name)));
        };
        let t = tensor_from_bytes(&blob[entry.offset..end], &entry.shape, dtype)?;
        generator.params().assign(&entry.name, &t).map_err(|e| Error::Load(e.to_string()))?;
    }
    Ok((generator, header))
}

/// Load and require a specific configuration, reporting every differing field.
pub fn load_checkpoint_expecting(path: &Path, expected: &NetConfig) -> Result<(Generator, CheckpointHeader)> {
    let header = read_header(path)?;
    let diffs = header_diff(expected, &header.config);
    if !diffs.is_empty() {
        return Err(Error::Load(format!("checkpoint configuration differs: {}", diffs.join("; "))));
    }
    load_checkpoint(path)
}
