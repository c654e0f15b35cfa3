//! Self-describing checkpoint files.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header
//! (config + tensor manifest), raw little-endian f32 tensor data in manifest
//! order, and a trailing SHA-256 over everything before it. The hash is the
//! identity used by replay tests: same seed, same bytes, same hash.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{tensor_specs, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"TYLBCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorSpec>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

fn expected_header(config: &ModelConfig) -> Header {
    Header {
        config: config.clone(),
        dtype: "f32".to_string(),
        tensors: tensor_specs(config)
            .into_iter()
            .map(|(name, shape)| TensorSpec { name, shape })
            .collect(),
    }
}

/// Writes the model and returns the hex SHA-256 recorded in the file.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<String, ModelError> {
    let header = expected_header(&model.config);
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_json);
    for tensor in model.params.tensors() {
        for &v in tensor {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = Sha256::digest(&body);

    let mut file = std::fs::File::create(path)?;
    file.write_all(&body)?;
    file.write_all(&hash)?;
    Ok(hex(&hash))
}

/// Reads a checkpoint, verifying magic, version, trailing hash, and that the
/// tensor manifest matches the embedded config. Returns the model and the
/// file's hash.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, String), ModelError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(ModelError::Checkpoint("file too short".into()));
    }
    let (body, stored_hash) = raw.split_at(raw.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != stored_hash {
        return Err(ModelError::Checkpoint("hash mismatch: file corrupt".into()));
    }
    if &body[..8] != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if body.len() < 20 + header_len {
        return Err(ModelError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(ModelError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let expected = expected_header(&header.config);
    if header.tensors != expected.tensors {
        return Err(ModelError::Checkpoint(
            "tensor manifest does not match config".into(),
        ));
    }

    let mut model = Model::<f32>::init(header.config, 0)?;
    let mut offset = 20 + header_len;
    for (slice, spec) in model.params.tensors_mut().into_iter().zip(&header.tensors) {
        let count: usize = spec.shape.iter().product();
        debug_assert_eq!(slice.len(), count);
        let need = count * 4;
        if body.len() < offset + need {
            return Err(ModelError::Checkpoint(format!(
                "truncated tensor data at {}",
                spec.name
            )));
        }
        for (i, v) in slice.iter_mut().enumerate() {
            let at = offset + i * 4;
            *v = f32::from_le_bytes(body[at..at + 4].try_into().unwrap());
        }
        offset += need;
    }
    if offset != body.len() {
        return Err(ModelError::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((model, hex(&actual)))
}

/// Hash of an existing checkpoint file without loading the tensors.
pub fn checkpoint_hash(path: &Path) -> Result<String, ModelError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 32 {
        return Err(ModelError::Checkpoint("file too short".into()));
    }
    let (body, stored) = raw.split_at(raw.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != stored {
        return Err(ModelError::Checkpoint("hash mismatch: file corrupt".into()));
    }
    Ok(hex(&actual))
}

fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
