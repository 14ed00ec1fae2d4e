//! Bit-exact weight codec.
//!
//! A manifest lists `{name, shape, dtype}` per block; the payload is the
//! concatenation of little-endian values in manifest order. On the wire the
//! payload is base64 text next to the manifest. On disk a weight file is:
//!
//! ```text
//! b"FEDW" | u32 version | u32 header_len | header JSON | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::model::tensor::{DType, ModelWeights, TensorBlock, TensorValues};
use crate::{Error, Result};

pub const FILE_MAGIC: &[u8; 4] = b"FEDW";
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> Result<usize> {
        self.shape
            .iter()
            .try_fold(self.dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Codec(format!("block {} is too large", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct WeightManifest {
    pub entries: Vec<ManifestEntry>,
}

impl WeightManifest {
    pub fn payload_len(&self) -> Result<usize> {
        self.entries.iter().try_fold(0usize, |acc, e| {
            acc.checked_add(e.byte_len()?)
                .ok_or_else(|| Error::Codec("payload too large".into()))
        })
    }
}

pub fn encode_weights(w: &ModelWeights) -> (WeightManifest, Vec<u8>) {
    let mut entries = Vec::with_capacity(w.blocks().len());
    let mut bytes = Vec::new();
    for b in w.blocks() {
        entries.push(ManifestEntry {
            name: b.name().to_string(),
            shape: b.shape().to_vec(),
            dtype: b.dtype(),
        });
        match b.values() {
            TensorValues::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            TensorValues::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        }
    }
    (WeightManifest { entries }, bytes)
}

pub fn decode_weights(manifest: &WeightManifest, bytes: &[u8]) -> Result<ModelWeights> {
    let expected = manifest.payload_len()?;
    if expected != bytes.len() {
        return Err(Error::Codec(format!(
            "manifest describes {expected} bytes, payload has {}",
            bytes.len()
        )));
    }
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n = e.byte_len()?;
        let chunk = &bytes[offset..offset + n];
        offset += n;
        let values = match e.dtype {
            DType::F32 => TensorValues::F32(
                chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            DType::F64 => TensorValues::F64(
                chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        };
        blocks.push(
            TensorBlock::new(e.name.clone(), e.shape.clone(), values)
                .map_err(|err| Error::Codec(err.to_string()))?,
        );
    }
    ModelWeights::new(blocks).map_err(|err| Error::Codec(err.to_string()))
}

/// Weights as they travel inside a JSON envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireWeights {
    pub manifest: WeightManifest,
    /// Base64 (standard alphabet, padded) payload.
    pub data: String,
}

impl WireWeights {
    pub fn encode(w: &ModelWeights) -> Self {
        let (manifest, bytes) = encode_weights(w);
        Self {
            manifest,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<ModelWeights> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Codec(format!("bad base64 payload: {e}")))?;
        decode_weights(&self.manifest, &bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    manifest: WeightManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

pub fn encode_weight_file(w: &ModelWeights, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let (manifest, payload) = encode_weights(w);
    let header = serde_json::to_vec(&FileHeader { manifest, meta })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Codec("weight file header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(FILE_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Returns the weights and the optional metadata document.
pub fn decode_weight_file(bytes: &[u8]) -> Result<(ModelWeights, Option<serde_json::Value>)> {
    if bytes.len() < 12 || &bytes[..4] != FILE_MAGIC {
        return Err(Error::Codec("not a weight file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FILE_VERSION {
        return Err(Error::Codec(format!("unsupported weight file version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(Error::Codec("truncated weight file header".into()));
    }
    let header: FileHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Codec(format!("bad weight file header: {e}")))?;
    let weights = decode_weights(&header.manifest, &body[header_len..])?;
    Ok((weights, header.meta))
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} has no file name", path.display()))))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

pub fn write_weight_file(path: &Path, w: &ModelWeights, meta: Option<serde_json::Value>) -> Result<()> {
    write_atomic(path, &encode_weight_file(w, meta)?)
}

pub fn read_weight_file(path: &Path) -> Result<ModelWeights> {
    Ok(decode_weight_file(&fs::read(path)?)?.0)
}
