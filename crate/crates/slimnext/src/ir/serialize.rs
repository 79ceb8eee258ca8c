//! Model container format.
//!
//! Layout: 4 magic bytes `CXM1`, a little-endian u32 header length, a JSON
//! header, then the raw payload. The payload is every fp32 parameter as
//! little-endian bytes in name order followed by every int8 parameter in
//! name order; the header records shapes, quantization metadata, the
//! payload length, and a SHA-256 checksum of the payload. Saving the same
//! model twice produces identical bytes.

use super::{LayerNode, Model, ModelMeta, QuantizedParam};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"CXM1";
pub const FORMAT_VERSION: u32 = 1;

const CHUNK: usize = 16384;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct QuantizedEntry {
    name: String,
    shape: Vec<usize>,
    scale: f32,
    zero_point: i32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    metadata: ModelMeta,
    nodes: Vec<LayerNode>,
    params: Vec<ParamEntry>,
    quantized: Vec<QuantizedEntry>,
    payload_len: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_len(model: &Model) -> u64 {
    let fp32: u64 = model.params.values().map(|t| 4 * t.numel() as u64).sum();
    let int8: u64 = model.quantized_params.values().map(|q| q.values.numel() as u64).sum();
    fp32 + int8
}

/// Stream the payload bytes through `sink` without materializing the whole
/// payload in memory.
fn for_each_payload_chunk(model: &Model, sink: &mut dyn FnMut(&[u8]) -> Result<()>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(CHUNK + 4);
    for tensor in model.params.values() {
        for &v in tensor.f32s()? {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= CHUNK {
                sink(&buf)?;
                buf.clear();
            }
        }
    }
    for q in model.quantized_params.values() {
        for &v in q.values.i8s()? {
            buf.push(v as u8);
            if buf.len() >= CHUNK {
                sink(&buf)?;
                buf.clear();
            }
        }
    }
    if !buf.is_empty() {
        sink(&buf)?;
    }
    Ok(())
}

fn header_for(model: &Model, sha256: String) -> Header {
    Header {
        version: FORMAT_VERSION,
        metadata: model.metadata.clone(),
        nodes: model.nodes.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        quantized: model
            .quantized_params
            .iter()
            .map(|(name, q)| QuantizedEntry {
                name: name.clone(),
                shape: q.values.shape().to_vec(),
                scale: q.scale,
                zero_point: q.zero_point,
            })
            .collect(),
        payload_len: payload_len(model),
        sha256,
    }
}

fn encode_header(header: &Header) -> Result<Vec<u8>> {
    serde_json::to_vec(header).map_err(|e| Error::internal(format!("header encoding failed: {e}")))
}

/// The exact size in bytes a save of this model would produce. The checksum
/// is a fixed-width hex string, so the size is known without hashing.
pub fn model_size_bytes(model: &Model) -> Result<u64> {
    let header = encode_header(&header_for(model, "0".repeat(64)))?;
    Ok(8 + header.len() as u64 + payload_len(model))
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;

    let mut hasher = Sha256::new();
    for_each_payload_chunk(model, &mut |chunk| {
        hasher.update(chunk);
        Ok(())
    })?;
    let header = encode_header(&header_for(model, hex(&hasher.finalize())))?;
    if header.len() > u32::MAX as usize {
        return Err(Error::internal("header exceeds the u32 length field"));
    }

    let ioerr = |e: std::io::Error| Error::Io(path.display().to_string(), e);
    let mut w = BufWriter::new(File::create(path).map_err(ioerr)?);
    w.write_all(&MAGIC).map_err(ioerr)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(ioerr)?;
    w.write_all(&header).map_err(ioerr)?;
    for_each_payload_chunk(model, &mut |chunk| w.write_all(chunk).map_err(ioerr))?;
    w.flush().map_err(ioerr)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let ioerr = |e: std::io::Error| Error::Io(path.display().to_string(), e);
    let file_len = std::fs::metadata(path).map_err(ioerr)?.len();
    if file_len < 8 {
        return Err(FormatError::TruncatedPayload { expected: 8, found: file_len }.into());
    }
    let mut r = BufReader::new(File::open(path).map_err(ioerr)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ioerr)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(ioerr)?;
    let header_len = u32::from_le_bytes(len_bytes) as u64;
    if file_len < 8 + header_len {
        return Err(
            FormatError::TruncatedPayload { expected: 8 + header_len, found: file_len }.into()
        );
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(ioerr)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| FormatError::BadHeader(format!("header is not valid JSON: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: header.version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let expected_total = 8 + header_len + header.payload_len;
    if file_len < expected_total {
        return Err(
            FormatError::TruncatedPayload { expected: expected_total, found: file_len }.into()
        );
    }
    if file_len > expected_total {
        return Err(FormatError::BadHeader(format!(
            "file carries {} bytes beyond the declared payload",
            file_len - expected_total
        ))
        .into());
    }

    let mut names: BTreeSet<&str> = BTreeSet::new();
    for name in header
        .params
        .iter()
        .map(|p| p.name.as_str())
        .chain(header.quantized.iter().map(|q| q.name.as_str()))
    {
        if !names.insert(name) {
            return Err(FormatError::BadHeader(format!("duplicate parameter entry {name}")).into());
        }
    }

    let checked_numel = |name: &str, shape: &[usize]| -> Result<usize> {
        shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::BadHeader(format!("shape overflow in {name}")).into())
    };

    let mut hasher = Sha256::new();
    let mut params = BTreeMap::new();
    for entry in &header.params {
        let numel = checked_numel(&entry.name, &entry.shape)?;
        let mut bytes = vec![0u8; numel * 4];
        read_fully(&mut r, &mut bytes, path)?;
        hasher.update(&bytes);
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    let mut quantized_params = BTreeMap::new();
    for entry in &header.quantized {
        let numel = checked_numel(&entry.name, &entry.shape)?;
        let mut bytes = vec![0u8; numel];
        read_fully(&mut r, &mut bytes, path)?;
        hasher.update(&bytes);
        let data: Vec<i8> = bytes.iter().map(|&b| b as i8).collect();
        quantized_params.insert(
            entry.name.clone(),
            QuantizedParam {
                values: Tensor::from_i8(&entry.shape, data)?,
                scale: entry.scale,
                zero_point: entry.zero_point,
            },
        );
    }
    if hex(&hasher.finalize()) != header.sha256 {
        return Err(FormatError::ChecksumMismatch.into());
    }

    let model =
        Model { nodes: header.nodes, params, quantized_params, metadata: header.metadata };
    model.validate().map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok(model)
}

fn read_fully(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(FormatError::TruncatedPayload { expected: buf.len() as u64, found: 0 })
        }
        _ => Error::Io(path.display().to_string(), e),
    })
}
