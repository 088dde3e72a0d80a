//! MLTB weight container.
//!
//! Layout: `MLTB1\n`, a little-endian `u64` header length, the UTF-8 JSON
//! header, zero padding up to a 64-byte boundary, then each tensor as raw
//! little-endian `f32` values (row-major) padded to 64 bytes. Tensor offsets
//! in the header are relative to the start of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expected_tensors, LayerWeights, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MLTB_MAGIC: &[u8; 6] = b"MLTB1\n";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a bundle to container bytes.
pub fn write_model(model: &ModelBundle<f32>) -> Result<Vec<u8>> {
    model.validate()?;
    let tensors = model.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, dims, values) in &tensors {
        entries.push(TensorEntry { name: name.clone(), dims: dims.clone(), offset: offset as u64 });
        offset = align_up(offset + values.len() * 4);
    }
    let header = Header { format: "MLTB".into(), version: 1, config: model.config.clone(), tensors: entries };
    let json = serde_json::to_vec(&header)?;

    let data_start = align_up(MLTB_MAGIC.len() + 8 + json.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MLTB_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for (_, _, values) in &tensors {
        for v in values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align_up(out.len()), 0);
    }
    Ok(out)
}

pub fn save_model(model: &ModelBundle<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

/// Parses and fully validates container bytes.
pub fn read_model(bytes: &[u8]) -> Result<ModelBundle<f32>> {
    if bytes.len() < MLTB_MAGIC.len() || &bytes[..MLTB_MAGIC.len()] != MLTB_MAGIC {
        return Err(Error::MalformedHeader("missing MLTB1 magic".into()));
    }
    let len_at = MLTB_MAGIC.len();
    let len_bytes: [u8; 8] = bytes
        .get(len_at..len_at + 8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::MalformedHeader("missing header length".into()))?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let json_start = len_at + 8;
    let json = bytes
        .get(json_start..json_start.saturating_add(json_len))
        .ok_or_else(|| Error::MalformedHeader(format!("header length {json_len} exceeds file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::MalformedHeader(format!("header json: {e}")))?;
    if header.format != "MLTB" || header.version != 1 {
        return Err(Error::MalformedHeader(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let config = header.config;
    config.validate()?;

    let expected = expected_tensors(&config);
    if expected.len() != header.tensors.len() {
        return Err(Error::MalformedHeader(format!(
            "tensor index lists {} tensors, config requires {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let data_start = align_up(json_start + json_len);
    let mut payloads: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for ((name, dims), entry) in expected.into_iter().zip(&header.tensors) {
        if entry.name != name {
            return Err(Error::MalformedHeader(format!("expected tensor {name}, found {}", entry.name)));
        }
        if entry.dims != dims {
            return Err(Error::ShapeMismatch { name, expected: dims, found: entry.dims.clone() });
        }
        if entry.offset as usize % ALIGN != 0 {
            return Err(Error::MalformedHeader(format!("tensor {name}: offset {} not 64-byte aligned", entry.offset)));
        }
        let count: usize = dims.iter().product();
        let start = data_start as u64 + entry.offset;
        let needed = count as u64 * 4;
        let available = (bytes.len() as u64).saturating_sub(start);
        if available < needed {
            return Err(Error::Truncated { name, offset: start, needed, available });
        }
        let raw = &bytes[start as usize..(start + needed) as usize];
        let mut values = Vec::with_capacity(count);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFinite { name, offset: start + 4 * i as u64 });
            }
            values.push(v);
        }
        payloads.push(values);
    }

    let d = config.d_model;
    let mut it = payloads.into_iter();
    let mut next = || it.next().expect("payload count checked");
    let token_embedding = Matrix::from_vec(config.vocab_size, d, next());
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: next(),
            wq: Matrix::from_vec(d, d, next()),
            wk: Matrix::from_vec(d, d, next()),
            wv: Matrix::from_vec(d, d, next()),
            wo: Matrix::from_vec(d, d, next()),
            ffn_norm: next(),
            up_proj: Matrix::from_vec(config.d_ff, d, next()),
            gate_proj: Matrix::from_vec(config.d_ff, d, next()),
            down_proj: Matrix::from_vec(d, config.d_ff, next()),
        });
    }
    let final_norm = next();
    let output_head = (!config.tie_embeddings).then(|| Matrix::from_vec(d, config.vocab_size, next()));
    let bundle = ModelBundle { config, token_embedding, layers, final_norm, output_head };
    bundle.validate()?;
    Ok(bundle)
}
