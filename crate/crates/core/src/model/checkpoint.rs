//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LOSACKPT" | u32 manifest_len | manifest (UTF-8 JSON) | blobs
//! ```
//!
//! The manifest is `{"tensors":[{"name","shape","dtype":"f32","offset","nbytes"}]}`
//! where `offset` is relative to the first blob byte. Tensors are stored as
//! row-major f32 and widened to f64 on load.
//!
//! Tensor names: `layer{i}.W` (weights), `layer{i}.B` / `layer{i}.A`
//! (adapters), `layer{i}.mask` (masks as 0.0/1.0).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{LosaError, Result};
use crate::linalg::Matrix;
use crate::masks::Mask;
use crate::model::LayerStack;

pub const MAGIC: &[u8; 8] = b"LOSACKPT";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: LayerStack,
    pub adapters: Option<Vec<Adapter>>,
    pub masks: Option<Vec<Mask>>,
}

/// Serializes named 2-D tensors into the container format.
pub fn encode_tensors(tensors: &[(String, &Matrix)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, m) in tensors {
        let offset = blob.len() as u64;
        for &v in m.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(LosaError::NonFinite(format!(
                    "tensor {name}: value {v} is not representable as f32"
                )));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: vec![m.rows(), m.cols()],
            dtype: "f32".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })?;
    let manifest_len = u32::try_from(manifest.len())
        .map_err(|_| LosaError::InvalidArgument("manifest exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses the container, validating every manifest entry against the blob region.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    if bytes.len() < HEADER_LEN {
        return Err(LosaError::Corrupt(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(LosaError::Corrupt("bad magic".into()));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let blob_start = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            LosaError::Corrupt(format!(
                "manifest length {manifest_len} runs past end of file ({} bytes)",
                bytes.len()
            ))
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
        .map_err(|e| LosaError::Corrupt(format!("manifest: {e}")))?;
    let blob = &bytes[blob_start..];

    let mut expected_end = 0u64;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(LosaError::Corrupt(format!(
                "tensor {}: unsupported dtype {:?}",
                t.name, t.dtype
            )));
        }
        let (rows, cols) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            other => {
                return Err(LosaError::Corrupt(format!(
                    "tensor {}: expected 2-D shape, got {other:?}",
                    t.name
                )))
            }
        };
        let count = rows.checked_mul(cols).ok_or_else(|| {
            LosaError::Corrupt(format!("tensor {}: shape overflow", t.name))
        })?;
        if t.nbytes != count as u64 * 4 {
            return Err(LosaError::Corrupt(format!(
                "tensor {}: nbytes {} does not match shape {rows}x{cols}",
                t.name, t.nbytes
            )));
        }
        let end = t
            .offset
            .checked_add(t.nbytes)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                LosaError::Corrupt(format!(
                    "tensor {}: bytes {}..{} exceed blob region of {} bytes (truncated?)",
                    t.name,
                    t.offset,
                    t.offset.saturating_add(t.nbytes),
                    blob.len()
                ))
            })?;
        expected_end = expected_end.max(end);
        let raw = &blob[t.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let m = Matrix::new(rows, cols, data)
            .map_err(|e| LosaError::Corrupt(format!("tensor {}: {e}", t.name)))?;
        out.push((t.name.clone(), m));
    }
    if expected_end != blob.len() as u64 {
        return Err(LosaError::Corrupt(format!(
            "blob region is {} bytes but manifest accounts for {expected_end}",
            blob.len()
        )));
    }
    Ok(out)
}

pub fn encode_checkpoint(
    stack: &LayerStack,
    adapters: Option<&[Adapter]>,
    masks: Option<&[Mask]>,
) -> Result<Vec<u8>> {
    let n = stack.len();
    for (what, len) in [
        ("adapters", adapters.map(<[Adapter]>::len)),
        ("masks", masks.map(<[Mask]>::len)),
    ] {
        if let Some(len) = len {
            if len != n {
                return Err(LosaError::InvalidArgument(format!(
                    "{len} {what} for {n} layers"
                )));
            }
        }
    }
    let mask_mats: Option<Vec<Matrix>> = masks.map(|ms| ms.iter().map(Mask::to_matrix).collect());
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for (i, layer) in stack.layers().iter().enumerate() {
        tensors.push((format!("layer{i}.W"), &layer.weight));
        if let Some(ads) = adapters {
            tensors.push((format!("layer{i}.B"), ads[i].b()));
            tensors.push((format!("layer{i}.A"), ads[i].a()));
        }
        if let Some(ms) = &mask_mats {
            tensors.push((format!("layer{i}.mask"), &ms[i]));
        }
    }
    encode_tensors(&tensors)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut tensors: std::collections::HashMap<String, Matrix> =
        decode_tensors(bytes)?.into_iter().collect();
    let mut weights = Vec::new();
    while let Some(w) = tensors.remove(&format!("layer{}.W", weights.len())) {
        weights.push(w);
    }
    if weights.is_empty() {
        return Err(LosaError::Corrupt("no layer0.W tensor".into()));
    }
    let n = weights.len();
    let stack = LayerStack::from_weights(weights)
        .map_err(|e| LosaError::Corrupt(format!("layer chain: {e}")))?;

    let adapters = if tensors.contains_key("layer0.B") {
        let mut ads = Vec::with_capacity(n);
        for (i, layer) in stack.layers().iter().enumerate() {
            let b = take(&mut tensors, &format!("layer{i}.B"))?;
            let a = take(&mut tensors, &format!("layer{i}.A"))?;
            if b.rows() != layer.c_out() || a.cols() != layer.c_in() {
                return Err(LosaError::Corrupt(format!(
                    "layer{i} adapter shapes {:?}/{:?} do not fit weight {:?}",
                    b.shape(),
                    a.shape(),
                    layer.weight.shape()
                )));
            }
            ads.push(
                Adapter::from_parts(b, a)
                    .map_err(|e| LosaError::Corrupt(format!("layer{i} adapter: {e}")))?,
            );
        }
        Some(ads)
    } else {
        None
    };

    let masks = if tensors.contains_key("layer0.mask") {
        let mut ms = Vec::with_capacity(n);
        for (i, layer) in stack.layers().iter().enumerate() {
            let m = take(&mut tensors, &format!("layer{i}.mask"))?;
            if m.shape() != layer.weight.shape() {
                return Err(LosaError::Corrupt(format!(
                    "layer{i} mask shape {:?} does not match weight {:?}",
                    m.shape(),
                    layer.weight.shape()
                )));
            }
            ms.push(
                Mask::from_matrix(&m)
                    .map_err(|e| LosaError::Corrupt(format!("layer{i}.mask: {e}")))?,
            );
        }
        Some(ms)
    } else {
        None
    };

    if let Some(extra) = tensors.keys().min() {
        return Err(LosaError::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        stack,
        adapters,
        masks,
    })
}

fn take(tensors: &mut std::collections::HashMap<String, Matrix>, name: &str) -> Result<Matrix> {
    tensors
        .remove(name)
        .ok_or_else(|| LosaError::Corrupt(format!("missing tensor {name}")))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    stack: &LayerStack,
    adapters: Option<&[Adapter]>,
    masks: Option<&[Mask]>,
) -> Result<()> {
    let bytes = encode_checkpoint(stack, adapters, masks)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LosaError::NotFound(path.to_path_buf()),
        _ => LosaError::Io(e),
    })?;
    decode_checkpoint(&bytes)
}
