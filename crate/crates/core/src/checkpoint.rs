//! Parameter checkpoints: `DLNKCKPT`, a `u32` header length, a JSON header
//! (model kind, its config, parameter names and shapes), then every
//! parameter as little-endian `f64` in header order.

use std::path::Path;

use ndarray::IxDyn;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{DlinkError, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"DLNKCKPT";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save<C: Serialize>(path: impl AsRef<Path>, kind: &str, config: &C, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        params: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in store.values() {
        for x in v.as_standard_layout().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| DlinkError::io(path, e))
}

/// Reads a checkpoint of the given `kind`, returning its config and the
/// stored tensors by name.
pub fn load<C: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(C, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DlinkError::io(path, e))?;
    let fmt = |m: &str| DlinkError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.kind != kind {
        return Err(fmt(&format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let config: C = serde_json::from_value(header.config)?;
    let mut off = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let end = off + 8 * n;
        let chunk = bytes.get(off..end).ok_or_else(|| fmt("truncated payload"))?;
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_shape_vec(IxDyn(&shape), data).expect("shape")));
        off = end;
    }
    if off != bytes.len() {
        return Err(fmt("trailing bytes after payload"));
    }
    Ok((config, tensors))
}

/// Copies `tensors` into `store`, requiring identical names and shapes.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(DlinkError::Format(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        if store.names()[i] != name || store.values()[i].shape() != t.shape() {
            return Err(DlinkError::Format(format!(
                "parameter {i} mismatch: checkpoint {name} {:?}, model {} {:?}",
                t.shape(),
                store.names()[i],
                store.values()[i].shape()
            )));
        }
        store.values_mut()[i] = t;
    }
    Ok(())
}
