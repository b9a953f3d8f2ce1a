//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every parameter's values as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Mode, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub const FORMAT: &str = "diffmavil-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub mode: Mode,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, store: &ParamStore, mode: Mode, step: u64) -> Result<(), CheckpointError> {
    let header = Header {
        format: FORMAT.into(),
        mode,
        step,
        tensors: store
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for p in store.params() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint into `store`, which must hold the same names and shapes.
pub fn load(path: &Path, store: &mut ParamStore) -> Result<Header, CheckpointError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT {
        return Err(CheckpointError::Mismatch(format!("unknown format {:?}", header.format)));
    }
    if header.tensors.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors in file, {} in model",
            header.tensors.len(),
            store.len()
        )));
    }
    for (entry, param) in header.tensors.iter().zip(store.params()) {
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} {:?}, found {} {:?}",
                param.name,
                param.value.shape(),
                entry.name,
                entry.shape
            )));
        }
    }
    // Read everything before touching the store so a truncated file leaves
    // the model unchanged.
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let expected = 8 * store.num_scalars();
    if data.len() != expected {
        return Err(CheckpointError::Mismatch(format!(
            "{} data bytes, expected {expected}",
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for param in store.params_mut() {
        param
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = values.next().expect("length checked"));
    }
    Ok(header)
}
