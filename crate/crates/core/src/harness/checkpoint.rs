//! Binary checkpoints.
//!
//! ```text
//! b"FGGv1"
//! u32 LE        header length in bytes
//! header        JSON {"model": ModelConfig, "encoder": Encoder, "tensors": [{"name", "shape"}]}
//! f64 LE data   every tensor's values, in header order
//! ```
//!
//! Loading rebuilds the model from its config and then overwrites each
//! parameter by name, so the layout of the parameter set never has to be
//! serialized.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Encoder;
use crate::reader::{Model, ModelConfig};

pub const MAGIC: &[u8; 5] = b"FGGv1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    encoder: Encoder,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, encoder: &Encoder) -> Result<Vec<u8>> {
    let ps = &model.params;
    let header = Header {
        model: model.config.clone(),
        encoder: encoder.clone(),
        tensors: ps
            .ids()
            .map(|id| TensorEntry {
                name: ps.name(id).to_owned(),
                shape: ps.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(json.len() + 8 * ps.num_elements() + 9);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for id in ps.ids() {
        for x in ps.get(id).data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Encoder)> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("unknown magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let len = u32::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];

    let mut model = Model::new(header.model)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        let t = model.params.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        for x in t.data_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated data in {}", entry.name)))?;
            *x = f64::from_le_bytes(b);
        }
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok((model, header.encoder))
}

pub fn save(path: &Path, model: &Model, encoder: &Encoder) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model, encoder)?)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Encoder)> {
    from_bytes(&fs::read(path)?)
}
