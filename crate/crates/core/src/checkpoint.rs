//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      b"MUSECKPT1"
//! header_len u32
//! header     UTF-8 JSON with sorted keys: config, num_relations, prior_dim, path_types
//! tensors    repeated until EOF:
//!            u32 name_len, name, u32 rank, rank x u32 dims, prod(dims) x f32
//! ```
//!
//! Parameters are held as `f64` in memory and rounded to `f32` on save.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, TrainConfig};
use crate::path::{PathStep, PathVocabulary};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MUSECKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    num_relations: usize,
    prior_dim: usize,
    path_types: Vec<Vec<PathStep>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model to bytes.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        num_relations: model.params.num_relations(),
        prior_dim: model.params.prior.prior_dim(),
        path_types: model.path_vocab.types().to_vec(),
    };
    // Round-tripping through Value sorts object keys, so equal models give
    // byte-identical headers.
    let header = serde_json::to_string(&serde_json::to_value(&header)?)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    for (name, t) in model.params.tensors() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;

    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if stored
            .insert(name.clone(), Tensor::from_vec(&shape, data))
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }

    let cfg = &header.config;
    let vocab = PathVocabulary::from_types(header.path_types);
    let mut params = ModelParams::zeros(
        header.num_relations,
        header.prior_dim,
        vocab.size(),
        cfg.hidden,
        cfg.k_iters,
    );
    for (name, slot) in params.tensors_mut() {
        let t = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(Model {
        params,
        path_vocab: vocab,
        config: header.config,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
