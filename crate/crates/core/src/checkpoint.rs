//! Single-file checkpoints.
//!
//! Layout: the magic line `SITAR-CKPT-1\n`, a little-endian `u64` giving the
//! length of a JSON header, the header itself, then every tensor as raw
//! little-endian `f64` values in header order (parameters first, then the
//! optimizer's first and second moments when present).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderSpec, Param, ParamSet, ReferenceEncoder};
use crate::error::{Result, SitarError};
use crate::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8] = b"SITAR-CKPT-1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: EncoderSpec,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ReferenceEncoder,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
}

pub fn encode_checkpoint(model: &ReferenceEncoder, optimizer: Option<&AdamW>, epoch: usize) -> Vec<u8> {
    let params = model.params();
    let header = Header {
        spec: model.spec().clone(),
        epoch,
        tensors: params
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                decay: p.decay,
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            config: o.config.clone(),
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + params.count() * 8 * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &params.params {
        push(&p.data);
    }
    if let Some(o) = optimizer {
        for t in o.m.iter().chain(&o.v) {
            push(t);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| SitarError::format(path, m);
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("missing SITAR-CKPT-1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut data = &rest[header_len..];
    let mut take = |n: usize| -> Result<Vec<f64>> {
        if data.len() < n * 8 {
            return Err(bad("truncated tensor data"));
        }
        let (head, tail) = data.split_at(n * 8);
        data = tail;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut params = ParamSet::default();
    for t in &header.tensors {
        let n = t.shape.iter().product();
        params.params.push(Param {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: take(n)?,
            decay: t.decay,
        });
    }
    let optimizer = match header.optimizer {
        Some(entry) => {
            let sizes: Vec<usize> = params.params.iter().map(|p| p.data.len()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some(AdamW {
                config: entry.config,
                step: entry.step,
                m,
                v,
            })
        }
        None => None,
    };
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = ReferenceEncoder::from_params(header.spec, params)?;
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(
    model: &ReferenceEncoder,
    optimizer: Option<&AdamW>,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| SitarError::io(parent, e))?;
        }
    }
    let bytes = encode_checkpoint(model, optimizer, epoch);
    let mut file = fs::File::create(path).map_err(|e| SitarError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| SitarError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SitarError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
