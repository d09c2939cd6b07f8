//! `HZMD` model checkpoints.
//!
//! Layout (little-endian): magic `HZMD`, format version `u32`, header length
//! `u64`, UTF-8 JSON header (config, ordered parameter and batch-norm
//! manifest with shapes, free-form metadata), then raw `f64` payloads in
//! manifest order. Each batch-norm layer contributes running mean, running
//! variance, gamma and beta, in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::UNetConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::layers::BatchNormState;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HZMD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    path: String,
    channels: usize,
    eps: f64,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    params: Vec<ParamEntry>,
    bn: Vec<BnEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn checkpoint_to_bytes(model: &Model, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        bn: model
            .bn_paths()
            .iter()
            .zip(model.bn_states())
            .map(|(path, s)| BnEntry {
                path: path.clone(),
                channels: s.channels,
                eps: s.eps,
                momentum: s.momentum,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header is plain data");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.params() {
        put(p.value.data());
    }
    for s in model.bn_states() {
        put(&s.running_mean);
        put(&s.running_var);
        put(&s.gamma);
        put(&s.beta);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected HZMD"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let header_len =
        u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header_at = r.pos as u64;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format(header_at, format!("invalid header json: {e}")))?;
    let template = Model::build(&header.config)
        .map_err(|e| Error::format(header_at, format!("header config: {e}")))?;
    let expected: Vec<(&str, &[usize])> = template
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.value.shape()))
        .collect();
    let listed: Vec<(&str, &[usize])> = header
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.shape.as_slice()))
        .collect();
    if expected != listed {
        return Err(Error::format(
            header_at,
            "parameter manifest does not match the configured network",
        ));
    }
    if header.bn.len() != template.bn_paths().len()
        || header
            .bn
            .iter()
            .zip(template.bn_paths())
            .any(|(e, p)| &e.path != p)
    {
        return Err(Error::format(
            header_at,
            "batch-norm manifest does not match the configured network",
        ));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n = entry.shape.iter().product();
        params.push(Tensor::new(&entry.shape, r.f64s(n, &entry.name)?)?);
    }
    let mut bn = Vec::with_capacity(header.bn.len());
    for entry in &header.bn {
        let c = entry.channels;
        let state = BatchNormState {
            channels: c,
            running_mean: r.f64s(c, &entry.path)?,
            running_var: r.f64s(c, &entry.path)?,
            gamma: r.f64s(c, &entry.path)?,
            beta: r.f64s(c, &entry.path)?,
            eps: entry.eps,
            momentum: entry.momentum,
        };
        bn.push(state);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let model = Model::from_parts(&header.config, params, bn)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: &serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
