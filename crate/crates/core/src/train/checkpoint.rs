//! Binary checkpoint: `PRKT` magic, version, a JSON header describing the
//! architecture, then named little-endian `f32` tensor sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adamw::{AdamW, AdamWConfig};
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PRKT";
pub const CHECKPOINT_VERSION: u32 = 1;
const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    /// Class index to patent id.
    classes: Vec<String>,
    train: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub classes: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Rejects checkpoints whose architecture differs from `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let got = &self.params.config;
        if got.embed_dim != expected.embed_dim {
            return Err(Error::Checkpoint(format!(
                "embed_dim {} does not match expected {}",
                got.embed_dim, expected.embed_dim
            )));
        }
        if got != expected {
            return Err(Error::Checkpoint("architecture differs from the expected configuration".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.params.config.clone(),
            classes: self.classes.clone(),
            train: self.train_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut sections: Vec<(String, &Tensor)> = self.params.trainable();
        sections.extend(self.params.buffers());
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = self.params.trainable().into_iter().map(|(n, _)| n).collect();
            for (n, m) in names.iter().zip(&opt.m) {
                sections.push((format!("{M_PREFIX}{n}"), m));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                sections.push((format!("{V_PREFIX}{n}"), v));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, sections.len() as u32);
        for (name, t) in sections {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a PRKT checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::new();
        let (mut ms, mut vs) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("section `{name}` is too large")))?;
            let data = r
                .take(nbytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                ms.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                vs.push((rest.to_string(), t));
            } else {
                named.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last section".into()));
        }
        let params = ModelParams::from_named(&header.model, named)?;
        if header.classes.len() != header.model.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class names for {} classes",
                header.classes.len(),
                header.model.num_classes
            )));
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let order: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
                let pick = |list: &mut Vec<(String, Tensor)>, n: &str| {
                    let i = list
                        .iter()
                        .position(|(k, _)| k == n)
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{n}`")))?;
                    Ok::<_, Error>(list.swap_remove(i).1)
                };
                let m = order.iter().map(|n| pick(&mut ms, n)).collect::<Result<Vec<_>>>()?;
                let v = order.iter().map(|n| pick(&mut vs, n)).collect::<Result<Vec<_>>>()?;
                for ((n, p), (mm, vv)) in params.trainable().iter().zip(m.iter().zip(&v)) {
                    if mm.shape() != p.shape() || vv.shape() != p.shape() {
                        return Err(Error::Checkpoint(format!("optimizer moment shape mismatch for `{n}`")));
                    }
                }
                Some(AdamW {
                    config: h.config,
                    step: h.step,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            params,
            classes: header.classes,
            train_config: header.train,
            optimizer,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Lowercase hex SHA-256 of serialized checkpoint bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(load_checkpoint_with_fingerprint(path)?.0)
}

/// The checkpoint together with the [`fingerprint`] of the file it came from.
pub fn load_checkpoint_with_fingerprint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((Checkpoint::from_bytes(&bytes)?, fingerprint(&bytes)))
}

/// Loads and checks the architecture against `expected`.
pub fn load_checkpoint_matching(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.ensure_compatible(expected)?;
    Ok(ck)
}
