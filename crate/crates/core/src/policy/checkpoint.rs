//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "RLVRCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     header, UTF-8 JSON:
//!               {"step", "policy_config", "vocab", "rng_state", "meta",
//!                "tensors": [{"name", "shape"}, ...]}
//! 20+H    8·N   tensor data, f64 little-endian, row-major, in header order
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! Encoding is canonical: decoding then re-encoding reproduces the input bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Params, Policy, PolicyConfig};
use super::vocab::Vocabulary;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RLVRCKPT";
pub const VERSION: u32 = 1;
const FIXED: usize = 8 + 4 + 8;
const TRAILER: usize = 32;
/// Largest header accepted on load.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    policy_config: PolicyConfig,
    vocab: Vec<String>,
    rng_state: Option<String>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub policy_config: PolicyConfig,
    pub vocab: Vec<String>,
    /// Serialised generator state, if the writer had one.
    pub rng_state: Option<String>,
    /// Free-form run information (config echo, provenance).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub const POLICY_PREFIX: &str = "policy.";

impl Checkpoint {
    /// A checkpoint holding `policy`'s parameters under the `policy.` prefix.
    pub fn from_policy(step: u64, policy: &Policy) -> Self {
        let mut c = Checkpoint {
            step,
            policy_config: policy.config.clone(),
            vocab: policy.vocab.tokens().to_vec(),
            rng_state: None,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        };
        c.push_params(POLICY_PREFIX, &policy.params);
        c
    }

    pub fn push_params(&mut self, prefix: &str, params: &Params) {
        for (n, t) in params.names.iter().zip(&params.tensors) {
            let t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid");
            self.tensors.push((format!("{prefix}{n}"), t));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors stored under `prefix`, in the order of `template`'s names.
    pub fn params(&self, prefix: &str, template: &Params) -> Result<Params> {
        let mut tensors = Vec::with_capacity(template.len());
        for (name, want) in template.names.iter().zip(&template.tensors) {
            let full = format!("{prefix}{name}");
            let t = self
                .tensor(&full)
                .ok_or_else(|| Error::Integrity {
                    path: String::new(),
                    msg: format!("missing tensor {full}"),
                })?;
            if t.shape() != want.shape() {
                return Err(Error::Integrity {
                    path: String::new(),
                    msg: format!("tensor {full} has shape {:?}, expected {:?}", t.shape(), want.shape()),
                });
            }
            tensors.push(t.clone().with_grad());
        }
        Ok(Params {
            names: template.names.clone(),
            tensors,
        })
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.vocab.clone()).or_else(|_| Vocabulary::bare(self.vocab.clone()))
    }

    /// Rebuilds the policy stored under the `policy.` prefix.
    pub fn policy(&self) -> Result<Policy> {
        self.policy_with_prefix(POLICY_PREFIX)
    }

    pub fn policy_with_prefix(&self, prefix: &str) -> Result<Policy> {
        let mut p = Policy::new(self.policy_config.clone(), self.vocabulary()?)?;
        p.params = self.params(prefix, &p.params)?;
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            policy_config: self.policy_config.clone(),
            vocab: self.vocab.clone(),
            rng_state: self.rng_state.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hb = serde_json::to_vec(&header).expect("header always serialises");
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(FIXED + hb.len() + 8 * n + TRAILER);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        out.extend_from_slice(&hb);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes and verifies a container. `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: String| Error::Integrity {
            path: origin.to_string(),
            msg,
        };
        if bytes.len() < FIXED + TRAILER {
            return Err(bad(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen as usize > body.len() - FIXED {
            return Err(bad(format!("header length {hlen} exceeds file")));
        }
        let hend = FIXED + hlen as usize;
        let header: Header = serde_json::from_slice(&body[FIXED..hend])
            .map_err(|e| bad(format!("header: {e}")))?;
        let data = &body[hend..];
        if data.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values".into()));
        }
        let available = data.len() / 8;
        let mut total = 0usize;
        for e in &header.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor {} is too large", e.name)))?;
            total = total
                .checked_add(n)
                .filter(|&t| t <= available)
                .ok_or_else(|| bad("tensor table exceeds data section".into()))?;
        }
        if total != available {
            return Err(bad(format!("{available} values stored, {total} declared")));
        }
        let mut names = std::collections::HashSet::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for e in header.tensors {
            if !names.insert(e.name.clone()) {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let v: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push((e.name, Tensor::new(e.shape, v)?));
        }
        Ok(Checkpoint {
            step: header.step,
            policy_config: header.policy_config,
            vocab: header.vocab,
            rng_state: header.rng_state,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes atomically: a sibling temporary file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}
