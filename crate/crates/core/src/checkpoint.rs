//! Versioned binary checkpoints for a backbone, optionally with a prompt
//! pool and a classifier head.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "VQPCKPT\0" | version u32
//! header: count u32, then (key: u16 len + utf8, value u64) pairs
//! blobs:  count u32, then (name: u16 len + utf8, rank u32, dims u64 * rank, f64 * numel)
//! ```
//!
//! Backbone blobs come first in declaration order, followed by `prompt.P`,
//! `prompt.K`, `head.weight` and `head.bias` when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::cil::ClassifierHead;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::prompt::PromptPool;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VQPCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: FrozenBackbone,
    pub pool: Option<PromptPool>,
    pub head: Option<ClassifierHead>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_name(out, name);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_name(r: &mut Reader<'_>, what: &str) -> Result<String> {
    let len = u16::from_le_bytes(r.take(2, what)?.try_into().unwrap()) as usize;
    let at = r.offset();
    let bytes = r.take(len, what)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not utf-8")))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let cfg = &self.backbone.config;
        let mask = cfg.prompt_blocks.iter().fold(0u64, |m, &b| m | (1 << b));
        let (pool_size, prompt_len) = self.pool.as_ref().map_or((0, 0), |p| (p.size(), p.prompt_len()));
        let header: [(&str, u64); 11] = [
            ("depth", cfg.depth as u64),
            ("d_model", cfg.d_model as u64),
            ("heads", cfg.heads as u64),
            ("seq_len", cfg.seq_len as u64),
            ("d_ff", cfg.d_ff as u64),
            ("token_dim", cfg.token_dim as u64),
            ("prompt_blocks", mask),
            ("frozen", self.backbone.is_frozen() as u64),
            ("pool_size", pool_size as u64),
            ("prompt_len", prompt_len as u64),
            ("head_classes", self.head.as_ref().map_or(0, |h| h.classes() as u64)),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        for (k, v) in header {
            put_name(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut blobs: Vec<(String, &Tensor)> = self.backbone.named_parameters();
        if let Some(p) = &self.pool {
            blobs.push(("prompt.P".into(), &p.pool));
            blobs.push(("prompt.K".into(), &p.keys));
        }
        if let Some(h) = &self.head {
            blobs.push(("head.weight".into(), &h.weight));
            blobs.push(("head.bias".into(), &h.bias));
        }
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs {
            put_blob(&mut out, &name, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let mut header = BTreeMap::new();
        for _ in 0..r.u32("header count")? {
            let key = read_name(&mut r, "header key")?;
            header.insert(key, r.u64("header value")?);
        }
        let field = |k: &str| {
            header
                .get(k)
                .map(|&v| v as usize)
                .ok_or_else(|| Error::format(12, format!("header lacks {k}")))
        };
        let mask = field("prompt_blocks")?;
        let config = BackboneConfig {
            depth: field("depth")?,
            d_model: field("d_model")?,
            heads: field("heads")?,
            seq_len: field("seq_len")?,
            d_ff: field("d_ff")?,
            token_dim: field("token_dim")?,
            prompt_blocks: (0..64).filter(|b| mask >> b & 1 == 1).collect(),
        };
        let frozen = field("frozen")? != 0;
        let pool_size = field("pool_size")?;
        let prompt_len = field("prompt_len")?;
        let head_classes = field("head_classes")?;

        let mut blobs = BTreeMap::new();
        let mut names = Vec::new();
        for _ in 0..r.u32("blob count")? {
            let name = read_name(&mut r, "blob name")?;
            let rank = r.u32("blob rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("blob dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let at = r.offset();
            let numel = numel.ok_or_else(|| Error::format(at, format!("blob {name} is impossibly large")))?;
            let data = r.f64s(numel, "blob values")?;
            names.push(name.clone());
            blobs.insert(name, Tensor::new(shape, data)?);
        }
        r.finish()?;

        let pool = if pool_size > 0 {
            let p = blobs.remove("prompt.P");
            let k = blobs.remove("prompt.K");
            match (p, k) {
                (Some(p), Some(k)) => {
                    let pool = PromptPool::from_parts(p, k)?;
                    if pool.size() != pool_size || pool.prompt_len() != prompt_len {
                        return Err(Error::contract("prompt pool blobs disagree with the header"));
                    }
                    Some(pool)
                }
                _ => return Err(Error::contract("header announces a prompt pool but its blobs are missing")),
            }
        } else {
            None
        };
        let head = if head_classes > 0 {
            match (blobs.remove("head.weight"), blobs.remove("head.bias")) {
                (Some(w), Some(b)) => Some(ClassifierHead::from_parts(w, b)?),
                _ => return Err(Error::contract("header announces a head but its blobs are missing")),
            }
        } else {
            None
        };
        let backbone = FrozenBackbone::from_parameters(config, blobs, frozen)?;
        let expected: Vec<String> = backbone.named_parameters().into_iter().map(|(n, _)| n).collect();
        if names[..expected.len().min(names.len())] != expected[..] {
            return Err(Error::contract("backbone blobs are not in declaration order"));
        }
        Ok(Self { backbone, pool, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
