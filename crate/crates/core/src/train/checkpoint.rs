//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    b"DFTRCKPT"
//! version  u32
//! digest   [u8; 32]   model-config digest
//! step     u64        optimizer steps taken
//! seed     u64        run seed; with `step` this fixes every random stream
//! params   table
//! velocity table      empty, or one entry per parameter in the same order
//!
//! table    u32 count, then per entry:
//!          u32 name length, utf-8 name, u32 rank, u32 extents,
//!          f32 payload, [u8; 32] SHA-256 of the payload bytes
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::Sgd;
use crate::config::model_digest;
use crate::data::pnm::write_atomic;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_digest: [u8; 32],
    pub step: u64,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
    pub velocity: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!(
                "truncated at byte {} reading {what}: need {n} bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| bad(format!("tensor name at byte {} is not utf-8", self.pos - len)))?
                .to_string();
            let rank = self.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| self.u32("tensor extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| bad(format!("tensor `{name}` extents {shape:?} overflow")))?;
            let payload = self.take(numel, "tensor payload")?;
            let sum = self.take(32, "tensor checksum")?;
            if Sha256::digest(payload).as_slice() != sum {
                return Err(bad(format!("checksum mismatch in tensor `{name}`")));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

fn write_table(out: &mut Vec<u8>, table: &[NamedTensor]) {
    out.extend((table.len() as u32).to_le_bytes());
    for t in table {
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend((d as u32).to_le_bytes());
        }
        let start = out.len();
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
        let sum = Sha256::digest(&out[start..]);
        out.extend(sum);
    }
}

fn named(store: &ParamStore<f32>) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(model: &ModelConfig, step: u64, seed: u64, params: &ParamStore<f32>, opt: &Sgd) -> Self {
        let velocity = params
            .iter()
            .zip(&opt.velocity)
            .map(|(p, v)| NamedTensor {
                name: p.name.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect();
        Checkpoint {
            model_digest: model_digest(model),
            step,
            seed,
            params: named(params),
            velocity,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.model_digest);
        out.extend(self.step.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        write_table(&mut out, &self.params);
        write_table(&mut out, &self.velocity);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(bad("bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("format version {version}, this build reads version {VERSION}")));
        }
        let model_digest = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let params = r.table("parameter count")?;
        let velocity = r.table("velocity count")?;
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes after byte {}", buf.len() - r.pos, r.pos)));
        }
        if !velocity.is_empty() && velocity.len() != params.len() {
            return Err(bad(format!("{} velocity buffers for {} parameters", velocity.len(), params.len())));
        }
        Ok(Checkpoint {
            model_digest,
            step,
            seed,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.model_digest != model_digest(model) {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was written for model config {}, current config is {}",
                hex::encode(&self.model_digest[..8]),
                hex::encode(&model_digest(model)[..8])
            )));
        }
        Ok(())
    }

    /// Copy parameter values into `store`; names and shapes must match exactly.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for t in &self.params {
            if store.find(&t.name).is_none() {
                return Err(bad(format!("unknown tensor `{}`", t.name)));
            }
        }
        if self.params.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for t in &self.params {
            let id = store.find(&t.name).expect("checked");
            let p = store.get_mut(id);
            if p.value.shape() != t.shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor `{}` has shape {:?} in the checkpoint, {:?} in the model",
                    t.name,
                    t.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(&t.shape, t.data.clone())?;
        }
        Ok(())
    }

    /// Parameters and optimizer state.
    pub fn restore(&self, store: &mut ParamStore<f32>, opt: &mut Sgd) -> Result<()> {
        self.load_params(store)?;
        if self.velocity.is_empty() {
            opt.velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            return Ok(());
        }
        opt.velocity = store
            .iter()
            .map(|p| {
                let v = self
                    .velocity
                    .iter()
                    .find(|v| v.name == p.name)
                    .ok_or_else(|| bad(format!("no velocity for `{}`", p.name)))?;
                Tensor::new(p.value.shape(), v.data.clone())
                    .map_err(|_| bad(format!("velocity for `{}` has shape {:?}", p.name, v.shape)))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}
