//! Versioned binary checkpoints.
//!
//! Format: magic `LGEO1`, `u32` version, a JSON meta block (model config +
//! the curriculum stage that produced the file), then named parameter blobs
//! in `ParamStore` order. All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 5] = b"LGEO1";
const VERSION: u32 = 1;

/// Which pipeline phase produced a checkpoint. Stage gating reads this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Serialize, Deserialize)]
pub enum StageTag {
    Init = 0,
    Stage1 = 1,
    Stage2 = 2,
    Stage3 = 3,
    Rl = 4,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    stage: StageTag,
}

pub fn save(model: &Model, stage: StageTag, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        config: model.cfg.clone(),
        stage,
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &extent in p.value.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, StageTag)> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor { bytes: &bytes, at: 0 };
    let magic = r.take(5)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            &magic[..magic.len().min(5)],
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    meta.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params
            .insert(&name, value, trainable)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blobs".into()));
    }

    // Parameter inventory must match a fresh model of the same config.
    let reference = Model::new(meta.config.clone())?;
    if reference.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match config ({} expected)",
            params.len(),
            reference.params.len()
        )));
    }
    for ((rn, rp), (ln, lp)) in reference.params.iter().zip(params.iter()) {
        if rn != ln || rp.value.shape() != lp.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {ln} does not match expected {rn} {:?}",
                rp.value.shape()
            )));
        }
    }

    let model = Model {
        cfg: meta.config,
        vocab: reference.vocab,
        params,
    };
    Ok((model, meta.stage))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
