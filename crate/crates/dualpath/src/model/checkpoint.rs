//! Binary checkpoint files.
//!
//! Layout: magic, format version, training meta, config key-values, named
//! parameter records (value + momentum + frozen flag), named batch-norm
//! running statistics, then a trailing SHA-256 over everything before it.
//! Serialization order equals registration order, so saving a loaded model
//! reproduces the file byte for byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DualPathModel, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"DPCKPT";
const VERSION: u32 = 1;

/// Where a checkpoint sits in the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// 1 or 2.
    pub stage: u8,
    /// Fully completed epochs of that stage.
    pub epochs_done: u64,
    /// Run seed; resuming reuses it so the epoch streams line up.
    pub seed: u64,
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("bad utf8 in checkpoint".into()))
    }
}

/// Serialize a model and its training position.
pub fn checkpoint_bytes(model: &DualPathModel, meta: CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(meta.stage);
    w.u64(meta.epochs_done);
    w.u64(meta.seed);

    let kv = model.config.kv_pairs();
    w.u32(kv.len() as u32);
    for (k, v) in &kv {
        w.string(k);
        w.string(v);
    }

    w.u32(model.params.len() as u32);
    for (_, p) in model.params.iter() {
        w.string(&p.name);
        w.u8(u8::from(p.frozen));
        let shape = p.value.shape();
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u64(d as u64);
        }
        w.f64s(p.value.data());
        w.f64s(&p.momentum);
    }

    let bns = model.bn_entries();
    w.u32(bns.len() as u32);
    for entry in bns {
        w.string(&entry.name);
        w.u64(entry.state.channels() as u64);
        w.f64s(&entry.state.running_mean);
        w.f64s(&entry.state.running_var);
    }

    let digest = Sha256::digest(&w.bytes);
    w.bytes.extend_from_slice(&digest);
    w.bytes
}

pub fn save_checkpoint(model: &DualPathModel, meta: CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, meta))?;
    Ok(())
}

/// Parse checkpoint bytes back into a model and its meta.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(DualPathModel, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::Format("checkpoint checksum mismatch (truncated or corrupted)".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let meta = CheckpointMeta {
        stage: r.u8()?,
        epochs_done: r.u64()?,
        seed: r.u64()?,
    };

    let kv_count = r.u32()? as usize;
    let mut kv = Vec::with_capacity(kv_count);
    for _ in 0..kv_count {
        let k = r.string()?;
        let v = r.string()?;
        kv.push((k, v));
    }
    let config = ModelConfig::from_kv(&kv)?;

    // Rebuild the architecture, then overwrite every tensor from the file.
    let placeholder = Tensor::zeros(vec![config.vocab_size, config.word_embed_dim]);
    let mut model = DualPathModel::new(config, placeholder, &mut stream_rng(0, "checkpoint-load"))?;

    let param_count = r.u32()? as usize;
    if param_count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {param_count} parameters, architecture expects {}",
            model.params.len()
        )));
    }
    for (_, p) in model.params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::Format(format!(
                "parameter record {name:?} does not match expected {:?}",
                p.name
            )));
        }
        p.frozen = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if shape != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {shape:?}, architecture expects {:?}",
                p.value.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        let momentum = r.f64s(numel)?;
        let mut value = Tensor::new(shape, data)?;
        value.set_requires_grad(true);
        p.value = value;
        p.momentum = momentum;
    }

    let bn_count = r.u32()? as usize;
    if bn_count != model.bn_entries().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {bn_count} batch-norm records, architecture expects {}",
            model.bn_entries().len()
        )));
    }
    for entry in model.bn_entries_mut() {
        let name = r.string()?;
        if name != entry.name {
            return Err(Error::Format(format!(
                "batch-norm record {name:?} does not match expected {:?}",
                entry.name
            )));
        }
        let channels = r.u64()? as usize;
        if channels != entry.state.channels() {
            return Err(Error::Format(format!(
                "batch-norm {name:?} has {channels} channels, architecture expects {}",
                entry.state.channels()
            )));
        }
        entry.state.running_mean = r.f64s(channels)?;
        entry.state.running_var = r.f64s(channels)?;
    }

    if r.pos != body.len() {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(DualPathModel, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
