//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "GGCK"  u32 version (1)
//! u32 config length, config text (`key = value` lines, UTF-8)
//! u64 step, u64 data-order PRNG state at epoch start, u64 epoch start step
//! u32 tensor count, then per tensor:
//!     u16 name length, name (UTF-8), u8 dtype (0 f32, 1 f64), u8 rank,
//!     rank x u64 dims, payload
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Net, ParamStore};
use crate::tensor::{DType, Float, RunningStats, Tensor};

use super::optim::RmsPropState;
use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"GGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated in {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume a run or to run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    /// Data-order PRNG state at the start of the current epoch.
    pub rng_state: u64,
    pub epoch_start_step: u64,
    pub params: ParamStore<f32>,
    pub opt_g: RmsPropState<f32>,
    pub opt_d: RmsPropState<f32>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for net in Net::ALL {
        let p = ck.params.net(net);
        for (k, t) in &p.params {
            out.push((format!("{net}.{k}"), t));
        }
        for (k, s) in &p.stats {
            out.push((format!("{net}.{k}.running_mean"), &s.mean));
            out.push((format!("{net}.{k}.running_var"), &s.var));
        }
    }
    for (prefix, st) in [("opt_g", &ck.opt_g), ("opt_d", &ck.opt_d)] {
        for (kind, map) in [("acc", &st.acc), ("mom", &st.mom)] {
            for ((net, k), t) in map {
                out.push((format!("{prefix}.{kind}.{net}.{k}"), t));
            }
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let text = ck.config.to_text();
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    for v in [ck.step, ck.rng_state, ck.epoch_start_step] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let tensors = named_tensors(ck);
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(<f32 as Float>::DTYPE.tag());
        b.push(t.shape().len() as u8);
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            v.write_le(&mut b);
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what())),
        }
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_tensor(r: &mut Reader<'_>, index: usize) -> Result<(String, Tensor<f32>)> {
    let name_len = r.u16(&|| format!("name length of tensor #{index}"))? as usize;
    let name_bytes = r.take(name_len, &|| format!("name of tensor #{index}"))?;
    let name = String::from_utf8(name_bytes.to_vec())
        .map_err(|_| CheckpointError::Format(format!("tensor #{index} name is not UTF-8")))?;
    let ctx = || format!("tensor {name}");
    let dtype = r.u8(&ctx)?;
    let dtype = DType::from_tag(dtype)
        .ok_or_else(|| CheckpointError::Format(format!("tensor {name}: unknown dtype tag {dtype}")))?;
    let rank = r.u8(&ctx)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64(&ctx)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| CheckpointError::Format(format!("tensor {name}: dims overflow")))?;
    let nbytes = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| CheckpointError::Format(format!("tensor {name}: dims overflow")))?;
    let payload = r.take(nbytes, &ctx)?;
    let data: Vec<f32> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(<f32 as Float>::read_le).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| <f64 as Float>::read_le(c) as f32).collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, &|| "magic".into()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32(&|| "version".into())?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let cfg_len = r.u32(&|| "config length".into())? as usize;
    let cfg_bytes = r.take(cfg_len, &|| "config block".into())?;
    let step = r.u64(&|| "step counter".into())?;
    let rng_state = r.u64(&|| "PRNG state".into())?;
    let epoch_start_step = r.u64(&|| "epoch start".into())?;
    let count = r.u32(&|| "tensor count".into())? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let (name, t) = read_tensor(&mut r, i)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
    }
    let body_end = r.pos;
    let stored = r.u32(&|| "trailing CRC".into())?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after CRC",
            bytes.len() - r.pos
        )));
    }

    let text = std::str::from_utf8(cfg_bytes).map_err(|_| CheckpointError::Format("config block is not UTF-8".into()))?;
    let config = TrainConfig::parse(text).map_err(|e| CheckpointError::Format(format!("config block: {e}")))?;
    let model = config.model();
    let mut params = ParamStore::<f32>::init(&model, 0);
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(CheckpointError::Format(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for net in Net::ALL {
        let p = params.net_mut(net);
        for (k, t) in p.params.iter_mut() {
            *t = take(format!("{net}.{k}"), t.shape())?;
        }
        for (k, s) in p.stats.iter_mut() {
            let shape = s.mean.shape().to_vec();
            *s = RunningStats {
                mean: take(format!("{net}.{k}.running_mean"), &shape)?,
                var: take(format!("{net}.{k}.running_var"), &shape)?,
            };
        }
    }
    let momentum = config.momentum != 0.0;
    let mut opt = |prefix: &str, nets: &[Net]| -> Result<RmsPropState<f32>> {
        let mut st = RmsPropState::new(&params, nets, momentum);
        for (kind, map) in [("acc", &mut st.acc), ("mom", &mut st.mom)] {
            for ((net, k), t) in map.iter_mut() {
                *t = take(format!("{prefix}.{kind}.{net}.{k}"), t.shape())?;
            }
        }
        Ok(st)
    };
    let opt_g = opt("opt_g", &Net::GENERATOR)?;
    let opt_d = opt("opt_d", &Net::DISCRIMINATORS)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config,
        step,
        rng_state,
        epoch_start_step,
        params,
        opt_g,
        opt_d,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ck)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
