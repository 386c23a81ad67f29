//! Checkpoint file: `"RDCK"`, u32 version, u32 header length, a JSON header
//! (architecture, schedule, normalization, free-form extras and the tensor
//! table), then every tensor as little-endian f64 in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{DataNorm, ScheduleConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleConfig,
    pub norm: DataNorm,
    /// Anything else worth keeping (training config, step count, ...).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: DenoiserConfig,
    schedule: ScheduleConfig,
    norm: DataNorm,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint_to<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    let tensors = ck.params.tensors();
    let header = Header {
        arch: *ck.params.config(),
        schedule: ck.schedule,
        norm: ck.norm,
        extra: ck.extra.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in &tensors {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated in {what}")))
}

pub fn read_checkpoint_from<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "magic")?;
    if &word != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    read_exact(&mut r, &mut word, "header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    header.arch.validate()?;
    header.schedule.build()?;

    let mut params = DenoiserParams::zeros_like(header.arch);
    let expected: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, l), e)| *n != e.name || *l != e.len)
    {
        return Err(Error::Format("tensor table does not match architecture".into()));
    }
    let mut buf = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            read_exact(&mut r, &mut buf, "tensor data")?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        params,
        schedule: header.schedule,
        norm: header.norm,
        extra: header.extra,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint_to(BufWriter::new(f), ck).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(BufReader::new(f))
}
