//! The MELS spectrogram container.
//!
//! Layout (all little-endian): `b"MELS"`, u32 version, u32 F, u32 T, u32 hop,
//! u8 is_log, then `F * T` f32 values, frequency-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::MelSpectrogram;
use crate::error::{Error, Result};

pub const MELS_MAGIC: &[u8; 4] = b"MELS";
pub const MELS_VERSION: u32 = 1;

pub fn write_mels_to<W: Write>(mut w: W, mel: &MelSpectrogram) -> std::io::Result<()> {
    let (f, t) = mel.data().dim();
    w.write_all(MELS_MAGIC)?;
    w.write_all(&MELS_VERSION.to_le_bytes())?;
    w.write_all(&(f as u32).to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&mel.hop().to_le_bytes())?;
    w.write_all(&[u8::from(mel.is_log())])?;
    for &v in mel.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("MELS stream truncated".into())
    } else {
        Error::Format(format!("MELS read failed: {e}"))
    }
}

pub fn read_mels_from<R: Read>(mut r: R) -> Result<MelSpectrogram> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MELS_MAGIC {
        return Err(Error::Format("missing MELS magic".into()));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != MELS_VERSION {
        return Err(Error::Format(format!("unsupported MELS version {version}")));
    }
    let f = read_u32(&mut r).map_err(truncated)? as usize;
    let t = read_u32(&mut r).map_err(truncated)? as usize;
    let hop = read_u32(&mut r).map_err(truncated)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(truncated)?;
    let is_log = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad is_log byte {other}"))),
    };
    let n = f
        .checked_mul(t)
        .ok_or_else(|| Error::Format("MELS dimensions overflow".into()))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(truncated)? != 0 {
        return Err(Error::Format("trailing bytes after MELS payload".into()));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array2::from_shape_vec((f, t), values)
        .map_err(|e| Error::Format(format!("MELS shape: {e}")))?;
    MelSpectrogram::new(data, hop, is_log).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_mels(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_mels_to(BufWriter::new(file), mel).map_err(|e| Error::io(path, e))
}

pub fn read_mels(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_mels_from(BufReader::new(file))
}
