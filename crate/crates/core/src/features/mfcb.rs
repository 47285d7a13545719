//! The `MFCB` binary feature file.
//!
//! Little-endian layout: magic `MFCB`, version byte `0x01`, `u32` frame
//! count T, `u32` dimension D, T·D `f32` values row-major, `u32` F0 count
//! (0 or T), then that many `f32` F0 values in Hz.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::FeatureSeq;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"MFCB";
const VERSION: u8 = 1;

pub fn encode_feature_file(seq: &FeatureSeq) -> Result<Vec<u8>> {
    if seq.frames().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature frames".into()));
    }
    let mut out = Vec::with_capacity(17 + 4 * seq.frames().len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.write_u32::<LittleEndian>(seq.len() as u32)?;
    out.write_u32::<LittleEndian>(seq.dim() as u32)?;
    for &v in seq.frames() {
        out.write_f32::<LittleEndian>(v)?;
    }
    let f0 = seq.f0().unwrap_or(&[]);
    out.write_u32::<LittleEndian>(f0.len() as u32)?;
    for &v in f0 {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(out)
}

pub fn decode_feature_file(bytes: &[u8]) -> Result<FeatureSeq> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::from_read(e, "magic"))?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.read_u8().map_err(|e| Error::from_read(e, "version"))?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let t = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::from_read(e, "frame count"))? as usize;
    let d = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::from_read(e, "dimension"))? as usize;
    if d == 0 {
        return Err(Error::ZeroDimension);
    }
    if t == 0 {
        return Err(Error::ZeroFrames);
    }
    let remaining = bytes.len() - r.position() as usize;
    if remaining < t * d * 4 {
        return Err(Error::Truncated("frame payload".into()));
    }
    let mut frames = vec![0f32; t * d];
    r.read_f32_into::<LittleEndian>(&mut frames)
        .map_err(|e| Error::from_read(e, "frame payload"))?;
    let nf0 = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::from_read(e, "f0 count"))? as usize;
    if nf0 != 0 && nf0 != t {
        return Err(Error::Format(format!(
            "f0 count {nf0} is neither 0 nor {t}"
        )));
    }
    let mut f0 = vec![0f32; nf0];
    r.read_f32_into::<LittleEndian>(&mut f0)
        .map_err(|e| Error::from_read(e, "f0 payload"))?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after f0 payload".into()));
    }
    let seq = FeatureSeq::new(frames, t, d)?;
    if nf0 > 0 {
        seq.with_f0(f0)
    } else {
        Ok(seq)
    }
}

pub fn write_feature_file(seq: &FeatureSeq, path: &Path) -> Result<()> {
    std::fs::write(path, encode_feature_file(seq)?)?;
    Ok(())
}

/// Reads a feature file; the utterance id is taken from the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureSeq> {
    let bytes = std::fs::read(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    Ok(decode_feature_file(&bytes)?.with_ids(0, stem))
}
