//! TLFT feature files.
//!
//! Layout (all little-endian): `"TLFT"`, `u32` version (1), `u32` L,
//! `u32` d, `f32` frame rate, then `L·d` `f32` values row-major.

use std::path::Path;

use super::{FeatureSequence, Fingerprint};
use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TLFT";
pub const VERSION: u32 = 1;

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    decode(&read_file(path)?, &format!("tlft:{}", path.display()))
}

pub fn export_features(f: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode(f))
}

pub fn encode(f: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * f.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(f.frame_rate() as f32).to_le_bytes());
    for v in f.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], provenance: &str) -> Result<FeatureSequence> {
    let mut r = Reader::new(bytes, "TLFT");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            format: "TLFT",
            expected: VERSION,
            found: version,
        });
    }
    let n_frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let frame_rate = r.f32()? as f64;
    let count = n_frames
        .checked_mul(dim)
        .ok_or(Error::TruncatedFile("TLFT"))?;
    if r.remaining().len() / 4 < count {
        return Err(Error::TruncatedFile("TLFT"));
    }
    let data: Vec<f32> = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
    r.finish()?;
    FeatureSequence::new(
        data,
        dim,
        frame_rate,
        Fingerprint::imported(dim, frame_rate),
        provenance,
    )
}
