//! Named-tensor checkpoint archive.
//!
//! ```text
//! magic    b"MFCK"
//! version  u32 LE (= 1)
//! count    u32 LE
//! entries  count × { name_len u32, name utf-8, tag u8 (0 shared, 1 local),
//!                    ndim u32, dims ndim × u64, values f64 LE }
//! checksum 32-byte SHA-256 of every preceding byte
//! ```

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Parameter, PartitionTag, Tensor};

use super::ReconError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(params.len() as u32).unwrap();
    for p in params.iter() {
        buf.write_u32::<LittleEndian>(p.name.len() as u32).unwrap();
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(match p.tag() {
            PartitionTag::GlobalShared => 0,
            PartitionTag::LocalPersonalized => 1,
        });
        buf.write_u32::<LittleEndian>(p.tensor.shape().len() as u32).unwrap();
        for &d in p.tensor.shape() {
            buf.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in p.tensor.data() {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, ReconError> {
    let bad = |m: &str| ReconError::Checkpoint(m.to_string());
    if bytes.len() < 44 {
        return Err(bad("archive truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut r = &body[4..];
    let io = |e: std::io::Error| ReconError::Checkpoint(e.to_string());
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if r.len() < len + 1 {
            return Err(bad("archive truncated"));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_string();
        let tag = match r[len] {
            0 => PartitionTag::GlobalShared,
            1 => PartitionTag::LocalPersonalized,
            t => return Err(bad(&format!("unknown partition tag {t}"))),
        };
        r = &r[len + 1..];
        let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>().map_err(io)?);
        }
        if params.contains(&name) {
            return Err(bad(&format!("duplicate parameter {name}")));
        }
        params.insert(Parameter::new(name.clone(), Tensor::new(&shape, data)?));
        params.set_tag(&name, tag);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes before checksum"));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<(), ReconError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet, ReconError> {
    decode(&std::fs::read(path)?)
}
