//! Flat binary container for phantom datasets.
//!
//! ```text
//! magic    b"MFPD"
//! version  u32 LE (= 1)
//! height   u32 LE
//! width    u32 LE
//! count    u32 LE
//! mask     height·width f64 LE (0.0 or 1.0)
//! items    count × { truth: height·width × (re, im) f64 LE,
//!                    kspace: height·width × (re, im) f64 LE }
//! ```
//!
//! A JSON sidecar (`<file>.meta.json`) records seeds and client assignment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{MaskSpec, MriError, PhantomSample, PhantomSpec, Plane, SamplingMask};

pub const DATASET_MAGIC: &[u8; 4] = b"MFPD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub client: usize,
    pub split: String,
    pub phantom: PhantomSpec,
    pub mask: MaskSpec,
    pub noise_variance: f64,
    pub count: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_interleaved<D, W: Write>(w: &mut W, p: &Plane<D>) -> std::io::Result<()> {
    for k in 0..p.len() {
        w.write_f64::<LittleEndian>(p.re[k])?;
        w.write_f64::<LittleEndian>(p.im[k])?;
    }
    Ok(())
}

fn read_interleaved<D, R: Read>(r: &mut R, height: usize, width: usize) -> std::io::Result<Plane<D>> {
    let n = height * width;
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for _ in 0..n {
        re.push(r.read_f64::<LittleEndian>()?);
        im.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Plane::from_parts(height, width, re, im))
}

/// Write samples sharing one mask, plus the metadata sidecar.
pub fn write_dataset(path: &Path, samples: &[PhantomSample], meta: &DatasetMeta) -> Result<(), MriError> {
    let first = samples
        .first()
        .ok_or_else(|| MriError::Format("cannot write an empty dataset".into()))?;
    let mask = &first.mask;
    if samples.iter().any(|s| s.mask.grid() != mask.grid()) {
        return Err(MriError::Format("samples in one container must share a mask".into()));
    }
    let (h, w) = first.truth.shape();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_u32::<LittleEndian>(DATASET_VERSION)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    out.write_u32::<LittleEndian>(samples.len() as u32)?;
    for &m in mask.grid() {
        out.write_f64::<LittleEndian>(m as f64)?;
    }
    for s in samples {
        write_interleaved(&mut out, &s.truth)?;
        write_interleaved(&mut out, &s.kspace)?;
    }
    out.flush()?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| MriError::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Read a container written by [`write_dataset`] along with its sidecar.
pub fn read_dataset(path: &Path) -> Result<(Vec<PhantomSample>, DatasetMeta), MriError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(MriError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(MriError::Format(format!("unsupported version {version}")));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
        .map_err(|e| MriError::Format(e.to_string()))?;
    let mut grid = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        let v = r.read_f64::<LittleEndian>()?;
        grid.push(if v == 1.0 { 1 } else if v == 0.0 { 0 } else { 2 });
    }
    let mask = Arc::new(SamplingMask::from_grid(meta.mask, h, w, grid)?);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let truth = read_interleaved(&mut r, h, w)?;
        let kspace = read_interleaved(&mut r, h, w)?;
        samples.push(PhantomSample {
            truth,
            kspace,
            mask: Arc::clone(&mask),
        });
    }
    Ok((samples, meta))
}
