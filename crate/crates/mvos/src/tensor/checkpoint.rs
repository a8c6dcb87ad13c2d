//! Flat binary parameter checkpoints.
//!
//! Layout: magic "MVOS", version u32, count u32, then per parameter:
//! name length u16, UTF-8 name, shape 4xu32, dtype tag u8 (0=f32, 1=f64),
//! raw little-endian values. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

use super::{Parameter, Shape, Tensor};

const MAGIC: &[u8; 4] = b"MVOS";
const VERSION: u32 = 1;

/// One record of a checkpoint file, still in raw bytes.
#[derive(Debug, Clone)]
pub struct RawEntry {
    pub name: String,
    pub shape: Shape,
    pub dtype: Dtype,
    pub bytes: Vec<u8>,
}

pub fn save<E: Scalar>(path: &Path, params: &[&Parameter<E>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {}", p.name)));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        for d in p.value.shape.as_array() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&[E::DTYPE.tag()])?;
        let mut buf = Vec::with_capacity(p.value.data.len() * E::DTYPE.size_bytes());
        for &v in &p.value.data {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Vec<RawEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF8 parameter name".into()))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = Dtype::from_tag(tag[0])
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {} for {name}", tag[0])))?;
        let mut bytes = vec![0u8; shape.numel() * dtype.size_bytes()];
        r.read_exact(&mut bytes)?;
        entries.push(RawEntry {
            name,
            shape,
            dtype,
            bytes,
        });
    }
    Ok(entries)
}

fn decode<E: Scalar>(entry: &RawEntry) -> Result<Tensor<E>> {
    if entry.dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch for {}: checkpoint has {:?}, model wants {:?}",
            entry.name,
            entry.dtype,
            E::DTYPE
        )));
    }
    let sz = entry.dtype.size_bytes();
    let data: Vec<E> = entry.bytes.chunks_exact(sz).map(E::read_le).collect();
    Ok(Tensor::new(entry.shape, data))
}

/// Load values into an existing parameter set, matching strictly by name.
/// Every parameter must be present with the right shape and dtype, and the
/// file must not contain extras.
pub fn load_into<E: Scalar>(path: &Path, params: &mut [&mut Parameter<E>]) -> Result<()> {
    let entries = read_raw(path)?;
    let mut by_name: std::collections::HashMap<&str, &RawEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for p in params.iter_mut() {
        let entry = by_name.remove(p.name.as_str()).ok_or_else(|| {
            Error::Format(format!("checkpoint {} missing parameter {}", path.display(), p.name))
        })?;
        if entry.shape != p.value.shape {
            return Err(Error::Format(format!(
                "shape mismatch for {}: checkpoint {}, model {}",
                p.name, entry.shape, p.value.shape
            )));
        }
        let t = decode::<E>(entry)?;
        p.value.data = t.data;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint {} has unknown parameter {extra}",
            path.display()
        )));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
