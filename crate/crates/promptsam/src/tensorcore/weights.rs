//! Flat binary weight container.
//!
//! Layout: magic `PSWT`, version u32, tensor count u32, then per tensor:
//! name length u16 + UTF-8 name, rank u8, extents u32 each, dtype u8
//! (0 = f32, 1 = f64), little-endian payload. A frozen-name manifest follows:
//! count u32, then u16-length-prefixed names. Round-trips bit-exactly.

use std::fs;
use std::path::Path;

use super::graph::TensorData;
use super::{ParamRegistry, Real, Result, TensorError};

const MAGIC: &[u8; 4] = b"PSWT";
const VERSION: u32 = 1;

pub fn save_weights<T: Real>(registry: &ParamRegistry<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = registry.iter().count() as u32;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in registry.iter() {
        write_name(&mut out, name)?;
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.push(T::DTYPE);
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    let frozen: Vec<&str> = registry.frozen_names().collect();
    out.extend_from_slice(&(frozen.len() as u32).to_le_bytes());
    for name in frozen {
        write_name(&mut out, name)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_weights<T: Real>(path: &Path) -> Result<ParamRegistry<T>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::BadContainer("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::BadContainer(format!(
            "unsupported version {version}"
        )));
    }
    let count = cur.u32()?;
    let mut registry = ParamRegistry::new();
    for _ in 0..count {
        let name = cur.name()?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let dtype = cur.u8()?;
        if dtype != T::DTYPE {
            return Err(TensorError::BadContainer(format!(
                "dtype {dtype} does not match requested element width"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * T::BYTES)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        registry.insert(&name, TensorData::new(shape, data)?);
    }
    let frozen_count = cur.u32()?;
    for _ in 0..frozen_count {
        let name = cur.name()?;
        registry.freeze(&name)?;
    }
    Ok(registry)
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(TensorError::BadContainer(format!(
            "name too long: {} bytes",
            bytes.len()
        )));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::BadContainer("truncated container".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| TensorError::BadContainer("non-UTF-8 name".into()))
    }
}
