//! Binary container of named arrays.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MSTRCKPT"
//! version  u32
//! meta_len u32, then meta_len bytes of UTF-8 (free-form, JSON by convention)
//! count    u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 extents,
//!           Π extents × f64 (IEEE-754 bits) }
//! ```

use std::io::{Read, Write};

use super::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: String,
    pub entries: Vec<(String, Array)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn write_container(mut w: impl Write, c: &Container) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(c.meta.len() as u32).to_le_bytes())?;
    w.write_all(c.meta.as_bytes())?;
    w.write_all(&(c.entries.len() as u32).to_le_bytes())?;
    for (name, a) in &c.entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(a.ndim() as u32).to_le_bytes())?;
        for &d in a.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(a.len() * 8);
        for v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("non-UTF-8 string: {e}")))
}

pub fn read_container(mut r: impl Read) -> Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Array::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        entries.push((name, array));
    }
    Ok(Container { meta, entries })
}
