//! Binary parameter-set checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "FBTPSET\0"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!          payload f64 × product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FBTPSET\0";
pub const VERSION: u32 = 1;

pub fn write_paramset<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        format_err("unexpected end of data")
    } else {
        Error::Io(e)
    }
}

pub fn read_paramset<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| format_err("entry name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        if params.contains(&name) {
            return Err(format_err(format!("duplicate entry `{name}`")));
        }
        let t = Tensor::new(shape, data).map_err(|e| format_err(e.to_string()))?;
        params.insert(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after last entry"));
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_paramset(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    read_paramset(io::Cursor::new(fs::read(path)?))
}
