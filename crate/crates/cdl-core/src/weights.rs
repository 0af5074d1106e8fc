//! CDLW weights file: a little-endian binary container for named f64 arrays.
//!
//! Layout: magic `CDLW`, version u16, manifest count u32; per entry a name
//! (u16 length + UTF-8 bytes), dtype tag u8 (0 = f64), rank u8 and u32 dims;
//! then the raw arrays in manifest order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CdlError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CDLW";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

pub fn save_entries(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CdlError::Format(format!("entry name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[DTYPE_F64])?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CdlError::Format(format!("rank too large for {name}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
    }
    for (_, tensor) in entries {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Saves every parameter of the store in insertion order.
pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    let entries: Vec<(String, Tensor)> = store
        .entries()
        .map(|(_, e)| (e.name.clone(), e.value.clone()))
        .collect();
    save_entries(path, &entries)
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CdlError::Format(format!(
            "bad magic {magic:?}, expected CDLW, in {}",
            path.display()
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(CdlError::Format(format!("unsupported CDLW version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CdlError::Format("entry name is not UTF-8".into()))?;
        let dtype = read_u8(&mut r)?;
        if dtype != DTYPE_F64 {
            return Err(CdlError::Format(format!("unknown dtype tag {dtype} for {name}")));
        }
        let rank = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::from_vec(shape, data)));
    }
    Ok(entries)
}

/// Loads a CDLW file into a fresh store, every entry with the given
/// trainable flag.
pub fn load_into_store(path: &Path, trainable: bool) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, tensor) in load_entries(path)? {
        store.insert(name, tensor, trainable);
    }
    Ok(store)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
