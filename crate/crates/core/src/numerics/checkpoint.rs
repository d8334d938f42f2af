//! Flat parameter archive.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic  b"MFCKPT\0\0"
//! version
//! count
//! count × { name_len, name (UTF-8), ndim, dims[ndim], payload (f32 LE × numel) }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MFCKPT\0\0";
pub const VERSION: u32 = 1;

/// One archived tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push(Entry { name, shape, values });
    }
    Ok(entries)
}

pub fn entries_of<T: Real>(store: &ParamStore<T>) -> Vec<Entry> {
    store
        .iter()
        .map(|p| Entry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            values: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect()
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_entries(std::io::BufWriter::new(file), &entries_of(store))
}

/// Copies archived values into matching parameters. Every parameter in the
/// store must be present with an identical shape.
pub fn restore<T: Real>(store: &ParamStore<T>, entries: &[Entry]) -> Result<()> {
    for p in store.iter() {
        let e = entries.iter().find(|e| e.name == p.name).ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
        if e.shape != p.tensor.shape() {
            return Err(Error::Format(format!("{}: archived shape {:?}, model expects {:?}", p.name, e.shape, p.tensor.shape())));
        }
        let mut data = p.tensor.data_mut();
        for (d, &v) in data.iter_mut().zip(&e.values) {
            *d = T::lit(v as f64);
        }
    }
    Ok(())
}

pub fn load<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::open(path)?;
    restore(store, &read_entries(std::io::BufReader::new(file))?)
}
