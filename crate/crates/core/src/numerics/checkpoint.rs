//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `SGPP`, version u32, then one record per
//! parameter until EOF: name length u32, UTF-8 name, rank u32, dims u32 each,
//! f32 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGPP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected SGPP")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for e in store.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in store.values_of(&e.name) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut records = Vec::new();
    loop {
        let name_len = match read_u32_eof(&mut r)? {
            Some(v) => v as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("non-utf8 name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f32; len];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push((name, shape, data));
    }
    if records.is_empty() {
        return Err(CheckpointError::Malformed("no parameter records".into()));
    }
    Ok(ParamStore::from_records(records))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u32_eof<R: Read>(r: &mut R) -> Result<Option<u32>, CheckpointError> {
    let mut buf = [0u8; 4];
    let mut read = 0;
    while read < 4 {
        let n = r.read(&mut buf[read..])?;
        if n == 0 {
            if read == 0 {
                return Ok(None);
            }
            return Err(CheckpointError::Malformed("truncated record header".into()));
        }
        read += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}
