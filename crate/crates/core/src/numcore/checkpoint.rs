//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u8   version (= 1)
//! u32  parameter count
//! per parameter:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank x u64 axis sizes
//!   f64  x product(shape) values, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<ParamStore> {
    let r = &mut bytes;
    let version = read_array::<1>(r)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(r)?) as usize;
        let name = String::from_utf8(read_vec(r, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let rank = u32::from_le_bytes(read_array(r)?) as usize;
        let shape = (0..rank)
            .map(|_| read_array(r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= r.len() / 8).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: shape {shape:?} exceeds remaining data"))
        })?;
        let data = (0..numel)
            .map(|_| read_array(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    if r.len() < N {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(N);
    *r = tail;
    Ok(head.try_into().expect("split length"))
}

fn read_vec(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}
