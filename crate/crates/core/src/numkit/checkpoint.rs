//! Binary checkpoint format.
//!
//! ```text
//! "TNCK" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | rank: u32 | extents: u64 * rank | payload: f64 * n
//! ```
//!
//! Integers and floats are little-endian. Optimizer moments follow the
//! parameters under `<name>-m` / `<name>-v`, and the optimizer step counter
//! is stored as the rank-0 record `adam-step`.

use std::path::Path;

use super::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNCK";
pub const VERSION: u32 = 1;
const STEP_RECORD: &str = "adam-step";

pub fn encode(store: &ParamStore, adam: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        write_record(&mut out, name, t.shape(), t.data());
    }
    if let Some(adam) = adam {
        for (id, (name, t)) in store.ids().zip(store.iter()) {
            write_record(&mut out, &format!("{name}-m"), t.shape(), adam.first_moment(id));
            write_record(&mut out, &format!("{name}-v"), t.shape(), adam.second_moment(id));
        }
        write_record(&mut out, STEP_RECORD, &[], &[adam.step as f64]);
    }
    out
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses every record in a checkpoint, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Restores parameter values (and optimizer state when given) by name.
pub fn restore(bytes: &[u8], store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
    let records = decode(bytes)?;
    let lookup: std::collections::HashMap<&str, &Tensor> =
        records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = store.name(id).to_string();
        let t = lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, {:?} expected",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    if let Some(adam) = adam {
        for &id in &ids {
            let name = store.name(id);
            for (suffix, buf) in [("-m", &mut adam.m[id.index()]), ("-v", &mut adam.v[id.index()])] {
                let key = format!("{name}{suffix}");
                let t = lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer record {key}")))?;
                if t.len() != buf.len() {
                    return Err(Error::Checkpoint(format!("optimizer record {key} has wrong size")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        let step = lookup
            .get(STEP_RECORD)
            .ok_or_else(|| Error::Checkpoint("missing adam-step record".into()))?;
        adam.step = step.item() as u64;
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode(store, adam)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&bytes, store, adam)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
