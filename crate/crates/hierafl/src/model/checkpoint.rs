//! Flat binary checkpoints.
//!
//! Layout: the 4-byte magic `HFL1`, a little-endian u32 record count, then
//! per record: u16 name length, UTF-8 name bytes, u8 rank, rank × u32
//! dimensions, and the row-major values as little-endian f64. The reserved
//! record name `meta.m` carries the meta-learner logits alongside the model;
//! loaders split it back out so a [`ParameterStore`] never holds non-model
//! entries. Unknown magic and truncated files are rejected with the offset
//! where parsing failed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"HFL1";

/// Reserved record name for the meta-learner logits.
pub const META_RECORD: &str = "meta.m";

/// Write a store (and optionally the meta-learner logits) to `path`.
pub fn save(store: &ParameterStore, meta_logits: Option<&Array>, path: &Path) -> Result<()> {
    if store.contains(META_RECORD) {
        return Err(Error::Checkpoint(format!(
            "store must not contain the reserved name {META_RECORD:?}"
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    let count = store.len() + usize::from(meta_logits.is_some());
    let count32 = u32::try_from(count)
        .map_err(|_| Error::Checkpoint(format!("{count} records overflow u32")))?;
    w.write_all(&count32.to_le_bytes()).map_err(io_err)?;

    let meta_entry = meta_logits.map(|m| (META_RECORD.to_string(), m));
    let entries = store
        .map()
        .iter()
        .map(|(n, a)| (n.clone(), a))
        .chain(meta_entry);
    for (name, array) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("name {name:?} exceeds u16 length")))?;
        w.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let rank = u8::try_from(array.shape().len())
            .map_err(|_| Error::Checkpoint(format!("rank of {name:?} exceeds u8")))?;
        w.write_all(&[rank]).map_err(io_err)?;
        for &d in array.shape() {
            let d32 = u32::try_from(d).map_err(|_| {
                Error::Checkpoint(format!("dimension {d} of {name:?} overflows u32"))
            })?;
            w.write_all(&d32.to_le_bytes()).map_err(io_err)?;
        }
        for &v in array.values() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Byte reader that tracks its offset for truncation diagnostics.
struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes for {what} at offset {}",
                self.offset
            ))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read a checkpoint back; returns the model store and, when present, the
/// meta-learner logits stored under [`META_RECORD`].
pub fn load(path: &Path) -> Result<(ParameterStore, Option<Array>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "wrong magic {magic:02x?} at offset 0 (expected {MAGIC:02x?})"
        )));
    }
    let count = r.u32_le("record count")? as usize;

    let mut store = ParameterStore::default();
    let mut meta = None;
    for rec in 0..count {
        let name_len = r.u16_le("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("record {rec}: name is not valid UTF-8")))?;
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(Error::Checkpoint(format!("record {name:?}: rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32_le("dimension")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("record {name:?}: shape overflow")))?;
            shape.push(d);
        }
        let bytes = r.take(numel * 8, &format!("values of {name:?}"))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = Array::new(shape, values)
            .map_err(|e| Error::Checkpoint(format!("record {name:?}: {e}")))?;
        if name == META_RECORD {
            if meta.replace(array).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name:?}")));
            }
        } else {
            if store.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate record {name:?}")));
            }
            store.insert(name, array);
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner
        .read(&mut trailing)
        .map_err(|e| Error::io(path, e))?
        != 0
    {
        return Err(Error::Checkpoint(format!(
            "trailing bytes after {count} records at offset {}",
            r.offset
        )));
    }
    Ok((store, meta))
}
