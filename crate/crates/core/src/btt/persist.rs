//! Encrypted table file: magic, image count, then per image its name,
//! nonce, entry count and fixed-width records. All integers little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BttEntry, BttSet};
use crate::ids::DiskName;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SYBBTT01";
const RECORD: usize = 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistedTable {
    pub name: DiskName,
    pub nonce: u64,
    pub entries: Vec<BttEntry>,
}

pub fn encode_tables(set: &BttSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.tables.len() as u32).to_le_bytes());
    for (name, t) in &set.tables {
        out.extend_from_slice(&name.0.to_le_bytes());
        out.extend_from_slice(&t.nonce.to_le_bytes());
        out.extend_from_slice(&(t.entries.len() as u64).to_le_bytes());
        for e in t.entries.values() {
            out.extend_from_slice(&e.vblock.to_le_bytes());
            out.extend_from_slice(&e.ciphertext.to_le_bytes());
            out.extend_from_slice(&e.epoch.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.buf.len() < N {
            return Err(Error::Format("truncated table file".into()));
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

pub fn decode_tables(bytes: &[u8]) -> Result<Vec<PersistedTable>> {
    let mut r = Reader { buf: bytes };
    if &r.take::<8>()? != MAGIC {
        return Err(Error::Format("bad table magic".into()));
    }
    let count = r.u32()?;
    let mut tables = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = DiskName(r.u64()?);
        let nonce = r.u64()?;
        let n = r.u64()?;
        if (n as usize).saturating_mul(RECORD) > r.buf.len() {
            return Err(Error::Format("truncated table file".into()));
        }
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            entries.push(BttEntry {
                vblock: r.u64()?,
                ciphertext: r.u64()?,
                epoch: r.u32()?,
            });
        }
        tables.push(PersistedTable { name, nonce, entries });
    }
    if !r.buf.is_empty() {
        return Err(Error::Format("trailing bytes in table file".into()));
    }
    Ok(tables)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn save_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_file() {
        let mut s = BttSet::new(3, 1024, true);
        s.create(DiskName(1), true).unwrap();
        for v in 0..50 {
            s.prepare_write(DiskName(1), v).unwrap();
        }
        s.fork(DiskName(1), DiskName(2)).unwrap();
        s.prepare_write(DiskName(2), 7).unwrap();

        let bytes = encode_tables(&s);
        assert_eq!(bytes.len(), 8 + 4 + 2 * 24 + 100 * RECORD);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("btt.bin");
        save_atomic(&path, &bytes).unwrap();
        let tables = decode_tables(&fs::read(&path).unwrap()).unwrap();

        let mut restored = s.clone();
        restored.restore(tables, s.actual()).unwrap();
        for n in [DiskName(1), DiskName(2)] {
            for v in 0..50 {
                assert_eq!(restored.lookup(n, v), s.lookup(n, v));
            }
        }
        assert_eq!(restored.refcount_total(), s.refcount_total());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_tables(b"NOTMAGIC\0\0\0\0").is_err());
        let mut s = BttSet::new(3, 8, true);
        s.create(DiskName(1), false).unwrap();
        s.prepare_write(DiskName(1), 0).unwrap();
        let bytes = encode_tables(&s);
        assert!(decode_tables(&bytes[..bytes.len() - 1]).is_err());
    }
}
