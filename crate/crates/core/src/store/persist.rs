// SPDX-License-Identifier: Apache-2.0

//! File-backed image format.
//!
//! ```text
//! <image dir>/
//!   manifest            key = value lines, sorted by key
//!   <index>.<gen>       object data, sparse, gen 0 = head
//!   <index>.<gen>.alloc allocated ranges: (offset: u64 LE, len: u64 LE)*
//!   <index>.<gen>.kv    kv map: (key: u64 LE, value_len: u32 LE, value)*
//!   journal             committed transactions since the last flush
//! ```
//!
//! A frozen version `<index>.<g>` holds the object's state as seen by every
//! snapshot generation up to `g` that is newer than the previous frozen
//! version of the same object.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::object::ObjectState;
use super::{StoreError, StoreOp};

pub(crate) const MANIFEST: &str = "manifest";
pub(crate) const JOURNAL: &str = "journal";

/// Ordered `key = value` document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest(BTreeMap<String, String>);

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, StoreError> {
        self.get(key)
            .ok_or_else(|| StoreError::Manifest(format!("missing key {key:?}")))
    }

    pub fn parse_u64(&self, key: &str) -> Result<u64, StoreError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| StoreError::Manifest(format!("{key} = {raw:?} is not an integer")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# vblk image manifest\n");
        for (k, v) in &self.0 {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StoreError::Manifest(format!("line {}: expected key = value", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }
}

pub(crate) fn write_manifest(dir: &Path, manifest: &Manifest) -> io::Result<()> {
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, manifest.render())?;
    fs::rename(tmp, dir.join(MANIFEST))
}

pub(crate) fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Manifest::parse(&text)
}

fn object_path(dir: &Path, index: u64, generation: u64) -> PathBuf {
    dir.join(format!("{index}.{generation}"))
}

fn sidecar(dir: &Path, index: u64, generation: u64, ext: &str) -> PathBuf {
    dir.join(format!("{index}.{generation}.{ext}"))
}

pub(crate) fn save_version(dir: &Path, index: u64, generation: u64, state: &ObjectState) -> io::Result<()> {
    let allocated = state.allocated_all();

    let mut data = File::create(object_path(dir, index, generation))?;
    let mut alloc = BufWriter::new(File::create(sidecar(dir, index, generation, "alloc"))?);
    for e in &allocated {
        data.seek(SeekFrom::Start(e.offset))?;
        data.write_all(&state.read(e.offset, e.len))?;
        alloc.write_all(&e.offset.to_le_bytes())?;
        alloc.write_all(&e.len.to_le_bytes())?;
    }
    data.set_len(allocated.last().map_or(0, |e| e.end()))?;
    alloc.flush()?;

    let mut kv = BufWriter::new(File::create(sidecar(dir, index, generation, "kv"))?);
    for (key, value) in state.kv_entries() {
        kv.write_all(&key.to_le_bytes())?;
        kv.write_all(&(value.len() as u32).to_le_bytes())?;
        kv.write_all(value)?;
    }
    kv.flush()
}

pub(crate) fn load_version(dir: &Path, index: u64, generation: u64) -> Result<ObjectState, StoreError> {
    let mut state = ObjectState::default();
    let data = fs::read(object_path(dir, index, generation))?;
    let alloc = fs::read(sidecar(dir, index, generation, "alloc"))?;
    if alloc.len() % 16 != 0 {
        return Err(StoreError::Manifest(format!("{index}.{generation}.alloc is truncated")));
    }
    for rec in alloc.chunks_exact(16) {
        let offset = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let len = u64::from_le_bytes(rec[8..].try_into().unwrap());
        let end = (offset + len) as usize;
        if end > data.len() {
            return Err(StoreError::Manifest(format!(
                "{index}.{generation} is shorter than its allocation map"
            )));
        }
        state.write(offset, &data[offset as usize..end]);
    }
    let kv = fs::read(sidecar(dir, index, generation, "kv"))?;
    let mut cur = Cursor::new(&kv);
    while !cur.is_empty() {
        let (key, value) = cur
            .kv_pair()
            .ok_or_else(|| StoreError::Manifest(format!("{index}.{generation}.kv is truncated")))?;
        state.kv_set(key, value);
    }
    Ok(state)
}

/// Every `(index, generation)` pair with a data file in `dir`.
pub(crate) fn list_versions(dir: &Path) -> io::Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some((idx, gen)) = name.split_once('.') else {
            continue;
        };
        if let (Ok(idx), Ok(gen)) = (idx.parse::<u64>(), gen.parse::<u64>()) {
            out.push((idx, gen));
        }
    }
    out.sort();
    Ok(out)
}

/// One decoded journal record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum JournalRecord {
    Tx { seq: u64, object: u64, ops: Vec<StoreOp> },
    Snapshot { generation: u64 },
}

const TX: u8 = b'T';
const SNAP: u8 = b'S';
const WRITE: u8 = b'W';
const KV: u8 = b'K';
const COMMIT: u8 = b'C';

pub(crate) struct Journal {
    file: File,
    len: u64,
}

impl Journal {
    pub fn open(dir: &Path) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(dir.join(JOURNAL))?;
        let len = file.metadata()?.len();
        Ok(Self { file, len })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    /// Appends a transaction. With `applied < ops.len()` or `commit` false
    /// the record is left torn, exactly as a crash would leave it.
    pub fn append_tx(
        &mut self,
        seq: u64,
        object: u64,
        ops: &[StoreOp],
        applied: usize,
        commit: bool,
    ) -> io::Result<()> {
        let mut buf = vec![TX];
        buf.extend_from_slice(&seq.to_le_bytes());
        buf.extend_from_slice(&object.to_le_bytes());
        buf.extend_from_slice(&(ops.len() as u32).to_le_bytes());
        for op in &ops[..applied] {
            encode_op(&mut buf, op);
        }
        if commit && applied == ops.len() {
            buf.push(COMMIT);
        }
        self.append(&buf)
    }

    pub fn append_snapshot(&mut self, generation: u64) -> io::Result<()> {
        let mut buf = vec![SNAP];
        buf.extend_from_slice(&generation.to_le_bytes());
        buf.push(COMMIT);
        self.append(&buf)
    }

    fn append(&mut self, buf: &[u8]) -> io::Result<()> {
        self.file.write_all(buf)?;
        self.len += buf.len() as u64;
        Ok(())
    }

    pub fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)?;
        self.len = len;
        Ok(())
    }

    /// Decodes committed records; returns them with the byte length of the
    /// valid prefix. Anything after the first torn record is discarded.
    pub fn replay(&mut self) -> io::Result<(Vec<JournalRecord>, u64)> {
        let mut bytes = Vec::new();
        let mut f = &self.file;
        f.seek(SeekFrom::Start(0))?;
        f.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        let mut records = Vec::new();
        let mut valid = 0;
        while let Some(rec) = cur.record() {
            records.push(rec);
            valid = cur.pos;
        }
        Ok((records, valid as u64))
    }
}

fn encode_op(buf: &mut Vec<u8>, op: &StoreOp) {
    match op {
        StoreOp::WriteExtent { offset, bytes } => {
            buf.push(WRITE);
            buf.extend_from_slice(&offset.to_le_bytes());
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        StoreOp::KvSetRange { pairs } => {
            buf.push(KV);
            buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
            for (key, value) in pairs {
                buf.extend_from_slice(&key.to_le_bytes());
                buf.extend_from_slice(&(value.len() as u32).to_le_bytes());
                buf.extend_from_slice(value);
            }
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn kv_pair(&mut self) -> Option<(u64, &'a [u8])> {
        let key = self.u64()?;
        let len = self.u32()? as usize;
        Some((key, self.take(len)?))
    }

    fn op(&mut self) -> Option<StoreOp> {
        match self.u8()? {
            WRITE => {
                let offset = self.u64()?;
                let len = self.u32()? as usize;
                Some(StoreOp::WriteExtent {
                    offset,
                    bytes: self.take(len)?.to_vec(),
                })
            }
            KV => {
                let n = self.u32()?;
                let pairs = (0..n)
                    .map(|_| self.kv_pair().map(|(k, v)| (k, v.to_vec())))
                    .collect::<Option<Vec<_>>>()?;
                Some(StoreOp::KvSetRange { pairs })
            }
            _ => None,
        }
    }

    fn record(&mut self) -> Option<JournalRecord> {
        let rec = match self.u8()? {
            TX => {
                let seq = self.u64()?;
                let object = self.u64()?;
                let n = self.u32()?;
                let ops = (0..n).map(|_| self.op()).collect::<Option<Vec<_>>>()?;
                JournalRecord::Tx { seq, object, ops }
            }
            SNAP => JournalRecord::Snapshot {
                generation: self.u64()?,
            },
            _ => return None,
        };
        (self.u8()? == COMMIT).then_some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new();
        m.set("layout", "object-end");
        m.set("virtual_size", 1u64 << 26);
        let parsed = Manifest::parse(&m.render()).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.parse_u64("virtual_size").unwrap(), 1 << 26);
        assert!(parsed.parse_u64("layout").is_err());
        assert!(parsed.require("policy").is_err());
        assert!(Manifest::parse("no equals sign").is_err());
    }

    #[test]
    fn version_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ObjectState::default();
        s.write(5000, &[9; 300]);
        s.write(4_194_304, &[1; 16]);
        s.kv_set(4096, &[3; 16]);
        save_version(dir.path(), 7, 0, &s).unwrap();
        save_version(dir.path(), 7, 2, &ObjectState::default()).unwrap();
        assert_eq!(load_version(dir.path(), 7, 0).unwrap(), s);
        assert_eq!(load_version(dir.path(), 7, 2).unwrap(), ObjectState::default());
        assert_eq!(list_versions(dir.path()).unwrap(), vec![(7, 0), (7, 2)]);
        let kv = fs::read(dir.path().join("7.0.kv")).unwrap();
        assert_eq!(kv.len(), 8 + 4 + 16);
        assert_eq!(&kv[..8], &4096u64.to_le_bytes());
        assert_eq!(&kv[8..12], &16u32.to_le_bytes());
    }

    #[test]
    fn torn_records_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(dir.path()).unwrap();
        let ops = vec![
            StoreOp::WriteExtent {
                offset: 0,
                bytes: vec![1; 10],
            },
            StoreOp::KvSetRange {
                pairs: vec![(0, vec![2; 16])],
            },
        ];
        j.append_tx(1, 0, &ops, 2, true).unwrap();
        j.append_snapshot(1).unwrap();
        let good = j.len();
        j.append_tx(2, 0, &ops, 1, false).unwrap();
        let (records, valid) = j.replay().unwrap();
        assert_eq!(valid, good);
        assert_eq!(
            records,
            vec![
                JournalRecord::Tx {
                    seq: 1,
                    object: 0,
                    ops: ops.clone()
                },
                JournalRecord::Snapshot { generation: 1 },
            ]
        );
        // All ops present but no commit byte: still torn.
        j.truncate(valid).unwrap();
        j.append_tx(2, 0, &ops, 2, false).unwrap();
        assert_eq!(j.replay().unwrap().0.len(), 2);
    }
}
