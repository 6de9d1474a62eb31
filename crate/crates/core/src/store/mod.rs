// SPDX-License-Identifier: Apache-2.0

//! Simulated object store: one instance holds the objects of one image.
//!
//! Each object is a sparse byte range plus an ordered `u64 -> bytes` map.
//! Mutations arrive as single-object [`Transaction`]s that become visible
//! all at once. Snapshots are generation numbers; an object's state is
//! frozen lazily the first time it is written after a new generation.
//!
//! Two backends share this code: purely in-memory, and file-backed where
//! every commit is journaled and [`ObjectStore::flush`] writes one file per
//! object version (see [`persist`]).

mod object;
mod persist;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::layout::{sector_footprint, AccessStats, Direction, Extent};
use object::ObjectState;
use persist::{Journal, JournalRecord};

pub use persist::Manifest;

/// Journal size that triggers an automatic flush.
const JOURNAL_CHECKPOINT_BYTES: u64 = 256 << 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("extent [{offset}, {offset}+{len}) exceeds object size {limit}")]
    OutOfBounds { offset: u64, len: u64, limit: u64 },
    #[error("transaction has no operations")]
    EmptyTransaction,
    #[error("object belongs to image {found}, store holds image {expected}")]
    ForeignObject { expected: u64, found: u64 },
    #[error("kv key {0} is not a block offset")]
    BadKey(u64),
    #[error("simulated crash during transaction {tx_index}")]
    Crashed { tx_index: u64 },
    #[error("store is down after a crash; call recover()")]
    Down,
    #[error("unknown snapshot generation {0}")]
    UnknownSnapshot(u64),
    #[error("image is closed")]
    Closed,
    #[error("image already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectId {
    pub image_id: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreOp {
    WriteExtent { offset: u64, bytes: Vec<u8> },
    KvSetRange { pairs: Vec<(u64, Vec<u8>)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub target: ObjectId,
    pub ops: Vec<StoreOp>,
}

/// Snapshot generation; generation 0 is the live head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SnapshotId(pub u64);

impl SnapshotId {
    pub const HEAD: SnapshotId = SnapshotId(0);

    pub fn generation(self) -> u64 {
        self.0
    }

    pub fn is_head(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_head() {
            f.write_str("head")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Crash before applying op `op_index` of the `tx_index`-th submission
/// (1-based). `op_index == ops.len()` crashes after the last op but before
/// the commit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPoint {
    pub tx_index: u64,
    pub op_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxReceipt {
    pub tx_index: u64,
    pub stats: AccessStats,
}

/// Synthetic per-request cost; all zero means no delay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatencyModel {
    pub fixed_ns: u64,
    pub per_sector_ns: u64,
    pub per_kv_op_ns: u64,
    pub per_kv_byte_ns: u64,
}

impl LatencyModel {
    pub fn is_enabled(&self) -> bool {
        *self != LatencyModel::default()
    }

    fn cost(&self, sectors: u64, kv_ops: u64, kv_bytes: u64) -> Duration {
        Duration::from_nanos(
            self.fixed_ns + self.per_sector_ns * sectors + self.per_kv_op_ns * kv_ops + self.per_kv_byte_ns * kv_bytes,
        )
    }

    fn pause(&self, sectors: u64, kv_ops: u64, kv_bytes: u64) {
        if self.is_enabled() {
            std::thread::sleep(self.cost(sectors, kv_ops, kv_bytes));
        }
    }
}

impl FromStr for LatencyModel {
    type Err = String;

    /// `fixed=20000,sector=1500,kv=8000,kv_byte=4` (nanoseconds), or `off`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut model = LatencyModel::default();
        if s == "off" || s.is_empty() {
            return Ok(model);
        }
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("latency term {part:?} is not key=value"))?;
            let v: u64 = v.trim().parse().map_err(|_| format!("bad latency value {v:?}"))?;
            match k.trim() {
                "fixed" => model.fixed_ns = v,
                "sector" => model.per_sector_ns = v,
                "kv" => model.per_kv_op_ns = v,
                "kv_byte" => model.per_kv_byte_ns = v,
                other => return Err(format!("unknown latency term {other:?}")),
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    pub image_id: u64,
    /// Upper bound for every extent in an object.
    pub physical_object_bytes: u64,
    pub sector_bytes: u64,
    pub latency: LatencyModel,
}

/// The store surface the block device is written against. Test shims wrap
/// an [`ObjectStore`] behind this trait.
pub trait ObjectAccess: Send + Sync {
    fn submit(&self, tx: Transaction) -> Result<TxReceipt, StoreError>;
    fn read_extent(&self, object: ObjectId, offset: u64, len: u64, at: SnapshotId) -> Result<Vec<u8>, StoreError>;
    fn kv_get_range(
        &self,
        object: ObjectId,
        first_key: u64,
        last_key: u64,
        at: SnapshotId,
    ) -> Result<Vec<(u64, Vec<u8>)>, StoreError>;
    /// Written sub-ranges of an extent. Metadata only; not charged as IO.
    fn allocated(&self, object: ObjectId, offset: u64, len: u64, at: SnapshotId) -> Result<Vec<Extent>, StoreError>;
    fn create_snapshot(&self) -> Result<SnapshotId, StoreError>;
    fn latest_snapshot(&self) -> SnapshotId;
    fn stats(&self) -> AccessStats;
    fn reset_stats(&self);
    fn flush(&self) -> Result<(), StoreError>;
}

#[derive(Default)]
struct ObjectEntry {
    head: Arc<ObjectState>,
    /// Snapshot generation current when `head` was last written.
    head_epoch: u64,
    /// `(g, state)`: state visible to snapshots in `(previous g, g]`.
    frozen: Vec<(u64, Arc<ObjectState>)>,
    head_dirty: bool,
    frozen_saved: usize,
}

impl ObjectEntry {
    fn version(&self, at: SnapshotId) -> Arc<ObjectState> {
        if at.is_head() {
            return self.head.clone();
        }
        let i = self.frozen.partition_point(|(g, _)| *g < at.0);
        self.frozen.get(i).map_or_else(|| self.head.clone(), |(_, s)| s.clone())
    }

    fn commit(&mut self, staged: ObjectState, latest: u64) {
        if latest > self.head_epoch {
            let previous = std::mem::take(&mut self.head);
            self.frozen.push((latest, previous));
            self.head_epoch = latest;
        }
        self.head = Arc::new(staged);
        self.head_dirty = true;
    }
}

#[derive(Default)]
struct Counters {
    read: AtomicU64,
    written: AtomicU64,
    rmw: AtomicU64,
    kv: AtomicU64,
}

impl Counters {
    fn add(&self, s: &AccessStats) {
        self.read.fetch_add(s.physical_sectors_read, Ordering::Relaxed);
        self.written.fetch_add(s.physical_sectors_written, Ordering::Relaxed);
        self.rmw.fetch_add(s.rmw_sectors, Ordering::Relaxed);
        self.kv.fetch_add(s.kv_ops, Ordering::Relaxed);
    }

    fn load(&self) -> AccessStats {
        AccessStats {
            physical_sectors_read: self.read.load(Ordering::Relaxed),
            physical_sectors_written: self.written.load(Ordering::Relaxed),
            rmw_sectors: self.rmw.load(Ordering::Relaxed),
            kv_ops: self.kv.load(Ordering::Relaxed),
        }
    }

    fn reset(&self) {
        for c in [&self.read, &self.written, &self.rmw, &self.kv] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

struct Disk {
    dir: PathBuf,
    journal: Mutex<Journal>,
    properties: Manifest,
}

pub struct ObjectStore {
    config: StoreConfig,
    objects: RwLock<HashMap<u64, Arc<Mutex<ObjectEntry>>>>,
    /// Latest snapshot generation. Submissions hold the read side so a
    /// snapshot never lands in the middle of a commit.
    latest: RwLock<u64>,
    next_tx: AtomicU64,
    fault: Mutex<Option<FaultPoint>>,
    down: AtomicBool,
    closed: AtomicBool,
    counters: Counters,
    disk: Option<Disk>,
}

impl fmt::Debug for ObjectStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectStore")
            .field("config", &self.config)
            .field("dir", &self.disk.as_ref().map(|d| &d.dir))
            .finish_non_exhaustive()
    }
}

impl ObjectStore {
    pub fn in_memory(config: StoreConfig) -> Self {
        Self::build(config, None)
    }

    fn build(config: StoreConfig, disk: Option<Disk>) -> Self {
        Self {
            config,
            objects: RwLock::new(HashMap::new()),
            latest: RwLock::new(0),
            next_tx: AtomicU64::new(1),
            fault: Mutex::new(None),
            down: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            counters: Counters::default(),
            disk,
        }
    }

    /// Creates a file-backed store in `dir`. `properties` are stored in the
    /// manifest alongside the store's own keys.
    pub fn create_dir(dir: &Path, config: StoreConfig, properties: Manifest) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        if dir.join(persist::MANIFEST).exists() {
            return Err(StoreError::AlreadyExists(dir.to_path_buf()));
        }
        let journal = Journal::open(dir)?;
        let store = Self::build(
            config,
            Some(Disk {
                dir: dir.to_path_buf(),
                journal: Mutex::new(journal),
                properties,
            }),
        );
        store.flush()?;
        Ok(store)
    }

    /// Opens a file-backed store, replaying committed journal records.
    pub fn open_dir(dir: &Path, latency: LatencyModel) -> Result<Self, StoreError> {
        let manifest = persist::read_manifest(dir)?;
        let config = StoreConfig {
            image_id: manifest.parse_u64("store.image_id")?,
            physical_object_bytes: manifest.parse_u64("store.physical_object_bytes")?,
            sector_bytes: manifest.parse_u64("store.sector_bytes")?,
            latency,
        };
        let mut properties = Manifest::new();
        for (k, v) in manifest.iter().filter(|(k, _)| !k.starts_with("store.")) {
            properties.set(k, v);
        }
        let journal = Journal::open(dir)?;
        let store = Self::build(
            config,
            Some(Disk {
                dir: dir.to_path_buf(),
                journal: Mutex::new(journal),
                properties,
            }),
        );
        store.reload()?;
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    /// Non-store manifest keys (empty for in-memory stores).
    pub fn properties(&self) -> Manifest {
        self.disk.as_ref().map(|d| d.properties.clone()).unwrap_or_default()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.disk.as_ref().map(|d| d.dir.as_path())
    }

    pub fn inject_fault(&self, point: FaultPoint) {
        *self.fault.lock() = Some(point);
    }

    pub fn clear_fault(&self) {
        *self.fault.lock() = None;
    }

    /// Sequence number the next submission will get.
    pub fn next_tx_index(&self) -> u64 {
        self.next_tx.load(Ordering::SeqCst)
    }

    pub fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    /// Brings a crashed store back with exactly the committed transactions.
    /// The file backend rebuilds its state from disk.
    pub fn recover(&self) -> Result<(), StoreError> {
        if self.disk.is_some() {
            self.reload()?;
        }
        self.down.store(false, Ordering::SeqCst);
        Ok(())
    }

    pub fn close(&self) -> Result<(), StoreError> {
        self.flush()?;
        self.closed.store(true, Ordering::SeqCst);
        Ok(())
    }

    fn check_live(&self) -> Result<(), StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        if self.down.load(Ordering::SeqCst) {
            return Err(StoreError::Down);
        }
        Ok(())
    }

    fn check_object(&self, object: ObjectId) -> Result<(), StoreError> {
        if object.image_id != self.config.image_id {
            return Err(StoreError::ForeignObject {
                expected: self.config.image_id,
                found: object.image_id,
            });
        }
        Ok(())
    }

    fn check_extent(&self, offset: u64, len: u64) -> Result<(), StoreError> {
        let limit = self.config.physical_object_bytes;
        if offset.checked_add(len).is_none_or(|end| end > limit) {
            return Err(StoreError::OutOfBounds { offset, len, limit });
        }
        Ok(())
    }

    fn check_snapshot(&self, at: SnapshotId) -> Result<(), StoreError> {
        if at.0 > *self.latest.read() {
            return Err(StoreError::UnknownSnapshot(at.0));
        }
        Ok(())
    }

    fn entry(&self, index: u64) -> Option<Arc<Mutex<ObjectEntry>>> {
        self.objects.read().get(&index).cloned()
    }

    fn entry_or_create(&self, index: u64) -> Arc<Mutex<ObjectEntry>> {
        if let Some(e) = self.entry(index) {
            return e;
        }
        self.objects.write().entry(index).or_default().clone()
    }

    fn version(&self, object: ObjectId, at: SnapshotId) -> Option<Arc<ObjectState>> {
        self.entry(object.index).map(|e| e.lock().version(at))
    }

    fn validate(&self, tx: &Transaction) -> Result<AccessStats, StoreError> {
        if tx.ops.is_empty() {
            return Err(StoreError::EmptyTransaction);
        }
        self.check_object(tx.target)?;
        let mut extents = Vec::new();
        let mut kv_ops = 0;
        for op in &tx.ops {
            match op {
                StoreOp::WriteExtent { offset, bytes } => {
                    self.check_extent(*offset, bytes.len() as u64)?;
                    extents.push(Extent::new(*offset, bytes.len() as u64));
                }
                StoreOp::KvSetRange { pairs } => {
                    if let Some((k, _)) = pairs.iter().find(|(k, _)| k % self.config.sector_bytes != 0) {
                        return Err(StoreError::BadKey(*k));
                    }
                    kv_ops += 1;
                }
            }
        }
        extents.sort();
        let mut stats = sector_footprint(&extents, self.config.sector_bytes, Direction::Write);
        stats.kv_ops = kv_ops;
        Ok(stats)
    }

    fn take_fault(&self, tx_index: u64, op_index: usize) -> bool {
        let mut fault = self.fault.lock();
        if *fault == Some(FaultPoint { tx_index, op_index }) {
            *fault = None;
            return true;
        }
        false
    }

    fn kv_payload(ops: &[StoreOp]) -> u64 {
        ops.iter()
            .map(|op| match op {
                StoreOp::KvSetRange { pairs } => pairs.iter().map(|(_, v)| v.len() as u64 + 8).sum(),
                StoreOp::WriteExtent { .. } => 0,
            })
            .sum()
    }

    fn crash(&self, tx_index: u64, object: u64, ops: &[StoreOp], applied: usize) -> StoreError {
        if let Some(disk) = &self.disk {
            // A torn record; replay ignores it.
            let _ = disk.journal.lock().append_tx(tx_index, object, ops, applied, false);
        }
        self.down.store(true, Ordering::SeqCst);
        StoreError::Crashed { tx_index }
    }

    fn do_submit(&self, tx: Transaction) -> Result<TxReceipt, StoreError> {
        self.check_live()?;
        let stats = self.validate(&tx)?;
        self.config
            .latency
            .pause(stats.physical_sectors_written, stats.kv_ops, Self::kv_payload(&tx.ops));

        let latest = self.latest.read();
        let entry = self.entry_or_create(tx.target.index);
        let mut entry = entry.lock();
        self.check_live()?;
        let tx_index = self.next_tx.fetch_add(1, Ordering::SeqCst);

        let mut staged = (*entry.head).clone();
        for (i, op) in tx.ops.iter().enumerate() {
            if self.take_fault(tx_index, i) {
                return Err(self.crash(tx_index, tx.target.index, &tx.ops, i));
            }
            apply(&mut staged, op);
        }
        if self.take_fault(tx_index, tx.ops.len()) {
            return Err(self.crash(tx_index, tx.target.index, &tx.ops, tx.ops.len()));
        }
        if let Some(disk) = &self.disk {
            disk.journal
                .lock()
                .append_tx(tx_index, tx.target.index, &tx.ops, tx.ops.len(), true)?;
        }
        entry.commit(staged, *latest);
        self.counters.add(&stats);
        Ok(TxReceipt { tx_index, stats })
    }

    fn journal_len(&self) -> u64 {
        self.disk.as_ref().map_or(0, |d| d.journal.lock().len())
    }

    /// Rebuilds in-memory state from the flushed files plus the journal.
    fn reload(&self) -> Result<(), StoreError> {
        let disk = self.disk.as_ref().expect("reload needs a file backend");
        let mut latest = self.latest.write();
        let mut objects = self.objects.write();
        let manifest = persist::read_manifest(&disk.dir)?;

        let mut loaded: HashMap<u64, ObjectEntry> = HashMap::new();
        for (index, generation) in persist::list_versions(&disk.dir)? {
            let state = Arc::new(persist::load_version(&disk.dir, index, generation)?);
            let entry = loaded.entry(index).or_default();
            if generation == 0 {
                entry.head = state;
            } else {
                entry.frozen.push((generation, state));
                entry.head_epoch = generation;
            }
        }
        for entry in loaded.values_mut() {
            entry.frozen_saved = entry.frozen.len();
        }

        *latest = manifest.parse_u64("store.latest_snapshot")?;
        let mut next_tx = manifest.parse_u64("store.next_tx")?;

        let mut journal = disk.journal.lock();
        let (records, valid) = journal.replay()?;
        journal.truncate(valid)?;
        for record in records {
            match record {
                JournalRecord::Tx { seq, object, ops } => {
                    let entry = loaded.entry(object).or_default();
                    let mut staged = (*entry.head).clone();
                    for op in &ops {
                        apply(&mut staged, op);
                    }
                    entry.commit(staged, *latest);
                    next_tx = next_tx.max(seq + 1);
                }
                JournalRecord::Snapshot { generation } => *latest = generation,
            }
        }
        // Torn records still consumed a sequence number.
        next_tx = next_tx.max(self.next_tx.load(Ordering::SeqCst));

        *objects = loaded.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        self.next_tx.store(next_tx, Ordering::SeqCst);
        Ok(())
    }

    fn checkpoint(&self, disk: &Disk) -> Result<(), StoreError> {
        let latest = self.latest.write();
        let objects = self.objects.read();
        for (&index, entry) in objects.iter() {
            let mut entry = entry.lock();
            for (generation, state) in &entry.frozen[entry.frozen_saved..] {
                persist::save_version(&disk.dir, index, *generation, state)?;
            }
            entry.frozen_saved = entry.frozen.len();
            if entry.head_dirty {
                persist::save_version(&disk.dir, index, 0, &entry.head)?;
                entry.head_dirty = false;
            }
        }
        let mut manifest = disk.properties.clone();
        manifest.set("store.format", "vblk-1");
        manifest.set("store.image_id", self.config.image_id);
        manifest.set("store.physical_object_bytes", self.config.physical_object_bytes);
        manifest.set("store.sector_bytes", self.config.sector_bytes);
        manifest.set("store.latest_snapshot", *latest);
        let generations: Vec<String> = (1..=*latest).map(|g| g.to_string()).collect();
        manifest.set("store.snapshots", generations.join(","));
        manifest.set("store.next_tx", self.next_tx.load(Ordering::SeqCst));
        persist::write_manifest(&disk.dir, &manifest)?;
        disk.journal.lock().truncate(0)?;
        Ok(())
    }
}

fn apply(state: &mut ObjectState, op: &StoreOp) {
    match op {
        StoreOp::WriteExtent { offset, bytes } => state.write(*offset, bytes),
        StoreOp::KvSetRange { pairs } => {
            for (k, v) in pairs {
                state.kv_set(*k, v);
            }
        }
    }
}

impl ObjectAccess for ObjectStore {
    fn submit(&self, tx: Transaction) -> Result<TxReceipt, StoreError> {
        let receipt = self.do_submit(tx)?;
        if self.journal_len() > JOURNAL_CHECKPOINT_BYTES {
            self.flush()?;
        }
        Ok(receipt)
    }

    fn read_extent(&self, object: ObjectId, offset: u64, len: u64, at: SnapshotId) -> Result<Vec<u8>, StoreError> {
        self.check_live()?;
        self.check_object(object)?;
        self.check_extent(offset, len)?;
        self.check_snapshot(at)?;
        let stats = sector_footprint(&[Extent::new(offset, len)], self.config.sector_bytes, Direction::Read);
        self.config.latency.pause(stats.physical_sectors_read, 0, 0);
        let bytes = match self.version(object, at) {
            Some(state) => state.read(offset, len),
            None => vec![0; len as usize],
        };
        self.counters.add(&stats);
        Ok(bytes)
    }

    fn kv_get_range(
        &self,
        object: ObjectId,
        first_key: u64,
        last_key: u64,
        at: SnapshotId,
    ) -> Result<Vec<(u64, Vec<u8>)>, StoreError> {
        self.check_live()?;
        self.check_object(object)?;
        self.check_snapshot(at)?;
        let pairs = if first_key > last_key {
            Vec::new()
        } else {
            self.version(object, at)
                .map(|s| s.kv_range(first_key, last_key))
                .unwrap_or_default()
        };
        let bytes = pairs.iter().map(|(_, v)| v.len() as u64 + 8).sum();
        self.config.latency.pause(0, 1, bytes);
        self.counters.add(&AccessStats {
            kv_ops: 1,
            ..AccessStats::default()
        });
        Ok(pairs)
    }

    fn allocated(&self, object: ObjectId, offset: u64, len: u64, at: SnapshotId) -> Result<Vec<Extent>, StoreError> {
        self.check_live()?;
        self.check_object(object)?;
        self.check_snapshot(at)?;
        Ok(self
            .version(object, at)
            .map(|s| s.allocated(offset, len))
            .unwrap_or_default())
    }

    fn create_snapshot(&self) -> Result<SnapshotId, StoreError> {
        self.check_live()?;
        let mut latest = self.latest.write();
        let generation = *latest + 1;
        if let Some(disk) = &self.disk {
            disk.journal.lock().append_snapshot(generation)?;
        }
        *latest = generation;
        Ok(SnapshotId(generation))
    }

    fn latest_snapshot(&self) -> SnapshotId {
        SnapshotId(*self.latest.read())
    }

    fn stats(&self) -> AccessStats {
        self.counters.load()
    }

    fn reset_stats(&self) {
        self.counters.reset();
    }

    fn flush(&self) -> Result<(), StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        match &self.disk {
            Some(disk) => self.checkpoint(disk),
            None => Ok(()),
        }
    }
}
