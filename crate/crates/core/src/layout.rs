// SPDX-License-Identifier: Apache-2.0

//! Virtual-to-object mapping and per-layout placement of IV metadata.
//!
//! A virtual disk is cut into objects of `object_data_bytes` (4 MiB by
//! default). Within an object, block `i` and its 16-byte IV land at:
//!
//! | layout       | data            | IV                                |
//! |--------------|-----------------|-----------------------------------|
//! | `baseline`   | `4096·i`        | none                              |
//! | `unaligned`  | `4112·i`        | `4112·i + 4096`                   |
//! | `object-end` | `4096·i`        | `object_data_bytes + 16·i`        |
//! | `kv`         | `4096·i`        | kv map, key `4096·i`              |
//!
//! Physical-sector accounting charges every 4 KiB sector an extent overlaps;
//! partially covered sectors on the write path are read-modify-write.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Range};
use std::str::FromStr;

use thiserror::Error;

use crate::sector_crypto::{IvPolicy, IV_BYTES, SECTOR_BYTES};

pub const DEFAULT_OBJECT_BYTES: u64 = 4 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("object size {0} is not a positive multiple of the sector size")]
    BadObjectSize(u64),
    #[error("offset {offset} / length {length} are not sector aligned")]
    Unaligned { offset: u64, length: u64 },
    #[error("zero-length IO")]
    ZeroLength,
    #[error("sector {sector} is outside an image of {image_sectors} sectors")]
    OutOfBounds { sector: u64, image_sectors: u64 },
    #[error("block index {index} exceeds {blocks_per_object} blocks per object")]
    BlockIndex { index: u64, blocks_per_object: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    object_data_bytes: u64,
    sector_bytes: u64,
    iv_bytes: u64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            object_data_bytes: DEFAULT_OBJECT_BYTES,
            sector_bytes: SECTOR_BYTES as u64,
            iv_bytes: IV_BYTES as u64,
        }
    }
}

impl Geometry {
    pub fn with_object_bytes(object_data_bytes: u64) -> Result<Self, LayoutError> {
        let sector = SECTOR_BYTES as u64;
        if object_data_bytes == 0 || !object_data_bytes.is_multiple_of(sector) {
            return Err(LayoutError::BadObjectSize(object_data_bytes));
        }
        Ok(Self {
            object_data_bytes,
            ..Self::default()
        })
    }

    pub fn object_data_bytes(&self) -> u64 {
        self.object_data_bytes
    }

    pub fn sector_bytes(&self) -> u64 {
        self.sector_bytes
    }

    pub fn iv_bytes(&self) -> u64 {
        self.iv_bytes
    }

    pub fn blocks_per_object(&self) -> u64 {
        self.object_data_bytes / self.sector_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayoutKind {
    Baseline,
    Unaligned,
    ObjectEnd,
    KeyValue,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::Baseline,
        LayoutKind::Unaligned,
        LayoutKind::ObjectEnd,
        LayoutKind::KeyValue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutKind::Baseline => "baseline",
            LayoutKind::Unaligned => "unaligned",
            LayoutKind::ObjectEnd => "object-end",
            LayoutKind::KeyValue => "kv",
        }
    }

    /// The layout actually used for placement: without stored IVs every
    /// layout collapses to the baseline arrangement.
    pub fn effective(self, policy: IvPolicy) -> LayoutKind {
        match policy {
            IvPolicy::DeterministicLba => LayoutKind::Baseline,
            IvPolicy::RandomStored => self,
        }
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayoutKind::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown layout {s:?} (expected baseline|unaligned|object-end|kv)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockAddress {
    pub object_id: u64,
    pub block_index: u64,
}

/// A byte range inside one physical object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Extent {
    pub offset: u64,
    pub len: u64,
}

impl Extent {
    pub fn new(offset: u64, len: u64) -> Self {
        Self { offset, len }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len
    }

    pub fn contains(&self, offset: u64, len: u64) -> bool {
        offset >= self.offset && offset + len <= self.end()
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

/// One ranged key-value operation covering keys `first_key..=last_key`
/// in steps of one sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvRange {
    pub first_key: u64,
    pub last_key: u64,
}

impl KvRange {
    pub fn keys(&self) -> impl Iterator<Item = u64> {
        (self.first_key..=self.last_key).step_by(SECTOR_BYTES)
    }

    pub fn key_count(&self) -> u64 {
        (self.last_key - self.first_key) / SECTOR_BYTES as u64 + 1
    }
}

/// What a logical IO expands to inside a single object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtentPlan {
    pub object_id: u64,
    pub first_block: u64,
    pub block_count: u64,
    pub data_extents: Vec<Extent>,
    pub iv_extents: Vec<Extent>,
    pub kv_ops: Vec<KvRange>,
}

impl ExtentPlan {
    pub fn blocks(&self) -> Range<u64> {
        self.first_block..self.first_block + self.block_count
    }

    /// Data and IV extents merged wherever they touch; this is what is
    /// actually issued to the object store.
    pub fn io_extents(&self) -> Vec<Extent> {
        let mut all: Vec<Extent> = self.data_extents.iter().chain(&self.iv_extents).copied().collect();
        all.sort();
        coalesce(all)
    }

    pub fn iv_bytes(&self) -> u64 {
        let kv: u64 = self.kv_ops.iter().map(|op| op.key_count()).sum::<u64>() * IV_BYTES as u64;
        self.iv_extents.iter().map(|e| e.len).sum::<u64>() + kv
    }
}

fn coalesce(sorted: Vec<Extent>) -> Vec<Extent> {
    let mut out: Vec<Extent> = Vec::with_capacity(sorted.len());
    for e in sorted {
        match out.last_mut() {
            Some(last) if last.end() == e.offset => last.len += e.len,
            _ => out.push(e),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Read => "read",
            Direction::Write => "write",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct AccessStats {
    pub physical_sectors_read: u64,
    pub physical_sectors_written: u64,
    pub rmw_sectors: u64,
    pub kv_ops: u64,
}

impl AccessStats {
    /// Sectors touched in the direction of the IO itself.
    pub fn sectors_for(&self, direction: Direction) -> u64 {
        match direction {
            Direction::Read => self.physical_sectors_read,
            Direction::Write => self.physical_sectors_written,
        }
    }
}

impl Add for AccessStats {
    type Output = AccessStats;

    fn add(mut self, rhs: AccessStats) -> AccessStats {
        self += rhs;
        self
    }
}

impl AddAssign for AccessStats {
    fn add_assign(&mut self, rhs: AccessStats) {
        self.physical_sectors_read += rhs.physical_sectors_read;
        self.physical_sectors_written += rhs.physical_sectors_written;
        self.rmw_sectors += rhs.rmw_sectors;
        self.kv_ops += rhs.kv_ops;
    }
}

pub fn map_lba(geom: &Geometry, sector_index: u64, image_sectors: u64) -> Result<BlockAddress, LayoutError> {
    if sector_index >= image_sectors {
        return Err(LayoutError::OutOfBounds {
            sector: sector_index,
            image_sectors,
        });
    }
    let bpo = geom.blocks_per_object();
    Ok(BlockAddress {
        object_id: sector_index / bpo,
        block_index: sector_index % bpo,
    })
}

pub fn physical_object_size(geom: &Geometry, layout: LayoutKind) -> u64 {
    match layout {
        LayoutKind::Baseline | LayoutKind::KeyValue => geom.object_data_bytes,
        LayoutKind::Unaligned | LayoutKind::ObjectEnd => {
            geom.object_data_bytes + geom.blocks_per_object() * geom.iv_bytes
        }
    }
}

/// Placement of one block: `(data_offset, iv_offset)`. The key-value layout
/// keeps its IV out of band under [`kv_key`].
pub fn locate_block(geom: &Geometry, layout: LayoutKind, block_index: u64) -> Result<(u64, Option<u64>), LayoutError> {
    let bpo = geom.blocks_per_object();
    if block_index >= bpo {
        return Err(LayoutError::BlockIndex {
            index: block_index,
            blocks_per_object: bpo,
        });
    }
    let s = geom.sector_bytes;
    Ok(match layout {
        LayoutKind::Baseline | LayoutKind::KeyValue => (s * block_index, None),
        LayoutKind::Unaligned => {
            let stride = s + geom.iv_bytes;
            (stride * block_index, Some(stride * block_index + s))
        }
        LayoutKind::ObjectEnd => (
            s * block_index,
            Some(geom.object_data_bytes + geom.iv_bytes * block_index),
        ),
    })
}

/// Key under which the key-value layout stores a block's IV: the block's
/// byte offset within its object.
pub fn kv_key(geom: &Geometry, block_index: u64) -> u64 {
    block_index * geom.sector_bytes
}

pub fn plan_io(
    geom: &Geometry,
    layout: LayoutKind,
    policy: IvPolicy,
    byte_offset: u64,
    byte_length: u64,
) -> Result<Vec<ExtentPlan>, LayoutError> {
    let s = geom.sector_bytes;
    if byte_length == 0 {
        return Err(LayoutError::ZeroLength);
    }
    if !byte_offset.is_multiple_of(s) || !byte_length.is_multiple_of(s) {
        return Err(LayoutError::Unaligned {
            offset: byte_offset,
            length: byte_length,
        });
    }
    let layout = layout.effective(policy);
    let bpo = geom.blocks_per_object();
    let mut sector = byte_offset / s;
    let end = sector + byte_length / s;
    let mut plans = Vec::new();
    while sector < end {
        let object_id = sector / bpo;
        let first_block = sector % bpo;
        let block_count = (bpo - first_block).min(end - sector);
        plans.push(plan_object(geom, layout, object_id, first_block, block_count));
        sector += block_count;
    }
    Ok(plans)
}

fn plan_object(geom: &Geometry, layout: LayoutKind, object_id: u64, first_block: u64, block_count: u64) -> ExtentPlan {
    let mut data = Vec::new();
    let mut ivs = Vec::new();
    for block in first_block..first_block + block_count {
        let (d, iv) = locate_block(geom, layout, block).expect("block index within object");
        data.push(Extent::new(d, geom.sector_bytes));
        if let Some(iv) = iv {
            ivs.push(Extent::new(iv, geom.iv_bytes));
        }
    }
    let kv_ops = if layout == LayoutKind::KeyValue {
        vec![KvRange {
            first_key: kv_key(geom, first_block),
            last_key: kv_key(geom, first_block + block_count - 1),
        }]
    } else {
        Vec::new()
    };
    ExtentPlan {
        object_id,
        first_block,
        block_count,
        data_extents: coalesce(data),
        iv_extents: coalesce(ivs),
        kv_ops,
    }
}

/// Physical sectors touched by a set of disjoint extents, each shared
/// sector charged once.
pub fn sector_footprint(extents: &[Extent], sector_bytes: u64, direction: Direction) -> AccessStats {
    let mut full = 0u64;
    let mut edges: BTreeMap<u64, u64> = BTreeMap::new();
    for e in extents.iter().filter(|e| e.len > 0) {
        let first = e.offset / sector_bytes;
        let last = (e.end() - 1) / sector_bytes;
        if first == last {
            *edges.entry(first).or_default() += e.len;
            continue;
        }
        *edges.entry(first).or_default() += (first + 1) * sector_bytes - e.offset;
        *edges.entry(last).or_default() += e.end() - last * sector_bytes;
        full += last - first - 1;
    }
    let touched = full + edges.len() as u64;
    let partial = edges.values().filter(|&&covered| covered < sector_bytes).count() as u64;
    match direction {
        Direction::Read => AccessStats {
            physical_sectors_read: touched,
            ..AccessStats::default()
        },
        Direction::Write => AccessStats {
            physical_sectors_read: partial,
            physical_sectors_written: touched,
            rmw_sectors: partial,
            kv_ops: 0,
        },
    }
}

pub fn count_physical_sectors(geom: &Geometry, plan: &ExtentPlan, direction: Direction) -> AccessStats {
    let mut stats = sector_footprint(&plan.io_extents(), geom.sector_bytes, direction);
    stats.kv_ops += plan.kv_ops.len() as u64;
    stats
}
