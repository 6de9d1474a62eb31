// SPDX-License-Identifier: Apache-2.0

//! Sparse contents of one object version.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::layout::Extent;

pub(crate) const PAGE: u64 = 4096;

type Page = Arc<[u8; PAGE as usize]>;

/// Byte contents, allocation map and kv map of one object version.
///
/// Pages are shared between versions and copied on first write, so
/// freezing a version for a snapshot costs a map clone, not a data copy.
#[derive(Clone, Default, Debug, PartialEq, Eq)]
pub(crate) struct ObjectState {
    pages: BTreeMap<u64, Page>,
    allocated: RangeSet,
    kv: BTreeMap<u64, Arc<[u8]>>,
}

impl ObjectState {
    pub fn write(&mut self, offset: u64, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        let mut pos = offset;
        let mut src = bytes;
        while !src.is_empty() {
            let page_no = pos / PAGE;
            let in_page = (pos % PAGE) as usize;
            let n = src.len().min(PAGE as usize - in_page);
            let page = self
                .pages
                .entry(page_no)
                .or_insert_with(|| Arc::new([0u8; PAGE as usize]));
            Arc::make_mut(page)[in_page..in_page + n].copy_from_slice(&src[..n]);
            src = &src[n..];
            pos += n as u64;
        }
        self.allocated.insert(offset, offset + bytes.len() as u64);
    }

    pub fn read(&self, offset: u64, len: u64) -> Vec<u8> {
        let mut out = vec![0u8; len as usize];
        let end = offset + len;
        for (&page_no, page) in self.pages.range(offset / PAGE..end.div_ceil(PAGE)) {
            let page_start = page_no * PAGE;
            let from = offset.max(page_start);
            let to = end.min(page_start + PAGE);
            out[(from - offset) as usize..(to - offset) as usize]
                .copy_from_slice(&page[(from - page_start) as usize..(to - page_start) as usize]);
        }
        out
    }

    /// Allocated sub-ranges of `[offset, offset + len)`.
    pub fn allocated(&self, offset: u64, len: u64) -> Vec<Extent> {
        self.allocated.intersect(offset, offset + len)
    }

    pub fn allocated_all(&self) -> Vec<Extent> {
        self.allocated.intersect(0, u64::MAX)
    }

    pub fn kv_set(&mut self, key: u64, value: &[u8]) {
        self.kv.insert(key, Arc::from(value));
    }

    pub fn kv_range(&self, first: u64, last: u64) -> Vec<(u64, Vec<u8>)> {
        self.kv.range(first..=last).map(|(k, v)| (*k, v.to_vec())).collect()
    }

    pub fn kv_entries(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.kv.iter().map(|(k, v)| (*k, &v[..]))
    }
}

/// Disjoint, non-adjacent half-open ranges keyed by start.
#[derive(Clone, Default, Debug, PartialEq, Eq)]
pub(crate) struct RangeSet(BTreeMap<u64, u64>);

impl RangeSet {
    pub fn insert(&mut self, mut start: u64, mut end: u64) {
        if start >= end {
            return;
        }
        // Absorb a range that starts before and reaches `start`.
        if let Some((&s, &e)) = self.0.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
                self.0.remove(&s);
            }
        }
        let absorbed: Vec<(u64, u64)> = self.0.range(start..=end).map(|(&s, &e)| (s, e)).collect();
        for (s, e) in absorbed {
            end = end.max(e);
            self.0.remove(&s);
        }
        self.0.insert(start, end);
    }

    pub fn intersect(&self, start: u64, end: u64) -> Vec<Extent> {
        let mut out = Vec::new();
        let from = match self.0.range(..=start).next_back() {
            Some((&s, &e)) if e > start => s,
            _ => start,
        };
        for (&s, &e) in self.0.range(from..end) {
            let lo = s.max(start);
            let hi = e.min(end);
            if lo < hi {
                out.push(Extent::new(lo, hi - lo));
            }
        }
        out
    }
}
