// SPDX-License-Identifier: Apache-2.0

//! Attack demonstrations against an image, one report per probe.
//!
//! Probes act like an adversary with raw access to the object store: they
//! capture and plant stored bytes, and otherwise use only the public
//! read/write API. They never touch the key.
//!
//! Under the `lba` policy probes run on a Baseline image; under `random`
//! they run on an ObjectEnd image.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::device::{Backend, BlockDevice, DeviceOptions, ImageError, ImageRegistry, ImageSpec, IoError};
use crate::layout::{kv_key, locate_block, LayoutKind};
use crate::sector_crypto::{
    diff_subblocks, EncryptionKey, IvPolicy, SectorBuf, SeededEntropy, IV_BYTES, SECTOR_BYTES, SUBBLOCKS_PER_SECTOR,
    SUBBLOCK_BYTES,
};
use crate::store::{SnapshotId, StoreOp, Transaction};

const PROBE_IMAGE_BYTES: u64 = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Vulnerable,
    Mitigated,
    /// Evidence matched neither expected outcome.
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Vulnerable => "vulnerable",
            Verdict::Mitigated => "mitigated",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeReport {
    pub name: &'static str,
    pub policy: IvPolicy,
    pub verdict: Verdict,
    pub evidence: Vec<(String, String)>,
}

impl ProbeReport {
    fn new(name: &'static str, policy: IvPolicy) -> Self {
        Self {
            name,
            policy,
            verdict: Verdict::Inconclusive,
            evidence: Vec::new(),
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.evidence.push((key.to_string(), value.to_string()));
    }

    pub fn evidence(&self, key: &str) -> Option<&str> {
        self.evidence.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[probe {}]", self.name)?;
        writeln!(f, "policy = {}", self.policy)?;
        writeln!(f, "verdict = {}", self.verdict)?;
        for (k, v) in &self.evidence {
            writeln!(f, "evidence.{k} = {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Stored form of one sector as the adversary sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSector {
    pub data: SectorBuf,
    pub iv: Option<[u8; IV_BYTES]>,
}

/// Reads the stored ciphertext and IV of `lba` straight from the store.
pub fn capture(dev: &BlockDevice, lba: u64, at: SnapshotId) -> Result<RawSector, IoError> {
    let spec = dev.spec();
    let layout = spec.layout.effective(spec.policy);
    let bpo = spec.geometry.blocks_per_object();
    let oid = dev.object_id(lba / bpo);
    let block = lba % bpo;
    let (data_off, iv_off) = locate_block(&spec.geometry, layout, block).expect("block in range");
    let store = dev.store();
    let data = store.read_extent(oid, data_off, SECTOR_BYTES as u64, at)?;
    let iv = match iv_off {
        Some(off) => Some(store.read_extent(oid, off, IV_BYTES as u64, at)?),
        None if layout == LayoutKind::KeyValue => {
            let key = kv_key(&spec.geometry, block);
            store.kv_get_range(oid, key, key, at)?.pop().map(|(_, v)| v)
        }
        None => None,
    };
    Ok(RawSector {
        data: SectorBuf::from_slice(&data).expect("sector-sized read"),
        iv: iv.map(|v| v.try_into().expect("16-byte IV")),
    })
}

/// Writes `raw` into the stored location of `lba` at head.
pub fn plant(dev: &BlockDevice, lba: u64, raw: &RawSector) -> Result<(), IoError> {
    let spec = dev.spec();
    let layout = spec.layout.effective(spec.policy);
    let bpo = spec.geometry.blocks_per_object();
    let block = lba % bpo;
    let (data_off, iv_off) = locate_block(&spec.geometry, layout, block).expect("block in range");
    let mut ops = vec![StoreOp::WriteExtent {
        offset: data_off,
        bytes: raw.data.to_vec(),
    }];
    if let Some(iv) = raw.iv {
        match iv_off {
            Some(off) => ops.push(StoreOp::WriteExtent {
                offset: off,
                bytes: iv.to_vec(),
            }),
            None => ops.push(StoreOp::KvSetRange {
                pairs: vec![(kv_key(&spec.geometry, block), iv.to_vec())],
            }),
        }
    }
    dev.store().submit(Transaction {
        target: dev.object_id(lba / bpo),
        ops,
    })?;
    Ok(())
}

/// Fresh in-memory image for probing under `policy`.
pub fn probe_device(policy: IvPolicy, seed: u64) -> Result<BlockDevice, ProbeError> {
    let layout = match policy {
        IvPolicy::DeterministicLba => LayoutKind::Baseline,
        IvPolicy::RandomStored => LayoutKind::ObjectEnd,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key = EncryptionKey::generate(&mut rng, 0);
    let spec = ImageSpec::new(1, PROBE_IMAGE_BYTES, layout, policy)?;
    let opts = DeviceOptions {
        iv_source: Arc::new(SeededEntropy::new(rng.next_u64())),
        ..DeviceOptions::default()
    };
    Ok(BlockDevice::create(
        &Backend::Memory(ImageRegistry::new()),
        spec,
        key,
        opts,
    )?)
}

fn random_sector(rng: &mut ChaCha20Rng) -> SectorBuf {
    let mut s = SectorBuf::zeroed();
    rng.fill_bytes(&mut s);
    s
}

fn format_set(set: &BTreeSet<usize>) -> String {
    let v: Vec<String> = set.iter().map(|i| i.to_string()).collect();
    format!("[{}]", v.join(","))
}

fn offset(lba: u64) -> u64 {
    lba * SECTOR_BYTES as u64
}

/// Same plaintext written twice, then once more with one bit flipped.
pub fn probe_overwrite_detection(dev: &BlockDevice, seed: u64) -> Result<ProbeReport, ProbeError> {
    let mut report = ProbeReport::new("overwrite_detection", dev.spec().policy);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let lba = rng.gen_range(0..dev.spec().sectors());
    let plain = random_sector(&mut rng);

    dev.write(offset(lba), &plain)?;
    let first = capture(dev, lba, SnapshotId::HEAD)?;
    dev.write(offset(lba), &plain)?;
    let second = capture(dev, lba, SnapshotId::HEAD)?;
    let same = diff_subblocks(&first.data, &second.data);

    let bit = rng.gen_range(0..SECTOR_BYTES * 8);
    let mut flipped = plain.clone();
    flipped[bit / 8] ^= 1 << (bit % 8);
    dev.write(offset(lba), &flipped)?;
    let third = capture(dev, lba, SnapshotId::HEAD)?;
    let flip = diff_subblocks(&second.data, &third.data);

    report.note("lba", lba);
    report.note("identical_overwrite_changed_subblocks", same.len());
    report.note("flipped_bit", bit);
    report.note("flipped_bit_subblock", bit / 8 / SUBBLOCK_BYTES);
    report.note("bit_flip_changed_subblocks", flip.len());
    if flip.len() < SUBBLOCKS_PER_SECTOR {
        report.note("bit_flip_changed_indices", format_set(&flip));
    }
    report.verdict = if same.is_empty() {
        Verdict::Vulnerable
    } else if same.len() == SUBBLOCKS_PER_SECTOR {
        Verdict::Mitigated
    } else {
        Verdict::Inconclusive
    };
    Ok(report)
}

/// Builds a sector from alternating sub-blocks of `a` (even) and `b` (odd).
fn interleave(a: &SectorBuf, b: &SectorBuf) -> SectorBuf {
    let mut out = a.clone();
    for i in (1..SUBBLOCKS_PER_SECTOR).step_by(2) {
        let r = i * SUBBLOCK_BYTES..(i + 1) * SUBBLOCK_BYTES;
        out[r.clone()].copy_from_slice(&b[r]);
    }
    out
}

struct SpliceOutcome {
    /// Sub-blocks that decrypted to the matching source plaintext.
    from_a: usize,
    from_b: usize,
    error: Option<String>,
}

/// Plants a ciphertext spliced from `a` and `b` (IV taken from `a`) at
/// `lba` and reads it back.
fn splice_and_read(
    dev: &BlockDevice,
    lba: u64,
    a: &RawSector,
    b: &RawSector,
    plain_a: &SectorBuf,
    plain_b: &SectorBuf,
) -> Result<SpliceOutcome, ProbeError> {
    let hybrid = RawSector {
        data: interleave(&a.data, &b.data),
        iv: a.iv,
    };
    plant(dev, lba, &hybrid)?;
    let got = match dev.read(offset(lba), SECTOR_BYTES as u64, SnapshotId::HEAD) {
        Ok(got) => SectorBuf::from_slice(&got).expect("one sector"),
        Err(e @ IoError::BindingMismatch { .. }) => {
            return Ok(SpliceOutcome {
                from_a: 0,
                from_b: 0,
                error: Some(e.to_string()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = SpliceOutcome {
        from_a: 0,
        from_b: 0,
        error: None,
    };
    for i in 0..SUBBLOCKS_PER_SECTOR {
        let (src, count) = if i % 2 == 0 {
            (plain_a, &mut out.from_a)
        } else {
            (plain_b, &mut out.from_b)
        };
        if got.sub_block(i) == src.sub_block(i) {
            *count += 1;
        }
    }
    Ok(out)
}

const HALF: usize = SUBBLOCKS_PER_SECTOR / 2;

fn splice_verdict(o: &SpliceOutcome) -> Verdict {
    if o.from_a == HALF && o.from_b == HALF {
        Verdict::Vulnerable
    } else if o.from_b == 0 {
        Verdict::Mitigated
    } else {
        Verdict::Inconclusive
    }
}

/// Two versions at one LBA, then a ciphertext mixing their sub-blocks.
pub fn probe_subblock_splice(dev: &BlockDevice, seed: u64) -> Result<ProbeReport, ProbeError> {
    let mut report = ProbeReport::new("subblock_splice", dev.spec().policy);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let lba = rng.gen_range(0..dev.spec().sectors());
    let v1 = random_sector(&mut rng);
    let v2 = random_sector(&mut rng);

    dev.write(offset(lba), &v1)?;
    let c1 = capture(dev, lba, SnapshotId::HEAD)?;
    dev.write(offset(lba), &v2)?;
    let c2 = capture(dev, lba, SnapshotId::HEAD)?;

    let identity = splice_and_read(dev, lba, &c1, &c1, &v1, &v1)?;
    let mixed = splice_and_read(dev, lba, &c1, &c2, &v1, &v2)?;

    report.note("lba", lba);
    report.note(
        "identity_splice_reads_v1",
        identity.from_a + identity.from_b == SUBBLOCKS_PER_SECTOR,
    );
    report.note("v1_subblocks_recovered", format!("{}/{HALF}", mixed.from_a));
    report.note("v2_subblocks_recovered", format!("{}/{HALF}", mixed.from_b));
    report.note("read_error", mixed.error.as_deref().unwrap_or("none"));
    report.note("undetected", mixed.error.is_none());
    report.verdict = splice_verdict(&mixed);
    Ok(report)
}

/// Copies a stored sector to other LBAs, `trials` times.
pub fn probe_cross_lba_replay(dev: &BlockDevice, seed: u64, trials: u32) -> Result<ProbeReport, ProbeError> {
    let mut report = ProbeReport::new("cross_lba_replay", dev.spec().policy);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sectors = dev.spec().sectors();
    let mut detected = 0u32;
    let mut silent_corruption = 0u32;
    let mut other = 0u32;
    for _ in 0..trials {
        let a = rng.gen_range(0..sectors);
        let b = (a + rng.gen_range(1..sectors)) % sectors;
        let plain = random_sector(&mut rng);
        dev.write(offset(a), &plain)?;
        let raw = capture(dev, a, SnapshotId::HEAD)?;
        plant(dev, b, &raw)?;
        match dev.read(offset(b), SECTOR_BYTES as u64, SnapshotId::HEAD) {
            Err(IoError::BindingMismatch { sector, found }) if sector == b && found == a => detected += 1,
            Ok(got) if got[..] != plain[..] => silent_corruption += 1,
            _ => other += 1,
        }
    }

    // Same-LBA rollback: an older capture planted back at its own LBA.
    let lba = rng.gen_range(0..sectors);
    let old = random_sector(&mut rng);
    dev.write(offset(lba), &old)?;
    let raw = capture(dev, lba, SnapshotId::HEAD)?;
    dev.write(offset(lba), &random_sector(&mut rng))?;
    plant(dev, lba, &raw)?;
    let rolled_back = dev.read(offset(lba), SECTOR_BYTES as u64, SnapshotId::HEAD)?[..] == old[..];

    report.note("trials", trials);
    report.note("binding_mismatch", detected);
    report.note("silent_corruption", silent_corruption);
    report.note("other_outcome", other);
    report.note("same_lba_rollback_undetected", rolled_back);
    report.verdict = if trials > 0 && detected == trials {
        Verdict::Mitigated
    } else if trials > 0 && silent_corruption == trials {
        Verdict::Vulnerable
    } else {
        Verdict::Inconclusive
    };
    Ok(report)
}

/// Version before and after a snapshot, mixed at sub-block granularity.
pub fn probe_snapshot_same_iv(dev: &BlockDevice, seed: u64) -> Result<ProbeReport, ProbeError> {
    let policy = dev.spec().policy;
    let mut report = ProbeReport::new("snapshot_same_iv", policy);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let lba = rng.gen_range(0..dev.spec().sectors());
    let v1 = random_sector(&mut rng);
    let v2 = random_sector(&mut rng);

    dev.write(offset(lba), &v1)?;
    let snap = dev.snapshot()?;
    dev.write(offset(lba), &v2)?;
    let old = capture(dev, lba, snap)?;
    let new = capture(dev, lba, SnapshotId::HEAD)?;

    // Under lba the IV is derived, so both versions share it by construction.
    let same_iv = match (old.iv, new.iv) {
        (Some(a), Some(b)) => a == b,
        (None, None) => policy == IvPolicy::DeterministicLba,
        _ => false,
    };
    let mixed = splice_and_read(dev, lba, &new, &old, &v2, &v1)?;

    report.note("lba", lba);
    report.note("snapshot", snap);
    report.note("versions_share_iv", same_iv);
    report.note("head_subblocks_recovered", format!("{}/{HALF}", mixed.from_a));
    report.note("snapshot_subblocks_recovered", format!("{}/{HALF}", mixed.from_b));
    report.note("undetected", mixed.error.is_none());
    report.verdict = match (same_iv, splice_verdict(&mixed)) {
        (true, Verdict::Vulnerable) => Verdict::Vulnerable,
        (false, Verdict::Mitigated) => Verdict::Mitigated,
        _ => Verdict::Inconclusive,
    };
    Ok(report)
}

/// Runs every probe on its own fresh image.
pub fn run_all(policy: IvPolicy, seed: u64, replay_trials: u32) -> Result<Vec<ProbeReport>, ProbeError> {
    Ok(vec![
        probe_overwrite_detection(&probe_device(policy, seed)?, seed)?,
        probe_subblock_splice(&probe_device(policy, seed + 1)?, seed + 1)?,
        probe_cross_lba_replay(&probe_device(policy, seed + 2)?, seed + 2, replay_trials)?,
        probe_snapshot_same_iv(&probe_device(policy, seed + 3)?, seed + 3)?,
    ])
}
