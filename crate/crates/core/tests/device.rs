// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vblk_core::layout::Extent;
use vblk_core::probes::{capture, plant, RawSector};
use vblk_core::sector_crypto::SeededEntropy;
use vblk_core::store::{ObjectAccess, ObjectId, ObjectStore, SnapshotId, StoreError, StoreOp, Transaction, TxReceipt};
use vblk_core::{
    AccessStats, Backend, BlockDevice, DeviceOptions, EncryptionKey, ImageRegistry, ImageSpec, IoError, IvPolicy,
    LatencyModel, LayoutKind,
};

const VARIANTS: [(LayoutKind, IvPolicy); 4] = [
    (LayoutKind::Baseline, IvPolicy::DeterministicLba),
    (LayoutKind::Unaligned, IvPolicy::RandomStored),
    (LayoutKind::ObjectEnd, IvPolicy::RandomStored),
    (LayoutKind::KeyValue, IvPolicy::RandomStored),
];

fn key(seed: u64) -> EncryptionKey {
    EncryptionKey::generate(&mut ChaCha20Rng::seed_from_u64(seed), 0)
}

fn opts(seed: u64) -> DeviceOptions {
    DeviceOptions {
        iv_source: Arc::new(SeededEntropy::new(seed)),
        ..DeviceOptions::default()
    }
}

fn mem(layout: LayoutKind, policy: IvPolicy, size: u64) -> BlockDevice {
    let spec = ImageSpec::new(1, size, layout, policy).unwrap();
    BlockDevice::create(&Backend::Memory(ImageRegistry::new()), spec, key(1), opts(2)).unwrap()
}

fn random(rng: &mut ChaCha20Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

#[test]
fn stored_bytes_never_contain_plaintext() {
    for (layout, policy) in VARIANTS {
        let dev = mem(layout, policy, 8 << 20);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut written = Vec::new();
        for _ in 0..20 {
            let blocks = rng.gen_range(1..=8u64);
            let lba = rng.gen_range(0..2048 - blocks);
            let data = random(&mut rng, (blocks * 4096) as usize);
            dev.write(lba * 4096, &data).unwrap();
            written.push(data);
        }
        let phys = dev.spec().physical_object_bytes();
        let mut stored = Vec::new();
        for index in 0..dev.spec().object_count() {
            stored.extend(
                dev.store()
                    .read_extent(dev.object_id(index), 0, phys, SnapshotId::HEAD)
                    .unwrap(),
            );
        }
        let mut chunks = std::collections::HashSet::new();
        for window in stored.chunks(16) {
            chunks.insert(window.to_vec());
        }
        for data in &written {
            // Sub-block aligned pieces of plaintext can only line up with
            // 16-byte aligned stored chunks in every layout.
            for piece in data.chunks(16) {
                assert!(!chunks.contains(piece), "{layout}: plaintext visible in store");
            }
        }
    }
}

#[test]
fn full_image_round_trip_all_variants() {
    for (layout, policy) in VARIANTS {
        let dev = mem(layout, policy, 12 << 20);
        let data = random(&mut ChaCha20Rng::seed_from_u64(7), 12 << 20);
        let out = dev.write(0, &data).unwrap();
        assert_eq!(out.transactions, 3);
        assert_eq!(dev.read(0, 12 << 20, SnapshotId::HEAD).unwrap(), data, "{layout}");
    }
}

#[test]
fn transplant_is_detected_in_every_random_layout() {
    for (layout, policy) in &VARIANTS[1..] {
        let dev = mem(*layout, *policy, 8 << 20);
        dev.write(10 * 4096, &[5; 4096]).unwrap();
        let raw = capture(&dev, 10, SnapshotId::HEAD).unwrap();
        // Across an object boundary too.
        for target in [11, 1500] {
            plant(&dev, target, &raw).unwrap();
            match dev.read(target * 4096, 4096, SnapshotId::HEAD) {
                Err(IoError::BindingMismatch { sector, found }) => assert_eq!((sector, found), (target, 10)),
                other => panic!("{layout}: expected BindingMismatch, got {other:?}"),
            }
        }
    }
}

#[test]
fn data_without_iv_is_reported() {
    for (layout, policy) in &VARIANTS[1..] {
        let dev = mem(*layout, *policy, 4 << 20);
        let raw = RawSector {
            data: vblk_core::sector_crypto::SectorBuf::zeroed(),
            iv: None,
        };
        plant(&dev, 3, &raw).unwrap();
        assert!(
            matches!(
                dev.read(3 * 4096, 4096, SnapshotId::HEAD),
                Err(IoError::IvMissing { sector: 3 })
            ),
            "{layout}"
        );
    }
}

#[test]
fn deterministic_versions_share_ciphertext_random_do_not() {
    for (layout, policy) in [VARIANTS[0], VARIANTS[2]] {
        let dev = mem(layout, policy, 4 << 20);
        dev.write(0, &[1; 4096]).unwrap();
        let s = dev.snapshot().unwrap();
        dev.write(0, &[1; 4096]).unwrap();
        let a = capture(&dev, 0, s).unwrap();
        let b = capture(&dev, 0, SnapshotId::HEAD).unwrap();
        assert_eq!(a == b, policy == IvPolicy::DeterministicLba, "{layout}");
    }
}

#[test]
fn file_backend_is_durable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("img");
    let backend = Backend::File(dir.clone());
    let spec = ImageSpec::new(9, 16 << 20, LayoutKind::Unaligned, IvPolicy::RandomStored).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = random(&mut rng, 64 << 10);
    let b = random(&mut rng, 4096);
    {
        let dev = BlockDevice::create(&backend, spec, key(3), opts(1)).unwrap();
        dev.write(4 << 20, &a).unwrap();
        dev.flush().unwrap();
        dev.snapshot().unwrap();
        // Journaled only.
        dev.write(4 << 20, &b).unwrap();
    }
    assert!(matches!(
        BlockDevice::create(&backend, spec, key(3), opts(1)),
        Err(vblk_core::ImageError::Duplicate(9))
    ));
    assert!(matches!(
        BlockDevice::open(&backend, 9, key(4), opts(1)),
        Err(vblk_core::ImageError::KeyMismatch)
    ));
    let dev = BlockDevice::open(&backend, 9, key(3), opts(1)).unwrap();
    assert_eq!(dev.spec(), &spec);
    let head = dev.read(4 << 20, 64 << 10, SnapshotId::HEAD).unwrap();
    assert_eq!(&head[..4096], &b[..]);
    assert_eq!(&head[4096..], &a[4096..]);
    assert_eq!(dev.read(4 << 20, 64 << 10, SnapshotId(1)).unwrap(), a);
    assert!(BlockDevice::open(&Backend::File(tmp.path().join("none")), 9, key(3), opts(1)).is_err());
}

#[test]
fn corrupt_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("img");
    let spec = ImageSpec::new(2, 1 << 20, LayoutKind::KeyValue, IvPolicy::RandomStored).unwrap();
    BlockDevice::create(&Backend::File(dir.clone()), spec, key(1), opts(1)).unwrap();
    let manifest = std::fs::read_to_string(dir.join("manifest")).unwrap();
    std::fs::write(
        dir.join("manifest"),
        manifest.replace("image.layout = kv", "image.layout = ring"),
    )
    .unwrap();
    assert!(matches!(
        BlockDevice::open_dir(&dir, key(1), opts(1)),
        Err(vblk_core::ImageError::CorruptManifest(_))
    ));
}

#[test]
fn overlapping_writers_leave_whole_sectors() {
    for (layout, policy) in VARIANTS {
        let dev = mem(layout, policy, 4 << 20);
        std::thread::scope(|s| {
            for t in 0..8u8 {
                let dev = &dev;
                s.spawn(move || {
                    for _ in 0..10 {
                        dev.write(0, &vec![t + 1; 64 << 10]).unwrap();
                    }
                });
            }
        });
        let got = dev.read(0, 64 << 10, SnapshotId::HEAD).unwrap();
        for sector in got.chunks(4096) {
            assert!(sector.iter().all(|&b| b == sector[0]) && sector[0] != 0, "{layout}");
        }
    }
}

/// Store wrapper that holds one kind of read until the other kind has been
/// issued. A device that waited for one before starting the other would
/// stall here until the timeout.
struct Rendezvous {
    inner: ObjectStore,
    data_bytes: u64,
    hold_data: bool,
    seen: Mutex<(bool, bool)>,
    cv: Condvar,
    timed_out: AtomicBool,
}

impl Rendezvous {
    fn arrive(&self, is_iv: bool) {
        let mut seen = self.seen.lock().unwrap();
        if is_iv {
            seen.1 = true;
        } else {
            seen.0 = true;
        }
        self.cv.notify_all();
        if is_iv == self.hold_data {
            return;
        }
        let (guard, res) = self
            .cv
            .wait_timeout_while(seen, Duration::from_secs(3), |s| !(s.0 && s.1))
            .unwrap();
        drop(guard);
        if res.timed_out() {
            self.timed_out.store(true, Ordering::SeqCst);
        }
    }

    fn reset(&self) {
        *self.seen.lock().unwrap() = (false, false);
    }
}

impl ObjectAccess for Rendezvous {
    fn submit(&self, tx: Transaction) -> Result<TxReceipt, StoreError> {
        self.inner.submit(tx)
    }
    fn read_extent(&self, o: ObjectId, off: u64, len: u64, at: SnapshotId) -> Result<Vec<u8>, StoreError> {
        self.arrive(off >= self.data_bytes);
        self.inner.read_extent(o, off, len, at)
    }
    fn kv_get_range(&self, o: ObjectId, a: u64, b: u64, at: SnapshotId) -> Result<Vec<(u64, Vec<u8>)>, StoreError> {
        self.arrive(true);
        self.inner.kv_get_range(o, a, b, at)
    }
    fn allocated(&self, o: ObjectId, off: u64, len: u64, at: SnapshotId) -> Result<Vec<Extent>, StoreError> {
        self.inner.allocated(o, off, len, at)
    }
    fn create_snapshot(&self) -> Result<SnapshotId, StoreError> {
        self.inner.create_snapshot()
    }
    fn latest_snapshot(&self) -> SnapshotId {
        self.inner.latest_snapshot()
    }
    fn stats(&self) -> AccessStats {
        self.inner.stats()
    }
    fn reset_stats(&self) {
        self.inner.reset_stats()
    }
    fn flush(&self) -> Result<(), StoreError> {
        self.inner.flush()
    }
}

#[test]
fn iv_and_data_reads_are_issued_independently() {
    for layout in [LayoutKind::ObjectEnd, LayoutKind::KeyValue] {
        for hold_data in [true, false] {
            let spec = ImageSpec::new(1, 4 << 20, layout, IvPolicy::RandomStored).unwrap();
            let shim = Arc::new(Rendezvous {
                inner: ObjectStore::in_memory(BlockDevice::store_config(&spec, LatencyModel::default())),
                data_bytes: spec.geometry.object_data_bytes(),
                hold_data,
                seen: Mutex::new((false, false)),
                cv: Condvar::new(),
                timed_out: AtomicBool::new(false),
            });
            let dev = BlockDevice::attach(spec, key(1), shim.clone(), opts(1));
            dev.write(0, &[8; 16384]).unwrap();
            shim.reset();
            assert_eq!(dev.read(0, 16384, SnapshotId::HEAD).unwrap(), vec![8; 16384]);
            assert!(
                !shim.timed_out.load(Ordering::SeqCst),
                "{layout}: reads were serialized (hold_data = {hold_data})"
            );
        }
    }
}

#[test]
fn foreign_store_objects_are_rejected() {
    let spec = ImageSpec::new(1, 4 << 20, LayoutKind::ObjectEnd, IvPolicy::RandomStored).unwrap();
    let store = ObjectStore::in_memory(BlockDevice::store_config(&spec, LatencyModel::default()));
    let tx = Transaction {
        target: ObjectId { image_id: 2, index: 0 },
        ops: vec![StoreOp::WriteExtent {
            offset: 0,
            bytes: vec![1],
        }],
    };
    assert!(matches!(store.submit(tx), Err(StoreError::ForeignObject { .. })));
}
