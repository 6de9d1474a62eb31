// SPDX-License-Identifier: Apache-2.0

//! Encrypted virtual disk on top of the object store.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::layout::{
    kv_key, locate_block, physical_object_size, plan_io, Extent, ExtentPlan, Geometry, LayoutError, LayoutKind,
};
use crate::sector_crypto::{
    decrypt_in_place, encrypt_in_place, make_deterministic_iv, make_random_iv, verify_iv_binding, CryptoError,
    EncryptionKey, IvPolicy, IvSource, OsEntropy, SectorIv, IV_BYTES, SECTOR_BYTES,
};
use crate::store::{
    LatencyModel, Manifest, ObjectAccess, ObjectId, ObjectStore, SnapshotId, StoreConfig, StoreError, StoreOp,
    Transaction,
};

const SECTOR: u64 = SECTOR_BYTES as u64;
pub const MAX_VIRTUAL_SIZE: u64 = 1 << 44;
pub const DEFAULT_QUEUE_DEPTH: usize = 32;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("request [{offset}, +{len}) is outside the {size}-byte image")]
    OutOfRange { offset: u64, len: u64, size: u64 },
    #[error("request [{offset}, +{len}) is not a whole number of 4096-byte sectors")]
    Misaligned { offset: u64, len: u64 },
    #[error("sector {sector} has data but no IV")]
    IvMissing { sector: u64 },
    #[error("IV stored for sector {sector} is bound to sector {found}")]
    BindingMismatch { sector: u64, found: u64 },
    #[error("object store: {0}")]
    BackendFault(#[from] StoreError),
    #[error(transparent)]
    Entropy(CryptoError),
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image {0} already exists")]
    Duplicate(u64),
    #[error("no image manifest for {0}")]
    MissingManifest(String),
    #[error("corrupt image manifest: {0}")]
    CorruptManifest(String),
    #[error("invalid image spec: {0}")]
    InvalidSpec(String),
    #[error("key does not match the one the image was created with")]
    KeyMismatch,
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for ImageError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Manifest(m) => ImageError::CorruptManifest(m),
            other => ImageError::Store(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub image_id: u64,
    pub virtual_size: u64,
    pub geometry: Geometry,
    pub layout: LayoutKind,
    pub policy: IvPolicy,
    pub key_id: u32,
}

impl ImageSpec {
    /// Default geometry, key id 0.
    pub fn new(image_id: u64, virtual_size: u64, layout: LayoutKind, policy: IvPolicy) -> Result<Self, ImageError> {
        let spec = Self {
            image_id,
            virtual_size,
            geometry: Geometry::default(),
            layout,
            policy,
            key_id: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let bad = |m: String| Err(ImageError::InvalidSpec(m));
        if self.virtual_size == 0 || !self.virtual_size.is_multiple_of(SECTOR) {
            return bad(format!("size {} is not a positive multiple of 4096", self.virtual_size));
        }
        if self.virtual_size > MAX_VIRTUAL_SIZE {
            return bad(format!("size {} exceeds 2^44 bytes", self.virtual_size));
        }
        if (self.layout == LayoutKind::Baseline) != (self.policy == IvPolicy::DeterministicLba) {
            return bad(format!(
                "layout {} cannot be combined with policy {}",
                self.layout, self.policy
            ));
        }
        Ok(())
    }

    pub fn sectors(&self) -> u64 {
        self.virtual_size / SECTOR
    }

    pub fn physical_object_bytes(&self) -> u64 {
        physical_object_size(&self.geometry, self.layout.effective(self.policy))
    }

    pub fn object_count(&self) -> u64 {
        self.virtual_size.div_ceil(self.geometry.object_data_bytes())
    }

    fn store_config(&self, latency: LatencyModel) -> StoreConfig {
        StoreConfig {
            image_id: self.image_id,
            physical_object_bytes: self.physical_object_bytes(),
            sector_bytes: SECTOR,
            latency,
        }
    }

    fn to_manifest(self, key_check: &str) -> Manifest {
        let mut m = Manifest::new();
        m.set("image.id", self.image_id);
        m.set("image.size", self.virtual_size);
        m.set("image.object_bytes", self.geometry.object_data_bytes());
        m.set("image.layout", self.layout);
        m.set("image.policy", self.policy);
        m.set("image.key_id", self.key_id);
        m.set("image.key_check", key_check);
        m
    }

    fn from_manifest(m: &Manifest) -> Result<(Self, String), ImageError> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| ImageError::CorruptManifest(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<u64, ImageError> {
            get(k)?
                .parse()
                .map_err(|_| ImageError::CorruptManifest(format!("{k} is not a number")))
        };
        let corrupt = |e: String| ImageError::CorruptManifest(e);
        let spec = Self {
            image_id: num("image.id")?,
            virtual_size: num("image.size")?,
            geometry: Geometry::with_object_bytes(num("image.object_bytes")?).map_err(|e| corrupt(e.to_string()))?,
            layout: get("image.layout")?.parse().map_err(corrupt)?,
            policy: get("image.policy")?.parse().map_err(corrupt)?,
            key_id: num("image.key_id")?
                .try_into()
                .map_err(|_| corrupt("image.key_id out of range".into()))?,
        };
        spec.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok((spec, get("image.key_check")?.to_string()))
    }
}

/// Short public fingerprint of a key, used to reject a wrong key at open.
fn key_check(key: &EncryptionKey) -> String {
    let mut block = [0u8; SECTOR_BYTES];
    encrypt_in_place(key, &SectorIv::new([0xff; 8], 0), &mut block);
    block[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct DeviceOptions {
    pub queue_depth: usize,
    pub iv_source: Arc<dyn IvSource>,
    pub latency: LatencyModel,
}

impl Default for DeviceOptions {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            iv_source: Arc::new(OsEntropy),
            latency: LatencyModel::default(),
        }
    }
}

type RegisteredImage = (ImageSpec, String, Arc<ObjectStore>);

/// In-process table of memory-backed images.
#[derive(Default)]
pub struct ImageRegistry {
    images: Mutex<HashMap<u64, RegisteredImage>>,
}

impl ImageRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.images.lock().keys().copied().collect();
        ids.sort();
        ids
    }
}

#[derive(Clone)]
pub enum Backend {
    Memory(Arc<ImageRegistry>),
    /// Directory that holds the image's object files.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoRequest {
    Read { offset: u64, len: u64, at: SnapshotId },
    Write { offset: u64, payload: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoResult {
    Read(Vec<u8>),
    Written(WriteOutcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteOutcome {
    pub blocks: u64,
    pub transactions: usize,
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct BlockDevice {
    spec: ImageSpec,
    layout: LayoutKind,
    key: EncryptionKey,
    store: Arc<dyn ObjectAccess>,
    backing: Option<Arc<ObjectStore>>,
    iv_source: Arc<dyn IvSource>,
    slots: Slots,
}

impl std::fmt::Debug for BlockDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockDevice")
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

impl BlockDevice {
    pub fn create(
        backend: &Backend,
        spec: ImageSpec,
        key: EncryptionKey,
        opts: DeviceOptions,
    ) -> Result<Self, ImageError> {
        spec.validate()?;
        let check = key_check(&key);
        let store = match backend {
            Backend::Memory(registry) => {
                let mut images = registry.images.lock();
                if images.contains_key(&spec.image_id) {
                    return Err(ImageError::Duplicate(spec.image_id));
                }
                let store = Arc::new(ObjectStore::in_memory(spec.store_config(opts.latency)));
                images.insert(spec.image_id, (spec, check, store.clone()));
                store
            }
            Backend::File(dir) => {
                let store = ObjectStore::create_dir(dir, spec.store_config(opts.latency), spec.to_manifest(&check))
                    .map_err(|e| match e {
                        StoreError::AlreadyExists(_) => ImageError::Duplicate(spec.image_id),
                        other => other.into(),
                    })?;
                Arc::new(store)
            }
        };
        Ok(Self::with_backing(spec, key, store, opts))
    }

    /// Opens an existing image. For the file backend `image_id` must match
    /// the manifest.
    pub fn open(backend: &Backend, image_id: u64, key: EncryptionKey, opts: DeviceOptions) -> Result<Self, ImageError> {
        let (spec, check, store) = match backend {
            Backend::Memory(registry) => registry
                .images
                .lock()
                .get(&image_id)
                .cloned()
                .ok_or_else(|| ImageError::MissingManifest(format!("image {image_id}")))?,
            Backend::File(dir) => {
                let (spec, check, store) = Self::load_dir(dir, opts.latency)?;
                if spec.image_id != image_id {
                    return Err(ImageError::MissingManifest(format!(
                        "image {image_id} (found {} in {})",
                        spec.image_id,
                        dir.display()
                    )));
                }
                (spec, check, store)
            }
        };
        if key_check(&key) != check {
            return Err(ImageError::KeyMismatch);
        }
        Ok(Self::with_backing(spec, key, store, opts))
    }

    /// Opens whatever image lives in `dir`.
    pub fn open_dir(dir: &std::path::Path, key: EncryptionKey, opts: DeviceOptions) -> Result<Self, ImageError> {
        let (spec, check, store) = Self::load_dir(dir, opts.latency)?;
        if key_check(&key) != check {
            return Err(ImageError::KeyMismatch);
        }
        Ok(Self::with_backing(spec, key, store, opts))
    }

    /// Reads just the spec stored in `dir`.
    pub fn inspect_dir(dir: &std::path::Path) -> Result<ImageSpec, ImageError> {
        Ok(Self::load_dir(dir, LatencyModel::default())?.0)
    }

    fn load_dir(dir: &std::path::Path, latency: LatencyModel) -> Result<RegisteredImage, ImageError> {
        if !dir.join("manifest").is_file() {
            return Err(ImageError::MissingManifest(dir.display().to_string()));
        }
        let store = ObjectStore::open_dir(dir, latency)?;
        let (spec, check) = ImageSpec::from_manifest(&store.properties())?;
        if store.config().physical_object_bytes != spec.physical_object_bytes() {
            return Err(ImageError::CorruptManifest("object size disagrees with layout".into()));
        }
        Ok((spec, check, Arc::new(store)))
    }

    fn with_backing(spec: ImageSpec, key: EncryptionKey, store: Arc<ObjectStore>, opts: DeviceOptions) -> Self {
        let mut dev = Self::attach(spec, key, store.clone(), opts);
        dev.backing = Some(store);
        dev
    }

    /// Builds a device over an arbitrary store implementation. The store
    /// must already be sized for `spec`.
    pub fn attach(spec: ImageSpec, key: EncryptionKey, store: Arc<dyn ObjectAccess>, opts: DeviceOptions) -> Self {
        Self {
            layout: spec.layout.effective(spec.policy),
            spec,
            key,
            store,
            backing: None,
            iv_source: opts.iv_source,
            slots: Slots::new(opts.queue_depth),
        }
    }

    /// Store configuration matching `spec`, for callers building their own
    /// store to [`attach`](Self::attach).
    pub fn store_config(spec: &ImageSpec, latency: LatencyModel) -> StoreConfig {
        spec.store_config(latency)
    }

    pub fn spec(&self) -> &ImageSpec {
        &self.spec
    }

    pub fn store(&self) -> &Arc<dyn ObjectAccess> {
        &self.store
    }

    /// The concrete store when the device owns one.
    pub fn backing_store(&self) -> Option<&Arc<ObjectStore>> {
        self.backing.as_ref()
    }

    pub fn object_id(&self, index: u64) -> ObjectId {
        ObjectId {
            image_id: self.spec.image_id,
            index,
        }
    }

    fn check_request(&self, offset: u64, len: u64) -> Result<(), IoError> {
        if len == 0 || !offset.is_multiple_of(SECTOR) || !len.is_multiple_of(SECTOR) {
            return Err(IoError::Misaligned { offset, len });
        }
        if offset.checked_add(len).is_none_or(|end| end > self.spec.virtual_size) {
            return Err(IoError::OutOfRange {
                offset,
                len,
                size: self.spec.virtual_size,
            });
        }
        Ok(())
    }

    fn plan(&self, offset: u64, len: u64) -> Vec<ExtentPlan> {
        plan_io(&self.spec.geometry, self.layout, self.spec.policy, offset, len)
            .unwrap_or_else(|e: LayoutError| unreachable!("request was validated: {e}"))
    }

    fn lba(&self, plan: &ExtentPlan, block: u64) -> u64 {
        plan.object_id * self.spec.geometry.blocks_per_object() + block
    }

    fn make_iv(&self, lba: u64) -> Result<SectorIv, IoError> {
        match self.spec.policy {
            IvPolicy::DeterministicLba => make_deterministic_iv(lba),
            IvPolicy::RandomStored => make_random_iv(lba, self.iv_source.as_ref()),
        }
        .map_err(IoError::Entropy)
    }

    pub fn submit(&self, req: IoRequest) -> Result<IoResult, IoError> {
        match req {
            IoRequest::Read { offset, len, at } => self.read(offset, len, at).map(IoResult::Read),
            IoRequest::Write { offset, payload } => self.write(offset, &payload).map(IoResult::Written),
        }
    }

    /// Encrypts and stores `data` at `offset`; one transaction per object.
    pub fn write(&self, offset: u64, data: &[u8]) -> Result<WriteOutcome, IoError> {
        let len = data.len() as u64;
        self.check_request(offset, len)?;
        let _slot = self.slots.acquire();
        let first_lba = offset / SECTOR;
        let mut outcome = WriteOutcome::default();
        for plan in self.plan(offset, len) {
            let io = plan.io_extents();
            let mut bufs: Vec<Vec<u8>> = io.iter().map(|e| vec![0u8; e.len as usize]).collect();
            let mut pairs = Vec::new();
            for block in plan.blocks() {
                let lba = self.lba(&plan, block);
                let iv = self.make_iv(lba)?;
                let start = ((lba - first_lba) * SECTOR) as usize;
                let mut sector = [0u8; SECTOR_BYTES];
                sector.copy_from_slice(&data[start..start + SECTOR_BYTES]);
                encrypt_in_place(&self.key, &iv, &mut sector);
                let (data_off, iv_off) = locate_block(&self.spec.geometry, self.layout, block).expect("planned block");
                place(&io, &mut bufs, data_off, &sector);
                if let Some(iv_off) = iv_off {
                    place(&io, &mut bufs, iv_off, &iv.to_bytes());
                }
                if self.layout == LayoutKind::KeyValue {
                    pairs.push((kv_key(&self.spec.geometry, block), iv.to_bytes().to_vec()));
                }
            }
            let mut ops: Vec<StoreOp> = io
                .iter()
                .zip(bufs)
                .map(|(e, bytes)| StoreOp::WriteExtent {
                    offset: e.offset,
                    bytes,
                })
                .collect();
            if !pairs.is_empty() {
                ops.push(StoreOp::KvSetRange { pairs });
            }
            self.store.submit(Transaction {
                target: self.object_id(plan.object_id),
                ops,
            })?;
            outcome.blocks += plan.block_count;
            outcome.transactions += 1;
        }
        Ok(outcome)
    }

    /// Reads and decrypts `[offset, offset + len)` at `at`.
    pub fn read(&self, offset: u64, len: u64, at: SnapshotId) -> Result<Vec<u8>, IoError> {
        self.check_request(offset, len)?;
        let _slot = self.slots.acquire();
        let mut out = vec![0u8; len as usize];
        let first_lba = offset / SECTOR;
        for plan in self.plan(offset, len) {
            let oid = self.object_id(plan.object_id);
            let fetched = self.fetch(oid, &plan, at)?;
            for block in plan.blocks() {
                let lba = self.lba(&plan, block);
                let (data_off, iv_off) = locate_block(&self.spec.geometry, self.layout, block).expect("planned block");
                if !fetched.is_allocated(data_off, SECTOR) {
                    continue;
                }
                let iv = match (self.spec.policy, iv_off) {
                    (IvPolicy::DeterministicLba, _) => make_deterministic_iv(lba).map_err(IoError::Entropy)?,
                    (IvPolicy::RandomStored, Some(iv_off)) => {
                        if !fetched.is_allocated(iv_off, IV_BYTES as u64) {
                            return Err(IoError::IvMissing { sector: lba });
                        }
                        let bytes = fetched.bytes(iv_off, IV_BYTES as u64);
                        SectorIv::from_bytes(bytes.try_into().expect("16-byte IV"))
                    }
                    (IvPolicy::RandomStored, None) => {
                        let key = kv_key(&self.spec.geometry, block);
                        match fetched.kv.get(&key).map(|v| <[u8; IV_BYTES]>::try_from(v.as_slice())) {
                            Some(Ok(bytes)) => SectorIv::from_bytes(&bytes),
                            _ => return Err(IoError::IvMissing { sector: lba }),
                        }
                    }
                };
                if !verify_iv_binding(&iv, lba) {
                    return Err(IoError::BindingMismatch {
                        sector: lba,
                        found: iv.bound_lba(),
                    });
                }
                let mut sector = [0u8; SECTOR_BYTES];
                sector.copy_from_slice(fetched.bytes(data_off, SECTOR));
                decrypt_in_place(&self.key, &iv, &mut sector);
                let start = ((lba - first_lba) * SECTOR) as usize;
                out[start..start + SECTOR_BYTES].copy_from_slice(&sector);
            }
        }
        Ok(out)
    }

    /// Issues the data reads and the IV reads of one object as two
    /// independent requests running side by side.
    fn fetch(&self, oid: ObjectId, plan: &ExtentPlan, at: SnapshotId) -> Result<Fetched, IoError> {
        let io = plan.io_extents();
        let (data_io, iv_io): (Vec<Extent>, Vec<Extent>) =
            io.iter().partition(|e| plan.data_extents.iter().any(|d| d.overlaps(e)));
        let store = self.store.as_ref();

        let mut allocated = Vec::new();
        for e in &io {
            allocated.extend(store.allocated(oid, e.offset, e.len, at)?);
        }

        let read_all = |extents: &[Extent]| -> Result<Buffers, StoreError> {
            extents
                .iter()
                .map(|e| Ok((*e, store.read_extent(oid, e.offset, e.len, at)?)))
                .collect()
        };
        let read_ivs = || -> Result<(Buffers, HashMap<u64, Vec<u8>>), StoreError> {
            let bufs = read_all(&iv_io)?;
            let mut kv = HashMap::new();
            for range in &plan.kv_ops {
                kv.extend(store.kv_get_range(oid, range.first_key, range.last_key, at)?);
            }
            Ok((bufs, kv))
        };

        let (data, ivs) = if iv_io.is_empty() && plan.kv_ops.is_empty() {
            (read_all(&data_io)?, (Vec::new(), HashMap::new()))
        } else {
            std::thread::scope(|s| {
                let iv_job = s.spawn(read_ivs);
                let data = read_all(&data_io);
                let ivs = iv_job.join().expect("IV read thread panicked");
                Ok::<_, StoreError>((data?, ivs?))
            })?
        };
        let mut bufs = data;
        bufs.extend(ivs.0);
        bufs.sort_by_key(|(e, _)| e.offset);
        Ok(Fetched {
            allocated,
            bufs,
            kv: ivs.1,
        })
    }

    pub fn snapshot(&self) -> Result<SnapshotId, IoError> {
        Ok(self.store.create_snapshot()?)
    }

    pub fn latest_snapshot(&self) -> SnapshotId {
        self.store.latest_snapshot()
    }

    pub fn flush(&self) -> Result<(), IoError> {
        Ok(self.store.flush()?)
    }
}

/// Copies `bytes` into whichever io buffer covers `offset`.
fn place(io: &[Extent], bufs: &mut [Vec<u8>], offset: u64, bytes: &[u8]) {
    let i = io.partition_point(|e| e.end() <= offset);
    let at = (offset - io[i].offset) as usize;
    bufs[i][at..at + bytes.len()].copy_from_slice(bytes);
}

type Buffers = Vec<(Extent, Vec<u8>)>;

struct Fetched {
    allocated: Vec<Extent>,
    bufs: Buffers,
    kv: HashMap<u64, Vec<u8>>,
}

impl Fetched {
    fn is_allocated(&self, offset: u64, len: u64) -> bool {
        let want = Extent::new(offset, len);
        self.allocated.iter().any(|a| a.overlaps(&want))
    }

    fn bytes(&self, offset: u64, len: u64) -> &[u8] {
        let i = self.bufs.partition_point(|(e, _)| e.end() <= offset);
        let (e, buf) = &self.bufs[i];
        let at = (offset - e.offset) as usize;
        &buf[at..at + len as usize]
    }
}
