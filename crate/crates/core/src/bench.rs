// SPDX-License-Identifier: Apache-2.0

//! fio-style workload runner and CSV reporter.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::device::{Backend, BlockDevice, DeviceOptions, ImageError, ImageRegistry, ImageSpec, IoError};
use crate::layout::{AccessStats, Direction, LayoutKind};
use crate::sector_crypto::{EncryptionKey, IvPolicy, SeededEntropy, SECTOR_BYTES};
use crate::store::{LatencyModel, SnapshotId};

pub const MIN_IO: u64 = 4 << 10;
pub const MAX_IO: u64 = 4 << 20;
pub const DEFAULT_IMAGE_BYTES: u64 = 256 << 20;
const PREFILL_CHUNK: u64 = 4 << 20;

pub const CSV_HEADER: &str = "layout,policy,direction,io_size,ops,sectors_read,sectors_written,rmw_sectors,kv_ops,amp_ratio,overhead_pct,elapsed_ns";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Fs(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    RandRead,
    RandWrite,
    SeqRead,
    SeqWrite,
}

impl Pattern {
    pub fn direction(self) -> Direction {
        match self {
            Pattern::RandRead | Pattern::SeqRead => Direction::Read,
            Pattern::RandWrite | Pattern::SeqWrite => Direction::Write,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::RandRead => "randread",
            Pattern::RandWrite => "randwrite",
            Pattern::SeqRead => "read",
            Pattern::SeqWrite => "write",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "randread" => Pattern::RandRead,
            "randwrite" => Pattern::RandWrite,
            "read" | "seqread" => Pattern::SeqRead,
            "write" | "seqwrite" => Pattern::SeqWrite,
            other => {
                return Err(format!(
                    "unknown pattern {other:?} (expected randread|randwrite|read|write)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    pub io_size: u64,
    pub queue_depth: usize,
    pub image_size: u64,
    pub ops: u64,
    pub seed: u64,
    pub repetitions: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::RandWrite,
            io_size: MIN_IO,
            queue_depth: 32,
            image_size: DEFAULT_IMAGE_BYTES,
            ops: 1000,
            seed: 0,
            repetitions: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if !self.io_size.is_power_of_two() || !(MIN_IO..=MAX_IO).contains(&self.io_size) {
            return bad(format!(
                "io size {} must be a power of two in 4KiB..=4MiB",
                self.io_size
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.io_size) {
            return bad(format!(
                "io size {} does not divide image size {}",
                self.io_size, self.image_size
            ));
        }
        if self.queue_depth == 0 || self.ops == 0 || self.repetitions == 0 {
            return bad("queue depth, ops and repetitions must be positive".into());
        }
        Ok(())
    }

    /// Byte offsets of every op, a pure function of the spec.
    pub fn offsets(&self, repetition: u32) -> Vec<u64> {
        let slots = self.image_size / self.io_size;
        match self.pattern {
            Pattern::RandRead | Pattern::RandWrite => {
                let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
                rng.set_stream(repetition as u64);
                (0..self.ops).map(|_| rng.gen_range(0..slots) * self.io_size).collect()
            }
            Pattern::SeqRead | Pattern::SeqWrite => (0..self.ops).map(|i| (i % slots) * self.io_size).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum BenchBackend {
    Memory,
    /// Images are created in fresh subdirectories of this directory.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ImageConfig {
    pub layout: LayoutKind,
    pub policy: IvPolicy,
    pub backend: BenchBackend,
    pub latency: LatencyModel,
}

impl ImageConfig {
    pub fn memory(layout: LayoutKind, policy: IvPolicy) -> Self {
        Self {
            layout,
            policy,
            backend: BenchBackend::Memory,
            latency: LatencyModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub layout: LayoutKind,
    pub policy: IvPolicy,
    pub direction: Direction,
    pub io_size: u64,
    pub ops: u64,
    pub bytes: u64,
    pub stats: AccessStats,
    pub elapsed_ns: u128,
    pub amp_ratio: f64,
    pub overhead_pct: f64,
    /// Wall-clock overhead against the baseline row; set by [`sweep`]
    /// when a latency model is active.
    pub time_overhead_pct: Option<f64>,
}

impl BenchResult {
    pub fn logical_sectors(&self) -> u64 {
        self.bytes / SECTOR_BYTES as u64
    }

    /// Physical sectors in the op's own direction.
    pub fn metric(&self) -> u64 {
        self.stats.sectors_for(self.direction)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.4},{}",
            self.layout,
            self.policy,
            self.direction.as_str(),
            self.io_size,
            self.ops,
            self.stats.physical_sectors_read,
            self.stats.physical_sectors_written,
            self.stats.rmw_sectors,
            self.stats.kv_ops,
            self.amp_ratio,
            self.overhead_pct,
            self.elapsed_ns
        )
    }
}

fn overhead(baseline: f64, variant: f64) -> f64 {
    if variant == 0.0 {
        0.0
    } else {
        (1.0 - baseline / variant) * 100.0
    }
}

struct BenchImage {
    dev: BlockDevice,
    dir: Option<PathBuf>,
}

impl Drop for BenchImage {
    fn drop(&mut self) {
        if let Some(dir) = &self.dir {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
}

fn make_image(spec: &WorkloadSpec, cfg: &ImageConfig, repetition: u32) -> Result<BenchImage, BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x5eed_0000);
    let key = EncryptionKey::generate(&mut rng, 0);
    let image_spec = ImageSpec::new(1, spec.image_size, cfg.layout, cfg.policy)?;
    let opts = DeviceOptions {
        queue_depth: spec.queue_depth,
        iv_source: Arc::new(SeededEntropy::new(rng.next_u64())),
        latency: cfg.latency,
    };
    let (backend, dir) = match &cfg.backend {
        BenchBackend::Memory => (Backend::Memory(ImageRegistry::new()), None),
        BenchBackend::File(root) => {
            let dir = root.join(format!(
                "{}-{}-{}-{}-r{repetition}",
                cfg.layout, cfg.policy, spec.pattern, spec.io_size
            ));
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            (Backend::File(dir.clone()), Some(dir))
        }
    };
    let dev = BlockDevice::create(&backend, image_spec, key, opts)?;
    Ok(BenchImage { dev, dir })
}

fn prefill(dev: &BlockDevice, size: u64, seed: u64) -> Result<(), BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut chunk = vec![0u8; PREFILL_CHUNK.min(size) as usize];
    let mut offset = 0;
    while offset < size {
        let len = (size - offset).min(chunk.len() as u64) as usize;
        rng.fill_bytes(&mut chunk[..len]);
        dev.write(offset, &chunk[..len])?;
        offset += len as u64;
    }
    Ok(())
}

/// Runs `spec` against a fresh image per repetition and sums the results.
pub fn run_workload(spec: &WorkloadSpec, cfg: &ImageConfig) -> Result<BenchResult, BenchError> {
    spec.validate()?;
    let direction = spec.pattern.direction();
    let mut stats = AccessStats::default();
    let mut elapsed_ns = 0u128;
    for rep in 0..spec.repetitions {
        let image = make_image(spec, cfg, rep)?;
        let dev = &image.dev;
        if direction == Direction::Read {
            prefill(dev, spec.image_size, spec.seed)?;
            dev.flush()?;
        }
        dev.store().reset_stats();

        let offsets = spec.offsets(rep);
        let mut payload = vec![0u8; spec.io_size as usize];
        ChaCha20Rng::seed_from_u64(spec.seed).fill_bytes(&mut payload);
        let next = AtomicUsize::new(0);
        let start = Instant::now();
        std::thread::scope(|s| -> Result<(), BenchError> {
            let workers: Vec<_> = (0..spec.queue_depth.min(offsets.len()))
                .map(|_| {
                    s.spawn(|| -> Result<(), IoError> {
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some(&off) = offsets.get(i) else { return Ok(()) };
                            match direction {
                                Direction::Read => {
                                    dev.read(off, spec.io_size, SnapshotId::HEAD)?;
                                }
                                Direction::Write => {
                                    dev.write(off, &payload)?;
                                }
                            }
                        }
                    })
                })
                .collect();
            for w in workers {
                w.join().expect("bench worker panicked")?;
            }
            Ok(())
        })?;
        elapsed_ns += start.elapsed().as_nanos();
        stats += dev.store().stats();
    }

    let ops = spec.ops * spec.repetitions as u64;
    let bytes = ops * spec.io_size;
    let logical = (bytes / SECTOR_BYTES as u64) as f64;
    let amp_ratio = stats.sectors_for(direction) as f64 / logical;
    Ok(BenchResult {
        layout: cfg.layout,
        policy: cfg.policy,
        direction,
        io_size: spec.io_size,
        ops,
        bytes,
        stats,
        elapsed_ns,
        amp_ratio,
        overhead_pct: overhead(1.0, amp_ratio),
        time_overhead_pct: None,
    })
}

/// Every (io_size, layout/policy) combination of `template`. Overheads are
/// normalized against the baseline row of the same io size when present.
pub fn sweep(
    template: &WorkloadSpec,
    io_sizes: &[u64],
    variants: &[(LayoutKind, IvPolicy)],
    cfg: &ImageConfig,
) -> Result<Vec<BenchResult>, BenchError> {
    let mut rows = Vec::new();
    for &io_size in io_sizes {
        let spec = WorkloadSpec {
            io_size,
            ..template.clone()
        };
        let first = rows.len();
        for &(layout, policy) in variants {
            let cfg = ImageConfig {
                layout,
                policy,
                ..cfg.clone()
            };
            rows.push(run_workload(&spec, &cfg)?);
        }
        let group = &mut rows[first..];
        let base = group
            .iter()
            .find(|r| r.layout == LayoutKind::Baseline)
            .map(|r| (r.metric(), r.elapsed_ns));
        if let Some((base_metric, base_ns)) = base {
            for r in group.iter_mut() {
                r.overhead_pct = overhead(base_metric as f64, r.metric() as f64);
                if cfg.latency.is_enabled() {
                    r.time_overhead_pct = Some(overhead(base_ns as f64, r.elapsed_ns as f64));
                }
            }
        }
    }
    Ok(rows)
}

/// The four layout/policy pairs a valid image can have.
pub fn standard_variants() -> Vec<(LayoutKind, IvPolicy)> {
    LayoutKind::ALL
        .iter()
        .map(|&l| {
            let p = if l == LayoutKind::Baseline {
                IvPolicy::DeterministicLba
            } else {
                IvPolicy::RandomStored
            };
            (l, p)
        })
        .collect()
}

/// 4 KiB, 8 KiB, ... 4 MiB.
pub fn standard_io_sizes() -> Vec<u64> {
    (12..=22).map(|s| 1u64 << s).collect()
}

pub fn write_csv<W: Write>(mut out: W, rows: &[BenchResult]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()
}
