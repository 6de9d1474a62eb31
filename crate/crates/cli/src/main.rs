// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};

use vblk_core::bench::{self, BenchBackend, ImageConfig, Pattern, WorkloadSpec};
use vblk_core::layout::Geometry;
use vblk_core::probes;
use vblk_core::sector_crypto::{OsEntropy, KEY_BYTES};
use vblk_core::{
    Backend, BlockDevice, DeviceOptions, EncryptionKey, ImageSpec, IvPolicy, LatencyModel, LayoutKind, SnapshotId,
};

#[derive(Parser)]
#[command(
    name = "vblk",
    version,
    about = "Encrypted virtual block device on a simulated object store"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an image directory.
    Create(CreateArgs),
    /// Write data into an image.
    Write(WriteArgs),
    /// Read and decrypt a range of an image.
    Read(ReadArgs),
    /// Take a snapshot of an image.
    Snap(ImageArgs),
    /// Run the attack probes and print one report per probe.
    Probe(ProbeArgs),
    /// Run a random IO workload and report sector amplification.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mem,
    File,
}

#[derive(Args)]
struct ImageArgs {
    /// Image directory.
    #[arg(long)]
    image: PathBuf,
    /// Hex key (128 hex digits); falls back to $VBLK_KEY.
    #[arg(long, env = "VBLK_KEY", hide_env_values = true)]
    key: Option<String>,
    #[arg(long, value_enum, default_value = "file")]
    backend: BackendKind,
    #[arg(long, value_parser = parse_latency)]
    latency_model: Option<LatencyModel>,
}

#[derive(Args)]
struct CreateArgs {
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, value_parser = parse_size)]
    size: u64,
    #[arg(long, value_parser = parse_layout, default_value = "object-end")]
    layout: LayoutKind,
    /// Defaults to lba for the baseline layout and random otherwise.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<IvPolicy>,
    #[arg(long, default_value_t = 1)]
    id: u64,
    #[arg(long, value_parser = parse_size, default_value = "4M")]
    object_size: u64,
}

#[derive(Args)]
struct WriteArgs {
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, value_parser = parse_size, default_value = "0")]
    offset: u64,
    /// File to write; zero-padded to a whole sector.
    #[arg(long, conflicts_with = "length")]
    input: Option<PathBuf>,
    /// Write this many bytes of seeded random data instead of a file.
    #[arg(long, value_parser = parse_size)]
    length: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReadArgs {
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, value_parser = parse_size, default_value = "0")]
    offset: u64,
    #[arg(long, value_parser = parse_size, default_value = "4K")]
    length: u64,
    /// Snapshot generation; 0 or absent reads the head.
    #[arg(long, default_value_t = 0)]
    at: u64,
    /// Raw output file; without it a hex dump goes to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Policy to probe; both when absent.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<IvPolicy>,
    #[arg(long, default_value_t = 100)]
    trials: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Layout to run; all four when absent.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<LayoutKind>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<IvPolicy>,
    /// IO size or comma-separated list; `sweep` for 4K..4M.
    #[arg(long, default_value = "4K")]
    io_size: String,
    /// randread, randwrite, read or write; comma-separated for several.
    #[arg(long, default_value = "randwrite")]
    direction: String,
    #[arg(long, default_value_t = 32)]
    qd: usize,
    #[arg(long, default_value_t = 1000)]
    ops: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repetitions: u32,
    /// Image size per run.
    #[arg(long, value_parser = parse_size, default_value = "256M")]
    size: u64,
    #[arg(long, value_enum, default_value = "mem")]
    backend: BackendKind,
    /// Directory for file-backed bench images.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// e.g. fixed=20000,sector=1500,kv=8000,kv_byte=4 (nanoseconds).
    #[arg(long, value_parser = parse_latency)]
    latency_model: Option<LatencyModel>,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let shift = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        _ => return Err(format!("bad size unit in {s:?}")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("size {s:?} overflows"))
}

fn parse_layout(s: &str) -> Result<LayoutKind, String> {
    s.parse()
}

fn parse_policy(s: &str) -> Result<IvPolicy, String> {
    s.parse()
}

fn parse_latency(s: &str) -> Result<LatencyModel, String> {
    s.parse()
}

fn default_policy(layout: LayoutKind) -> IvPolicy {
    if layout == LayoutKind::Baseline {
        IvPolicy::DeterministicLba
    } else {
        IvPolicy::RandomStored
    }
}

fn parse_key(hex_key: &str) -> Result<EncryptionKey> {
    let bytes = hex::decode(hex_key.trim()).context("key is not valid hex")?;
    Ok(EncryptionKey::new(&bytes, 0)?)
}

fn device_options(args: &ImageArgs) -> DeviceOptions {
    DeviceOptions {
        iv_source: Arc::new(OsEntropy),
        latency: args.latency_model.unwrap_or_default(),
        ..DeviceOptions::default()
    }
}

fn require_file_backend(args: &ImageArgs) -> Result<()> {
    if args.backend == BackendKind::Mem {
        bail!("the mem backend does not outlive one command; image commands need --backend file");
    }
    Ok(())
}

fn open_image(args: &ImageArgs) -> Result<BlockDevice> {
    require_file_backend(args)?;
    let key = args.key.as_deref().context("no key given (use --key or VBLK_KEY)")?;
    let dev = BlockDevice::open_dir(&args.image, parse_key(key)?, device_options(args))
        .with_context(|| format!("opening {}", args.image.display()))?;
    Ok(dev)
}

fn create(args: CreateArgs) -> Result<()> {
    require_file_backend(&args.image)?;
    let policy = args.policy.unwrap_or_else(|| default_policy(args.layout));
    let spec = ImageSpec {
        image_id: args.id,
        virtual_size: args.size,
        geometry: Geometry::with_object_bytes(args.object_size)?,
        layout: args.layout,
        policy,
        key_id: 0,
    };
    spec.validate()?;
    let (key, generated) = match &args.image.key {
        Some(k) => (parse_key(k)?, None),
        None => {
            let mut material = [0u8; KEY_BYTES];
            OsRng.fill_bytes(&mut material);
            (EncryptionKey::new(&material, 0)?, Some(hex::encode(material)))
        }
    };
    let dev = BlockDevice::create(
        &Backend::File(args.image.image.clone()),
        spec,
        key,
        device_options(&args.image),
    )?;
    dev.flush()?;
    println!(
        "created {} size={} layout={} policy={} id={}",
        args.image.image.display(),
        spec.virtual_size,
        spec.layout,
        spec.policy,
        spec.image_id
    );
    if let Some(k) = generated {
        println!("key = {k}");
    }
    Ok(())
}

fn pad_to_sector(mut data: Vec<u8>) -> Vec<u8> {
    let rem = data.len() % 4096;
    if rem != 0 || data.is_empty() {
        data.resize(data.len() + 4096 - rem, 0);
    }
    data
}

fn write(args: WriteArgs) -> Result<()> {
    let dev = open_image(&args.image)?;
    let data = match (&args.input, args.length) {
        (Some(path), _) => fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        (None, Some(len)) => {
            let mut buf = vec![0u8; len as usize];
            rand_chacha::ChaCha20Rng::seed_from_u64(args.seed).fill_bytes(&mut buf);
            buf
        }
        (None, None) => bail!("give --input or --length"),
    };
    let data = pad_to_sector(data);
    let out = dev.write(args.offset, &data)?;
    dev.flush()?;
    println!(
        "wrote {} bytes at {} ({} blocks, {} transactions)",
        data.len(),
        args.offset,
        out.blocks,
        out.transactions
    );
    Ok(())
}

fn read(args: ReadArgs) -> Result<()> {
    let dev = open_image(&args.image)?;
    let data = dev.read(args.offset, args.length, SnapshotId(args.at))?;
    match &args.output {
        Some(path) => fs::write(path, &data).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut out = io::stdout().lock();
            for (i, line) in data.chunks(32).enumerate() {
                writeln!(out, "{:012x}  {}", args.offset + 32 * i as u64, hex::encode(line))?;
            }
        }
    }
    Ok(())
}

fn snap(args: ImageArgs) -> Result<()> {
    let dev = open_image(&args)?;
    let id = dev.snapshot()?;
    dev.flush()?;
    println!("snapshot = {}", id.generation());
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let policies = match args.policy {
        Some(p) => vec![p],
        None => vec![IvPolicy::DeterministicLba, IvPolicy::RandomStored],
    };
    let mut out = io::stdout().lock();
    for policy in policies {
        for report in probes::run_all(policy, args.seed, args.trials)? {
            writeln!(out, "{report}")?;
        }
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let io_sizes = if args.io_size == "sweep" {
        bench::standard_io_sizes()
    } else {
        args.io_size
            .split(',')
            .map(parse_size)
            .collect::<Result<Vec<_>, _>>()
            .map_err(anyhow::Error::msg)?
    };
    let patterns = args
        .direction
        .split(',')
        .map(str::parse::<Pattern>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(anyhow::Error::msg)?;
    let variants = match (args.layout, args.policy) {
        (Some(l), p) => vec![(l, p.unwrap_or_else(|| default_policy(l)))],
        (None, None) => bench::standard_variants(),
        (None, Some(p)) => bench::standard_variants()
            .into_iter()
            .filter(|(_, vp)| *vp == p)
            .collect(),
    };
    let backend = match args.backend {
        BackendKind::Mem => BenchBackend::Memory,
        BackendKind::File => {
            let root = args.image.clone().context("--backend file needs --image <dir>")?;
            fs::create_dir_all(&root)?;
            BenchBackend::File(root)
        }
    };
    let cfg = ImageConfig {
        layout: variants[0].0,
        policy: variants[0].1,
        backend,
        latency: args.latency_model.unwrap_or_default(),
    };
    let mut rows = Vec::new();
    for pattern in patterns {
        let template = WorkloadSpec {
            pattern,
            io_size: io_sizes[0],
            queue_depth: args.qd,
            image_size: args.size,
            ops: args.ops,
            seed: args.seed,
            repetitions: args.repetitions,
        };
        rows.extend(bench::sweep(&template, &io_sizes, &variants, &cfg)?);
    }

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{:<11} {:<7} {:<6} {:>8} {:>7} {:>10} {:>10} {:>8} {:>8} {:>9} {:>9} {:>12}",
        "layout",
        "policy",
        "dir",
        "io_size",
        "ops",
        "sect_rd",
        "sect_wr",
        "rmw",
        "kv_ops",
        "amp",
        "ovh_%",
        "elapsed_ms"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<11} {:<7} {:<6} {:>8} {:>7} {:>10} {:>10} {:>8} {:>8} {:>9.4} {:>9.3} {:>12.2}",
            r.layout.as_str(),
            r.policy.as_str(),
            r.direction.as_str(),
            r.io_size,
            r.ops,
            r.stats.physical_sectors_read,
            r.stats.physical_sectors_written,
            r.stats.rmw_sectors,
            r.stats.kv_ops,
            r.amp_ratio,
            r.overhead_pct,
            r.elapsed_ns as f64 / 1e6
        )?;
        if let Some(t) = r.time_overhead_pct {
            writeln!(out, "{:>40} time overhead {t:.2}%", "")?;
        }
    }
    if let Some(path) = &args.csv {
        write_csv_file(path, &rows)?;
        writeln!(out, "csv written to {}", path.display())?;
    }
    Ok(())
}

fn write_csv_file(path: &Path, rows: &[bench::BenchResult]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    bench::write_csv(io::BufWriter::new(file), rows)?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Create(a) => create(a),
        Command::Write(a) => write(a),
        Command::Read(a) => read(a),
        Command::Snap(a) => snap(a),
        Command::Probe(a) => probe(a),
        Command::Bench(a) => bench(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("4K"), Ok(4096));
        assert_eq!(parse_size("4KiB"), Ok(4096));
        assert_eq!(parse_size("256MiB"), Ok(256 << 20));
        assert_eq!(parse_size("1g"), Ok(1 << 30));
        assert!(parse_size("4Q").is_err());
        assert!(parse_size("M").is_err());
    }

    #[test]
    fn padding() {
        assert_eq!(pad_to_sector(vec![1; 10]).len(), 4096);
        assert_eq!(pad_to_sector(vec![1; 4096]).len(), 4096);
        assert_eq!(pad_to_sector(Vec::new()).len(), 4096);
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
