// SPDX-License-Identifier: Apache-2.0

//! Encrypted virtual block device over a simulated object store.
//!
//! Sectors are encrypted with XTS-AES-256. The per-sector IV is either
//! derived from the sector number or drawn at random and stored next to the
//! data, in one of three metadata layouts.

pub mod bench;
pub mod device;
pub mod layout;
pub mod probes;
pub mod sector_crypto;
pub mod store;

pub use device::{Backend, BlockDevice, DeviceOptions, ImageError, ImageRegistry, ImageSpec, IoError};
pub use layout::{AccessStats, Direction, LayoutKind};
pub use sector_crypto::{EncryptionKey, IvPolicy};
pub use store::{LatencyModel, SnapshotId};
