// SPDX-License-Identifier: Apache-2.0

//! Per-sector encryption with XTS-AES-256.
//!
//! Every 4 KiB sector is one XTS data unit. The 16-byte tweak is the
//! serialized [`SectorIv`]: an 8-byte nonce followed by the little-endian
//! sector index. Under [`IvPolicy::DeterministicLba`] the nonce is zero and
//! the IV is recomputed on every access; under [`IvPolicy::RandomStored`] it
//! is fresh per write and persisted next to the data by the chosen layout.

pub mod xts;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;
use std::sync::Mutex;

use aes::Aes256;
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use xts::Xts;

pub const SECTOR_BYTES: usize = 4096;
pub const SUBBLOCK_BYTES: usize = 16;
pub const SUBBLOCKS_PER_SECTOR: usize = SECTOR_BYTES / SUBBLOCK_BYTES;
pub const IV_BYTES: usize = 16;
pub const KEY_BYTES: usize = 64;

/// Sector indices must fit in 56 bits.
pub const LBA_LIMIT: u64 = 1 << 56;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("XTS-AES-256 needs {KEY_BYTES} bytes of key material, got {0}")]
    InvalidKeyLength(usize),
    #[error("XTS key halves must differ")]
    EqualKeyHalves,
    #[error("sector index {0} is out of range")]
    LbaOutOfRange(u64),
    #[error("sector buffer must be {SECTOR_BYTES} bytes, got {0}")]
    BadSectorLength(usize),
    #[error("entropy source failure: {0}")]
    Entropy(String),
}

/// A per-disk XTS-AES-256 key: 32-byte data key followed by 32-byte tweak key.
#[derive(Clone)]
pub struct EncryptionKey {
    key_id: u32,
    cipher: Xts<Aes256>,
}

impl EncryptionKey {
    pub fn new(material: &[u8], key_id: u32) -> Result<Self, CryptoError> {
        if material.len() != KEY_BYTES {
            return Err(CryptoError::InvalidKeyLength(material.len()));
        }
        let (data, tweak) = material.split_at(KEY_BYTES / 2);
        if data == tweak {
            return Err(CryptoError::EqualKeyHalves);
        }
        let cipher = Xts::from_keys(data, tweak).map_err(|_| CryptoError::InvalidKeyLength(material.len()))?;
        Ok(Self { key_id, cipher })
    }

    /// Draws fresh key material from `rng`.
    pub fn generate<R: RngCore>(rng: &mut R, key_id: u32) -> Self {
        loop {
            let mut material = [0u8; KEY_BYTES];
            rng.fill_bytes(&mut material);
            if let Ok(key) = Self::new(&material, key_id) {
                return key;
            }
        }
    }

    pub fn key_id(&self) -> u32 {
        self.key_id
    }
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptionKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

/// The per-sector tweak and metadata unit: `nonce ∥ LE64(sector index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SectorIv {
    nonce: [u8; 8],
    lba_binding: [u8; 8],
}

impl SectorIv {
    pub fn new(nonce: [u8; 8], lba: u64) -> Self {
        Self {
            nonce,
            lba_binding: lba.to_le_bytes(),
        }
    }

    pub fn nonce(&self) -> [u8; 8] {
        self.nonce
    }

    /// The sector index this IV was bound to when it was created.
    pub fn bound_lba(&self) -> u64 {
        u64::from_le_bytes(self.lba_binding)
    }

    pub fn to_bytes(&self) -> [u8; IV_BYTES] {
        let mut out = [0u8; IV_BYTES];
        out[..8].copy_from_slice(&self.nonce);
        out[8..].copy_from_slice(&self.lba_binding);
        out
    }

    pub fn from_bytes(bytes: &[u8; IV_BYTES]) -> Self {
        let mut nonce = [0u8; 8];
        let mut lba_binding = [0u8; 8];
        nonce.copy_from_slice(&bytes[..8]);
        lba_binding.copy_from_slice(&bytes[8..]);
        Self { nonce, lba_binding }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IvPolicy {
    /// IV derived from the sector index; nothing is stored.
    DeterministicLba,
    /// Fresh random nonce per write, persisted as 16 bytes of metadata.
    RandomStored,
}

impl IvPolicy {
    pub fn metadata_bytes(self) -> usize {
        match self {
            IvPolicy::DeterministicLba => 0,
            IvPolicy::RandomStored => IV_BYTES,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IvPolicy::DeterministicLba => "lba",
            IvPolicy::RandomStored => "random",
        }
    }
}

impl fmt::Display for IvPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IvPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lba" => Ok(IvPolicy::DeterministicLba),
            "random" => Ok(IvPolicy::RandomStored),
            other => Err(format!("unknown IV policy {other:?} (expected lba|random)")),
        }
    }
}

/// Exactly one sector of plaintext or ciphertext.
#[derive(Clone, PartialEq, Eq)]
pub struct SectorBuf(Box<[u8; SECTOR_BYTES]>);

impl SectorBuf {
    pub fn zeroed() -> Self {
        Self(Box::new([0u8; SECTOR_BYTES]))
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SECTOR_BYTES] = bytes
            .try_into()
            .map_err(|_| CryptoError::BadSectorLength(bytes.len()))?;
        Ok(Self(Box::new(arr)))
    }

    pub fn as_array(&self) -> &[u8; SECTOR_BYTES] {
        &self.0
    }

    pub fn as_mut_array(&mut self) -> &mut [u8; SECTOR_BYTES] {
        &mut self.0
    }

    pub fn sub_block(&self, index: usize) -> &[u8] {
        &self.0[index * SUBBLOCK_BYTES..(index + 1) * SUBBLOCK_BYTES]
    }
}

impl Deref for SectorBuf {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0[..]
    }
}

impl DerefMut for SectorBuf {
    fn deref_mut(&mut self) -> &mut [u8] {
        &mut self.0[..]
    }
}

impl fmt::Debug for SectorBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SectorBuf({:02x?}..)", &self.0[..8])
    }
}

/// A source of IV nonces. Shared by concurrent writers.
pub trait IvSource: Send + Sync {
    fn fill_nonce(&self, out: &mut [u8; 8]) -> Result<(), CryptoError>;
}

/// Operating-system entropy.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsEntropy;

impl IvSource for OsEntropy {
    fn fill_nonce(&self, out: &mut [u8; 8]) -> Result<(), CryptoError> {
        OsRng
            .try_fill_bytes(out)
            .map_err(|e| CryptoError::Entropy(e.to_string()))
    }
}

/// ChaCha20 stream seeded from a `u64`, for reproducible tests and benches.
#[derive(Debug)]
pub struct SeededEntropy(Mutex<ChaCha20Rng>);

impl SeededEntropy {
    pub fn new(seed: u64) -> Self {
        Self(Mutex::new(ChaCha20Rng::seed_from_u64(seed)))
    }
}

impl IvSource for SeededEntropy {
    fn fill_nonce(&self, out: &mut [u8; 8]) -> Result<(), CryptoError> {
        let mut rng = self.0.lock().map_err(|_| CryptoError::Entropy("poisoned rng".into()))?;
        rng.fill_bytes(out);
        Ok(())
    }
}

pub fn make_deterministic_iv(lba: u64) -> Result<SectorIv, CryptoError> {
    if lba >= LBA_LIMIT {
        return Err(CryptoError::LbaOutOfRange(lba));
    }
    Ok(SectorIv::new([0; 8], lba))
}

pub fn make_random_iv(lba: u64, entropy: &dyn IvSource) -> Result<SectorIv, CryptoError> {
    if lba >= LBA_LIMIT {
        return Err(CryptoError::LbaOutOfRange(lba));
    }
    let mut nonce = [0u8; 8];
    entropy.fill_nonce(&mut nonce)?;
    Ok(SectorIv::new(nonce, lba))
}

pub fn encrypt_sector(key: &EncryptionKey, iv: &SectorIv, pt: &SectorBuf) -> SectorBuf {
    let mut out = pt.clone();
    encrypt_in_place(key, iv, out.as_mut_array());
    out
}

pub fn decrypt_sector(key: &EncryptionKey, iv: &SectorIv, ct: &SectorBuf) -> SectorBuf {
    let mut out = ct.clone();
    decrypt_in_place(key, iv, out.as_mut_array());
    out
}

pub fn encrypt_in_place(key: &EncryptionKey, iv: &SectorIv, sector: &mut [u8; SECTOR_BYTES]) {
    key.cipher
        .encrypt_unit(sector, iv.to_bytes())
        .expect("a full sector is never shorter than one block");
}

pub fn decrypt_in_place(key: &EncryptionKey, iv: &SectorIv, sector: &mut [u8; SECTOR_BYTES]) {
    key.cipher
        .decrypt_unit(sector, iv.to_bytes())
        .expect("a full sector is never shorter than one block");
}

/// Replay check: does the stored IV belong to `expected_lba`?
pub fn verify_iv_binding(iv: &SectorIv, expected_lba: u64) -> bool {
    iv.lba_binding == expected_lba.to_le_bytes()
}

/// Indices of the 16-byte sub-blocks that differ between two sectors.
pub fn diff_subblocks(a: &SectorBuf, b: &SectorBuf) -> BTreeSet<usize> {
    a.chunks_exact(SUBBLOCK_BYTES)
        .zip(b.chunks_exact(SUBBLOCK_BYTES))
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;
    use std::collections::HashSet;

    fn test_key() -> EncryptionKey {
        let material: Vec<u8> = (0..64u8).collect();
        EncryptionKey::new(&material, 1).unwrap()
    }

    fn random_sector(rng: &mut ChaCha20Rng) -> SectorBuf {
        let mut s = SectorBuf::zeroed();
        rng.fill_bytes(&mut s);
        s
    }

    #[test]
    fn deterministic_iv_examples() {
        assert_eq!(make_deterministic_iv(0).unwrap().to_bytes(), [0u8; 16]);
        let one = make_deterministic_iv(1).unwrap().to_bytes();
        assert_eq!(one[..8], [0u8; 8]);
        assert_eq!(one[8..], [1, 0, 0, 0, 0, 0, 0, 0]);
        let b = make_deterministic_iv(0x0102).unwrap().to_bytes();
        assert_eq!(b[8..], [2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(make_deterministic_iv(77), make_deterministic_iv(77));
    }

    #[test]
    fn lba_limit_enforced() {
        assert_eq!(
            make_deterministic_iv(LBA_LIMIT),
            Err(CryptoError::LbaOutOfRange(LBA_LIMIT))
        );
        assert!(make_deterministic_iv(LBA_LIMIT - 1).is_ok());
        assert!(make_random_iv(LBA_LIMIT, &OsEntropy).is_err());
    }

    #[test]
    fn random_iv_binds_lba_with_fresh_nonce() {
        let a = make_random_iv(7, &OsEntropy).unwrap();
        let b = make_random_iv(7, &OsEntropy).unwrap();
        assert_eq!(a.bound_lba(), 7);
        assert_eq!(b.bound_lba(), 7);
        assert_ne!(a.nonce(), b.nonce());
    }

    #[test]
    fn ten_thousand_nonces_are_distinct() {
        let source = OsEntropy;
        let nonces: HashSet<[u8; 8]> = (0..10_000)
            .map(|_| make_random_iv(3, &source).unwrap().nonce())
            .collect();
        assert_eq!(nonces.len(), 10_000);
    }

    #[test]
    fn seeded_source_yields_stream_prefix() {
        let source = SeededEntropy::new(42);
        let iv = make_random_iv(5, &source).unwrap();
        let mut stream = [0u8; 8];
        ChaCha20Rng::seed_from_u64(42).fill_bytes(&mut stream);
        assert_eq!(iv.nonce(), stream);
    }

    struct Broken;
    impl IvSource for Broken {
        fn fill_nonce(&self, _: &mut [u8; 8]) -> Result<(), CryptoError> {
            Err(CryptoError::Entropy("device unplugged".into()))
        }
    }

    #[test]
    fn entropy_failure_propagates() {
        assert!(matches!(make_random_iv(1, &Broken), Err(CryptoError::Entropy(_))));
    }

    #[test]
    fn key_validation() {
        assert_eq!(
            EncryptionKey::new(&[1; 32], 0).unwrap_err(),
            CryptoError::InvalidKeyLength(32)
        );
        assert_eq!(
            EncryptionKey::new(&[5; 64], 0).unwrap_err(),
            CryptoError::EqualKeyHalves
        );
        let key = EncryptionKey::generate(&mut ChaCha20Rng::seed_from_u64(1), 9);
        assert_eq!(key.key_id(), 9);
        assert!(!format!("{key:?}").contains("cipher"));
    }

    #[test]
    fn sector_buf_length_checked() {
        assert_eq!(
            SectorBuf::from_slice(&[0; 4095]).unwrap_err(),
            CryptoError::BadSectorLength(4095)
        );
    }

    #[test]
    fn binding_verification() {
        let iv = make_random_iv(9, &OsEntropy).unwrap();
        assert!(verify_iv_binding(&iv, 9));
        assert!(!verify_iv_binding(&iv, 10));
        assert!(verify_iv_binding(&make_deterministic_iv(0).unwrap(), 0));
    }

    #[test]
    fn iv_serialization_layout() {
        let iv = SectorIv::new([1, 2, 3, 4, 5, 6, 7, 8], 0x0a0b);
        let bytes = iv.to_bytes();
        assert_eq!(bytes, [1, 2, 3, 4, 5, 6, 7, 8, 0x0b, 0x0a, 0, 0, 0, 0, 0, 0]);
        assert_eq!(SectorIv::from_bytes(&bytes), iv);
    }

    #[test]
    fn distinct_ivs_change_every_subblock() {
        let key = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pt = random_sector(&mut rng);
        let a = encrypt_sector(&key, &make_random_iv(4, &OsEntropy).unwrap(), &pt);
        let b = encrypt_sector(&key, &make_random_iv(4, &OsEntropy).unwrap(), &pt);
        assert_eq!(diff_subblocks(&a, &b).len(), SUBBLOCKS_PER_SECTOR);
    }

    #[test]
    fn wrong_iv_garbles_plaintext() {
        let key = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let pt = random_sector(&mut rng);
        let ct = encrypt_sector(&key, &make_deterministic_iv(3).unwrap(), &pt);
        let out = decrypt_sector(&key, &make_deterministic_iv(4).unwrap(), &ct);
        assert_ne!(out, pt);
    }

    #[test]
    fn round_trip_thousand_sectors() {
        let key = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for lba in 0..1000 {
            let pt = random_sector(&mut rng);
            let iv = SectorIv::new(rng.next_u64().to_le_bytes(), lba);
            let ct = encrypt_sector(&key, &iv, &pt);
            assert_ne!(ct, pt);
            assert_eq!(decrypt_sector(&key, &iv, &ct), pt);
        }
    }

    #[test]
    fn diff_of_identical_is_empty() {
        let s = SectorBuf::zeroed();
        assert!(diff_subblocks(&s, &s).is_empty());
    }

    #[test]
    fn single_bit_flip_in_subblock_five() {
        let key = test_key();
        let iv = make_deterministic_iv(21).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let pt = random_sector(&mut rng);
        let mut flipped = pt.clone();
        flipped[5 * SUBBLOCK_BYTES + 3] ^= 0x10;
        let diff = diff_subblocks(&encrypt_sector(&key, &iv, &pt), &encrypt_sector(&key, &iv, &flipped));
        assert_eq!(diff, BTreeSet::from([5]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_length(seed in any::<u64>(), nonce in any::<[u8; 8]>(), lba in 0u64..LBA_LIMIT) {
            let key = test_key();
            let pt = random_sector(&mut ChaCha20Rng::seed_from_u64(seed));
            let iv = SectorIv::new(nonce, lba);
            let ct = encrypt_sector(&key, &iv, &pt);
            prop_assert_eq!(ct.len(), SECTOR_BYTES);
            prop_assert_eq!(decrypt_sector(&key, &iv, &ct), pt);
        }

        #[test]
        fn bit_flip_is_local(seed in any::<u64>(), bit in 0usize..SECTOR_BYTES * 8) {
            let key = test_key();
            let iv = make_deterministic_iv(seed % 1000).unwrap();
            let pt = random_sector(&mut ChaCha20Rng::seed_from_u64(seed));
            let mut flipped = pt.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            let diff = diff_subblocks(&encrypt_sector(&key, &iv, &pt), &encrypt_sector(&key, &iv, &flipped));
            prop_assert_eq!(diff, BTreeSet::from([bit / 8 / SUBBLOCK_BYTES]));
        }
    }
}
