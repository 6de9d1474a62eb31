// SPDX-License-Identifier: Apache-2.0

//! XTS mode (IEEE 1619) over any 128-bit block cipher.
//!
//! Data units of any length >= 16 bytes are supported; a trailing partial
//! block is handled with ciphertext stealing. Full sectors never need it.

use aes::cipher::consts::U16;
use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, BlockSizeUser, KeyInit};
use thiserror::Error;

pub const BLOCK_BYTES: usize = 16;

/// Number of blocks pushed through the cipher per batch.
const BATCH: usize = 32;

type Block = GenericArray<u8, U16>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum XtsError {
    #[error("data unit of {0} bytes is shorter than one cipher block")]
    UnitTooShort(usize),
    #[error("invalid key length {0} for the underlying block cipher")]
    InvalidKeyLength(usize),
}

/// An XTS instance holding the data-key and tweak-key schedules.
#[derive(Clone)]
pub struct Xts<C> {
    data: C,
    tweak: C,
}

impl<C> Xts<C>
where
    C: BlockEncrypt + BlockDecrypt + BlockSizeUser<BlockSize = U16>,
{
    pub fn new(data: C, tweak: C) -> Self {
        Self { data, tweak }
    }

    /// Builds the cipher pair from the two raw key halves.
    pub fn from_keys(data_key: &[u8], tweak_key: &[u8]) -> Result<Self, XtsError>
    where
        C: KeyInit,
    {
        let data = C::new_from_slice(data_key).map_err(|_| XtsError::InvalidKeyLength(data_key.len()))?;
        let tweak = C::new_from_slice(tweak_key).map_err(|_| XtsError::InvalidKeyLength(tweak_key.len()))?;
        Ok(Self::new(data, tweak))
    }

    pub fn encrypt_unit(&self, unit: &mut [u8], tweak: [u8; 16]) -> Result<(), XtsError> {
        if unit.len() < BLOCK_BYTES {
            return Err(XtsError::UnitTooShort(unit.len()));
        }
        let tail = unit.len() % BLOCK_BYTES;
        let mut t = self.initial_tweak(tweak);
        if tail == 0 {
            self.crypt_blocks(unit, &mut t, true);
            return Ok(());
        }

        let full = unit.len() - tail - BLOCK_BYTES;
        let (head, rest) = unit.split_at_mut(full);
        self.crypt_blocks(head, &mut t, true);

        // Ciphertext stealing: rest = last full block followed by `tail` bytes.
        let t_last = t;
        let t_steal = mul_alpha(t);
        let mut cc = [0u8; BLOCK_BYTES];
        cc.copy_from_slice(&rest[..BLOCK_BYTES]);
        self.crypt_one(&mut cc, t_last, true);

        let mut pp = cc;
        pp[..tail].copy_from_slice(&rest[BLOCK_BYTES..]);
        self.crypt_one(&mut pp, t_steal, true);

        rest[BLOCK_BYTES..].copy_from_slice(&cc[..tail]);
        rest[..BLOCK_BYTES].copy_from_slice(&pp);
        Ok(())
    }

    pub fn decrypt_unit(&self, unit: &mut [u8], tweak: [u8; 16]) -> Result<(), XtsError> {
        if unit.len() < BLOCK_BYTES {
            return Err(XtsError::UnitTooShort(unit.len()));
        }
        let tail = unit.len() % BLOCK_BYTES;
        let mut t = self.initial_tweak(tweak);
        if tail == 0 {
            self.crypt_blocks(unit, &mut t, false);
            return Ok(());
        }

        let full = unit.len() - tail - BLOCK_BYTES;
        let (head, rest) = unit.split_at_mut(full);
        self.crypt_blocks(head, &mut t, false);

        let t_last = t;
        let t_steal = mul_alpha(t);
        let mut pp = [0u8; BLOCK_BYTES];
        pp.copy_from_slice(&rest[..BLOCK_BYTES]);
        self.crypt_one(&mut pp, t_steal, false);

        let mut cc = pp;
        cc[..tail].copy_from_slice(&rest[BLOCK_BYTES..]);
        self.crypt_one(&mut cc, t_last, false);

        rest[BLOCK_BYTES..].copy_from_slice(&pp[..tail]);
        rest[..BLOCK_BYTES].copy_from_slice(&cc);
        Ok(())
    }

    fn initial_tweak(&self, tweak: [u8; 16]) -> u128 {
        let mut block = Block::from(tweak);
        self.tweak.encrypt_block(&mut block);
        u128::from_le_bytes(block.into())
    }

    /// Processes whole blocks, advancing `t` past the last one.
    fn crypt_blocks(&self, buf: &mut [u8], t: &mut u128, encrypt: bool) {
        debug_assert_eq!(buf.len() % BLOCK_BYTES, 0);
        let mut blocks = [Block::default(); BATCH];
        let mut tweaks = [0u128; BATCH];
        for chunk in buf.chunks_mut(BLOCK_BYTES * BATCH) {
            let n = chunk.len() / BLOCK_BYTES;
            for i in 0..n {
                tweaks[i] = *t;
                *t = mul_alpha(*t);
                let src = &chunk[i * BLOCK_BYTES..(i + 1) * BLOCK_BYTES];
                let x = u128::from_le_bytes(src.try_into().unwrap()) ^ tweaks[i];
                blocks[i] = Block::from(x.to_le_bytes());
            }
            if encrypt {
                self.data.encrypt_blocks(&mut blocks[..n]);
            } else {
                self.data.decrypt_blocks(&mut blocks[..n]);
            }
            for i in 0..n {
                let y = u128::from_le_bytes(blocks[i].into()) ^ tweaks[i];
                chunk[i * BLOCK_BYTES..(i + 1) * BLOCK_BYTES].copy_from_slice(&y.to_le_bytes());
            }
        }
    }

    fn crypt_one(&self, block: &mut [u8; BLOCK_BYTES], t: u128, encrypt: bool) {
        let mut b = Block::from((u128::from_le_bytes(*block) ^ t).to_le_bytes());
        if encrypt {
            self.data.encrypt_block(&mut b);
        } else {
            self.data.decrypt_block(&mut b);
        }
        *block = (u128::from_le_bytes(b.into()) ^ t).to_le_bytes();
    }
}

/// Multiplication by the primitive element of GF(2^128) in the
/// little-endian convention used by XTS.
#[inline]
pub fn mul_alpha(t: u128) -> u128 {
    let carry = (t >> 127) as u8;
    (t << 1) ^ (0x87 * carry as u128)
}
