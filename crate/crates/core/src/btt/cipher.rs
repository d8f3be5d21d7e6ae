//! Keyed pseudorandom permutation over 64-bit block numbers.
//!
//! A balanced Feistel network on two 32-bit halves with a tweak, which is
//! enough for the property the tables need: every re-encryption yields an
//! unrelated fixed-width ciphertext. This is not production cryptography.

use serde::{Deserialize, Serialize};

const ROUNDS: u32 = 8;

/// Per-entry tweak: which table, which slot, which re-encryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tweak {
    pub nonce: u64,
    pub vblock: u64,
    pub epoch: u32,
}

pub trait BlockCipher: Send + Sync {
    fn encrypt(&self, plain: u64, tweak: Tweak) -> u64;
    fn decrypt(&self, cipher: u64, tweak: Tweak) -> u64;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feistel {
    key: [u64; 2],
}

impl Feistel {
    pub fn new(key: [u64; 2]) -> Self {
        Self { key }
    }

    fn round(&self, r: u32, half: u32, t: Tweak) -> u32 {
        let mut x = self.key[(r & 1) as usize]
            ^ u64::from(half)
            ^ t.nonce.rotate_left(17)
            ^ t.vblock.rotate_left(31)
            ^ (u64::from(t.epoch) << 32 | u64::from(r));
        x = splitmix(x ^ self.key[((r + 1) & 1) as usize]);
        splitmix(x) as u32
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl BlockCipher for Feistel {
    fn encrypt(&self, plain: u64, tweak: Tweak) -> u64 {
        let (mut l, mut r) = ((plain >> 32) as u32, plain as u32);
        for i in 0..ROUNDS {
            let next = l ^ self.round(i, r, tweak);
            l = r;
            r = next;
        }
        u64::from(l) << 32 | u64::from(r)
    }

    fn decrypt(&self, cipher: u64, tweak: Tweak) -> u64 {
        let (mut l, mut r) = ((cipher >> 32) as u32, cipher as u32);
        for i in (0..ROUNDS).rev() {
            let prev = r ^ self.round(i, l, tweak);
            r = l;
            l = prev;
        }
        u64::from(l) << 32 | u64::from(r)
    }
}
