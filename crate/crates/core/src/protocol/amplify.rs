//! Toeplitz-matrix universal hashing.

use rand::RngCore;
use serde::Serialize;

use super::{ProtocolError, Result};
use crate::seeding::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PaSeed {
    /// No compression; only valid at ratio 1.
    Identity,
    /// Public seed selecting the hash from the family.
    Seeded(u64),
}

fn pack(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64) + 1];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    words
}

/// 64 bits of `words` starting at bit `start`, LSB first.
fn window(words: &[u64], start: usize) -> u64 {
    let (w, s) = (start / 64, start % 64);
    if s == 0 {
        words[w]
    } else {
        (words[w] >> s) | (words[w + 1] << (64 - s))
    }
}

/// Compresses `key` to `⌊ratio·len⌋` bits with a seeded binary Toeplitz matrix.
pub fn privacy_amplify(key: &[bool], ratio: f64, seed: PaSeed) -> Result<Vec<bool>> {
    if key.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ProtocolError::Config(format!("compression ratio {ratio} outside (0, 1]")));
    }
    let n = key.len();
    let m = (ratio * n as f64).floor() as usize;
    if m == 0 {
        return Err(ProtocolError::EmptyKey);
    }
    let seed = match seed {
        PaSeed::Identity if m == n => return Ok(key.to_vec()),
        PaSeed::Identity => {
            return Err(ProtocolError::Config(
                "identity amplification requires ratio 1".into(),
            ))
        }
        PaSeed::Seeded(s) => s,
    };
    // Row i of the m×n matrix is bits [m−1−i, m−1−i+n) of one random
    // sequence of length m+n−1, so every diagonal is constant.
    let diag_words = (m + n - 1).div_ceil(64) + 2;
    let mut rng = derived_rng(seed, 0);
    let diag: Vec<u64> = (0..diag_words).map(|_| rng.next_u64()).collect();
    let packed = pack(key);
    let key_words = n.div_ceil(64);
    Ok((0..m)
        .map(|i| {
            let offset = m - 1 - i;
            let mut acc = 0u64;
            for w in 0..key_words {
                acc ^= window(&diag, offset + 64 * w) & packed[w];
            }
            acc.count_ones() % 2 == 1
        })
        .collect())
}
