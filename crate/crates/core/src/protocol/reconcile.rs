//! Interactive parity-block error correction.
//!
//! B corrects towards A. Each pass splits a (publicly permuted) key into
//! blocks, compares parities and bisects every mismatched block down to the
//! single wrong bit. A's parities travel over the public channel and are
//! counted as disclosed bits.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{ProtocolError, Result};
use crate::seeding::derived_rng;

/// Source of A's parities: the live key, or a recorded public log.
pub trait ParityOracle {
    fn parity(&mut self, positions: &[usize]) -> Option<bool>;
}

fn parity_of(key: &[bool], positions: &[usize]) -> bool {
    positions.iter().fold(false, |acc, &i| acc ^ key[i])
}

pub struct LiveParity<'a> {
    key: &'a [bool],
    pub log: Vec<bool>,
}

impl<'a> LiveParity<'a> {
    pub fn new(key: &'a [bool]) -> Self {
        LiveParity { key, log: Vec::new() }
    }
}

impl ParityOracle for LiveParity<'_> {
    fn parity(&mut self, positions: &[usize]) -> Option<bool> {
        let p = parity_of(self.key, positions);
        self.log.push(p);
        Some(p)
    }
}

/// Replays announced parities in order, whatever block they were meant for.
pub struct ReplayParity<'a> {
    log: &'a [bool],
    next: usize,
}

impl<'a> ReplayParity<'a> {
    pub fn new(log: &'a [bool]) -> Self {
        ReplayParity { log, next: 0 }
    }
}

impl ParityOracle for ReplayParity<'_> {
    fn parity(&mut self, _positions: &[usize]) -> Option<bool> {
        let p = self.log.get(self.next).copied();
        self.next += 1;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconcileParams {
    pub initial_block: usize,
    pub max_block: usize,
    /// Stop after this many consecutive passes without a mismatch.
    pub clean_passes: usize,
    pub max_passes: usize,
    pub abort_error_rate: f64,
    /// Public seed for the per-pass permutations.
    pub permutation_seed: u64,
}

impl Default for ReconcileParams {
    fn default() -> Self {
        ReconcileParams {
            initial_block: 8,
            max_block: 64,
            clean_passes: 3,
            max_passes: 40,
            abort_error_rate: 0.11,
            permutation_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub key_a: Vec<bool>,
    pub key_b: Vec<bool>,
    pub disclosed: usize,
    /// Error rate inferred from the first pass's block mismatches.
    pub estimated_error_rate: f64,
    pub passes: usize,
    pub corrections: usize,
    /// A's announced parities, in order.
    pub parity_log: Vec<bool>,
}

/// Inverts `P(odd errors in a block of k) = (1 − (1 − 2e)^k) / 2`.
fn error_rate_from_block_mismatches(fraction: f64, k: usize) -> f64 {
    if fraction >= 0.5 {
        return 0.5;
    }
    (1.0 - (1.0 - 2.0 * fraction).powf(1.0 / k as f64)) / 2.0
}

struct Outcome {
    disclosed: usize,
    estimate: f64,
    passes: usize,
    corrections: usize,
}

/// Bisects a block whose parity disagrees; returns false if the oracle ran dry.
fn bisect<O: ParityOracle>(key: &mut [bool], block: &[usize], oracle: &mut O, disclosed: &mut usize) -> bool {
    let mut block = block;
    while block.len() > 1 {
        let (left, right) = block.split_at(block.len() / 2);
        let Some(theirs) = oracle.parity(left) else {
            return false;
        };
        *disclosed += 1;
        block = if theirs != parity_of(key, left) { left } else { right };
    }
    key[block[0]] ^= true;
    true
}

fn cascade<O: ParityOracle>(
    key: &mut [bool],
    oracle: &mut O,
    params: &ReconcileParams,
    abort: bool,
) -> Result<Outcome> {
    let n = key.len();
    let mut rng = derived_rng(params.permutation_seed, 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut block = params.initial_block.max(1);
    let mut out = Outcome {
        disclosed: 0,
        estimate: 0.0,
        passes: 0,
        corrections: 0,
    };
    let mut clean = 0;
    while out.passes < params.max_passes && clean < params.clean_passes {
        if out.passes > 0 {
            order.shuffle(&mut rng);
        }
        let mut mismatched = Vec::new();
        let mut blocks = 0usize;
        for chunk in order.chunks(block) {
            blocks += 1;
            let Some(theirs) = oracle.parity(chunk) else {
                return Ok(out);
            };
            out.disclosed += 1;
            if theirs != parity_of(key, chunk) {
                mismatched.push(chunk.to_vec());
            }
        }
        if out.passes == 0 {
            out.estimate = error_rate_from_block_mismatches(mismatched.len() as f64 / blocks as f64, block);
            if abort && out.estimate > params.abort_error_rate {
                return Err(ProtocolError::ErrorRateAbort(out.estimate));
            }
        }
        out.passes += 1;
        clean = if mismatched.is_empty() { clean + 1 } else { 0 };
        for chunk in &mismatched {
            if !bisect(key, chunk, oracle, &mut out.disclosed) {
                return Ok(out);
            }
            out.corrections += 1;
        }
        block = (block * 2).min(params.max_block.max(1));
    }
    Ok(out)
}

/// Corrects `key_b` towards `key_a`.
///
/// Aborts when the first pass estimates an error rate above the threshold, or
/// when more than `disclosure_budget` parities had to be revealed.
pub fn reconcile(
    key_a: &[bool],
    key_b: &[bool],
    disclosure_budget: Option<usize>,
    params: &ReconcileParams,
) -> Result<Reconciliation> {
    if key_a.len() != key_b.len() {
        return Err(ProtocolError::KeyMisaligned);
    }
    if key_a.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }
    let mut oracle = LiveParity::new(key_a);
    let mut corrected = key_b.to_vec();
    let out = cascade(&mut corrected, &mut oracle, params, true)?;
    if let Some(budget) = disclosure_budget {
        if out.disclosed > budget {
            return Err(ProtocolError::DisclosureExceeded {
                disclosed: out.disclosed,
                budget,
            });
        }
    }
    Ok(Reconciliation {
        key_a: key_a.to_vec(),
        key_b: corrected,
        disclosed: out.disclosed,
        estimated_error_rate: out.estimate,
        passes: out.passes,
        corrections: out.corrections,
        parity_log: oracle.log,
    })
}

/// Runs B's side of the procedure against any parity source, never aborting.
pub fn reconcile_with<O: ParityOracle>(key: &[bool], oracle: &mut O, params: &ReconcileParams) -> Vec<bool> {
    let mut corrected = key.to_vec();
    if !corrected.is_empty() {
        cascade(&mut corrected, oracle, params, false).expect("no abort when replaying");
    }
    corrected
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_key(n: usize, seed: u64) -> Vec<bool> {
        let mut rng = derived_rng(seed, 1);
        (0..n).map(|_| rng.gen()).collect()
    }

    fn with_flips(key: &[bool], rate: f64, seed: u64) -> Vec<bool> {
        let mut rng = derived_rng(seed, 2);
        key.iter().map(|&b| b ^ rng.gen_bool(rate)).collect()
    }

    #[test]
    fn identical_keys_pass_unchanged() {
        let a = random_key(10_000, 1);
        let r = reconcile(&a, &a, None, &ReconcileParams::default()).unwrap();
        assert_eq!(r.key_b, a);
        assert_eq!(r.corrections, 0);
        assert_eq!(r.estimated_error_rate, 0.0);
        assert_eq!(r.passes, 3);
        // parities are still exchanged to establish that nothing differs
        assert_eq!(r.disclosed, 10_000 / 8 + 10_000usize.div_ceil(16) + 10_000usize.div_ceil(32));
    }

    #[test]
    fn two_percent_flips_are_corrected() {
        for seed in 0..5 {
            let a = random_key(10_000, seed);
            let b = with_flips(&a, 0.02, seed);
            let params = ReconcileParams {
                permutation_seed: seed,
                ..ReconcileParams::default()
            };
            let r = reconcile(&a, &b, None, &params).unwrap();
            assert_eq!(r.key_b, a, "seed {seed}");
            assert!((r.estimated_error_rate - 0.02).abs() < 0.01);
            assert!(r.disclosed < 10_000);
            assert_eq!(r.disclosed, r.parity_log.len());
        }
    }

    #[test]
    fn twenty_percent_flips_abort() {
        let a = random_key(10_000, 3);
        let b = with_flips(&a, 0.2, 3);
        assert!(matches!(
            reconcile(&a, &b, None, &ReconcileParams::default()),
            Err(ProtocolError::ErrorRateAbort(e)) if e > 0.11
        ));
    }

    #[test]
    fn budget_and_shape_errors() {
        let a = random_key(1000, 4);
        let b = with_flips(&a, 0.02, 4);
        assert!(matches!(
            reconcile(&a, &b, Some(10), &ReconcileParams::default()),
            Err(ProtocolError::DisclosureExceeded { budget: 10, .. })
        ));
        assert_eq!(
            reconcile(&a, &b[..10], None, &ReconcileParams::default()),
            Err(ProtocolError::KeyMisaligned)
        );
        assert_eq!(reconcile(&[], &[], None, &ReconcileParams::default()), Err(ProtocolError::EmptyKey));
    }

    #[test]
    fn replay_with_the_same_key_reproduces_the_correction() {
        let a = random_key(5000, 5);
        let b = with_flips(&a, 0.03, 5);
        let params = ReconcileParams::default();
        let r = reconcile(&a, &b, None, &params).unwrap();
        let replayed = reconcile_with(&b, &mut ReplayParity::new(&r.parity_log), &params);
        assert_eq!(replayed, r.key_b);
    }

    #[test]
    fn single_error_in_short_keys() {
        for n in 64..96 {
            let a = random_key(n, n as u64);
            let mut b = a.clone();
            b[n / 2] ^= true;
            let r = reconcile(&a, &b, None, &ReconcileParams::default()).unwrap();
            assert_eq!(r.key_b, a);
        }
    }
}
