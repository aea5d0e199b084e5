//! Keystream expansion, binary→ternary mapping and the control statistics.
//!
//! The controller expands a short preshared seed into a long pseudorandom bit
//! stream (AES in counter mode), maps it to trits, and emits one element state
//! per trit. Users holding the seed rebuild the same trits and use them as the
//! decoding string.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use aes::cipher::{KeyIvInit, StreamCipher};
use serde::{Deserialize, Serialize};
use thiserror::Error;

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;
type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModulationError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("keystream underflow: {needed} more bits required")]
    Underflow { needed: usize },
    #[error("strings are misaligned: {left} vs {right} elements")]
    Alignment { left: usize, right: usize },
    #[error("no positions left to compare after omitting trit 2")]
    EmptyComparison,
    #[error("invalid trit {value} at position {position}")]
    InvalidTrit { position: usize, value: u8 },
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, ModulationError>;

/// Preshared seed: public identifier plus secret key material.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SeedTokenRepr", into = "SeedTokenRepr")]
pub struct SeedToken {
    token_id: String,
    key: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct SeedTokenRepr {
    token_id: String,
    key_hex: String,
}

impl TryFrom<SeedTokenRepr> for SeedToken {
    type Error = ModulationError;
    fn try_from(r: SeedTokenRepr) -> Result<Self> {
        SeedToken::from_hex(r.token_id, &r.key_hex)
    }
}

impl From<SeedToken> for SeedTokenRepr {
    fn from(s: SeedToken) -> Self {
        SeedTokenRepr {
            key_hex: hex::encode(&s.key),
            token_id: s.token_id,
        }
    }
}

impl fmt::Debug for SeedToken {
    // never print the key
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeedToken")
            .field("token_id", &self.token_id)
            .field("key_bits", &(self.key.len() * 8))
            .finish()
    }
}

impl SeedToken {
    pub fn new(token_id: impl Into<String>, key: Vec<u8>) -> Result<Self> {
        if key.len() != 16 && key.len() != 32 {
            return Err(ModulationError::Config(format!(
                "seed key must be 16 or 32 bytes, got {}",
                key.len()
            )));
        }
        Ok(SeedToken {
            token_id: token_id.into(),
            key,
        })
    }

    pub fn from_hex(token_id: impl Into<String>, key_hex: &str) -> Result<Self> {
        let key = hex::decode(key_hex.trim())
            .map_err(|e| ModulationError::Config(format!("bad hex key: {e}")))?;
        SeedToken::new(token_id, key)
    }

    /// Deterministic 128-bit token derived from a number, for tests and demos.
    pub fn from_u64(token_id: impl Into<String>, seed: u64) -> Self {
        let mut key = vec![0u8; 16];
        key[..8].copy_from_slice(&seed.to_be_bytes());
        key[8..].copy_from_slice(&(!seed).rotate_left(17).to_le_bytes());
        SeedToken {
            token_id: token_id.into(),
            key,
        }
    }

    pub fn token_id(&self) -> &str {
        &self.token_id
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }
}

/// A keyed deterministic bit source. The default is [`AesCtr`]; tests may
/// inject scripted streams.
pub trait KeyedBitSource {
    type Stream: Iterator<Item = bool>;
    fn stream(&self, seed: &SeedToken) -> Result<Self::Stream>;
}

/// AES (128 or 256 by key length) in counter mode from an all-zero counter.
#[derive(Debug, Clone, Copy, Default)]
pub struct AesCtr;

impl KeyedBitSource for AesCtr {
    type Stream = AesCtrKeystream;
    fn stream(&self, seed: &SeedToken) -> Result<AesCtrKeystream> {
        AesCtrKeystream::new(seed.key(), [0u8; 16])
    }
}

enum CtrCore {
    Aes128(Box<Aes128Ctr>),
    Aes256(Box<Aes256Ctr>),
}

/// Infinite bit iterator over an AES-CTR keystream, MSB first within each byte.
pub struct AesCtrKeystream {
    core: CtrCore,
    block: [u8; 16],
    bit: usize,
}

impl AesCtrKeystream {
    pub fn new(key: &[u8], initial_counter: [u8; 16]) -> Result<Self> {
        let core = match key.len() {
            16 => CtrCore::Aes128(Box::new(Aes128Ctr::new(key.into(), &initial_counter.into()))),
            32 => CtrCore::Aes256(Box::new(Aes256Ctr::new(key.into(), &initial_counter.into()))),
            n => {
                return Err(ModulationError::Config(format!(
                    "AES key must be 16 or 32 bytes, got {n}"
                )))
            }
        };
        Ok(AesCtrKeystream {
            core,
            block: [0; 16],
            bit: 128,
        })
    }

    /// Next 16 keystream bytes.
    pub fn next_block(&mut self) -> [u8; 16] {
        let mut buf = [0u8; 16];
        match &mut self.core {
            CtrCore::Aes128(c) => c.apply_keystream(&mut buf),
            CtrCore::Aes256(c) => c.apply_keystream(&mut buf),
        }
        buf
    }
}

impl Iterator for AesCtrKeystream {
    type Item = bool;

    fn next(&mut self) -> Option<bool> {
        if self.bit == 128 {
            self.block = self.next_block();
            self.bit = 0;
        }
        let byte = self.block[self.bit / 8];
        let b = (byte >> (7 - self.bit % 8)) & 1 == 1;
        self.bit += 1;
        Some(b)
    }
}

/// First `n_bits` of the seed's keystream.
pub fn expand_stream(seed: &SeedToken, n_bits: usize) -> Result<Vec<bool>> {
    Ok(AesCtr.stream(seed)?.take(n_bits).collect())
}

/// What a trit string is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TritRole {
    /// The controller's modulation string.
    Modulation,
    /// A decoding string held by a user.
    UserDecoding,
}

/// A sequence over `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TritString {
    trits: Vec<u8>,
    role: TritRole,
}

impl TritString {
    pub fn new(trits: Vec<u8>, role: TritRole) -> Result<Self> {
        if let Some((position, &value)) = trits.iter().enumerate().find(|(_, &t)| t > 2) {
            return Err(ModulationError::InvalidTrit { position, value });
        }
        Ok(TritString { trits, role })
    }

    pub fn from_bits(bits: &[bool], role: TritRole) -> Self {
        TritString {
            trits: bits.iter().map(|&b| b as u8).collect(),
            role,
        }
    }

    pub fn trits(&self) -> &[u8] {
        &self.trits
    }

    pub fn role(&self) -> TritRole {
        self.role
    }

    pub fn with_role(mut self, role: TritRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.trits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trits.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<u8> {
        self.trits.get(i).copied()
    }

    /// Subsequence at the given positions.
    pub fn select(&self, indices: &[usize]) -> Option<TritString> {
        let trits = indices
            .iter()
            .map(|&i| self.trits.get(i).copied())
            .collect::<Option<Vec<u8>>>()?;
        Some(TritString {
            trits,
            role: self.role,
        })
    }

    /// Fraction of trit 2.
    pub fn mixed_fraction(&self) -> f64 {
        if self.trits.is_empty() {
            return 0.0;
        }
        self.trits.iter().filter(|&&t| t == 2).count() as f64 / self.trits.len() as f64
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &t in &self.trits {
            c[t as usize] += 1;
        }
        c
    }
}

impl fmt::Display for TritString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.trits.iter().map(|&t| (b'0' + t) as char).collect();
        f.write_str(&s)
    }
}

impl FromStr for TritString {
    type Err = ModulationError;
    fn from_str(s: &str) -> Result<Self> {
        let trits = s
            .trim()
            .bytes()
            .enumerate()
            .map(|(i, c)| match c {
                b'0'..=b'2' => Ok(c - b'0'),
                other => Err(ModulationError::InvalidTrit {
                    position: i,
                    value: other,
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(TritString {
            trits,
            role: TritRole::Modulation,
        })
    }
}

/// Binary→ternary mapping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingRule {
    /// Pairwise: `11` → 2, otherwise the two bits as two trits.
    PaperPair,
    /// Trit 2 with a configurable probability via 32-bit thresholds.
    TargetP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationParams {
    pub p_target: f64,
    pub rule: MappingRule,
}

impl ModulationParams {
    /// The pair rule; its trit-2 fraction is 1/7.
    pub fn paper_pair() -> Self {
        ModulationParams {
            p_target: 1.0 / 7.0,
            rule: MappingRule::PaperPair,
        }
    }

    pub fn target_p(p: f64) -> Result<Self> {
        let params = ModulationParams {
            p_target: p,
            rule: MappingRule::TargetP,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target >= 0.0 && self.p_target < 1.0) {
            return Err(ModulationError::Domain(format!(
                "p_target {} outside [0, 1)",
                self.p_target
            )));
        }
        Ok(())
    }

    /// The mixed-state proportion this rule produces in expectation.
    pub fn expected_p(&self) -> f64 {
        match self.rule {
            MappingRule::PaperPair => 1.0 / 7.0,
            MappingRule::TargetP => self.p_target,
        }
    }
}

impl Default for ModulationParams {
    fn default() -> Self {
        ModulationParams::paper_pair()
    }
}

/// Streaming form of the pair rule.
pub struct PairRuleTrits<I> {
    bits: I,
    pending: Option<u8>,
}

impl<I: Iterator<Item = bool>> Iterator for PairRuleTrits<I> {
    type Item = u8;
    fn next(&mut self) -> Option<u8> {
        if let Some(t) = self.pending.take() {
            return Some(t);
        }
        let first = self.bits.next()?;
        // a lone trailing bit is dropped
        let second = self.bits.next()?;
        if first && second {
            Some(2)
        } else {
            self.pending = Some(second as u8);
            Some(first as u8)
        }
    }
}

pub fn pair_rule_trits<I: IntoIterator<Item = bool>>(bits: I) -> PairRuleTrits<I::IntoIter> {
    PairRuleTrits {
        bits: bits.into_iter(),
        pending: None,
    }
}

pub fn bits_to_trits_paper_rule(bits: &[bool]) -> TritString {
    TritString {
        trits: pair_rule_trits(bits.iter().copied()).collect(),
        role: TritRole::Modulation,
    }
}

/// Inverse of the pair rule: 2 → `11`, each following 0/1 pair → its bits.
pub fn trits_to_bits_paper_rule(trits: &TritString) -> Result<Vec<bool>> {
    let t = trits.trits();
    let mut bits = Vec::with_capacity(t.len() + t.len() / 7);
    let mut i = 0;
    while i < t.len() {
        if t[i] == 2 {
            bits.extend([true, true]);
            i += 1;
        } else {
            match t.get(i + 1) {
                Some(&second) if second < 2 && !(t[i] == 1 && second == 1) => {
                    bits.extend([t[i] == 1, second == 1]);
                    i += 2;
                }
                _ => {
                    return Err(ModulationError::InvalidTrit {
                        position: i + 1,
                        value: t.get(i + 1).copied().unwrap_or(u8::MAX),
                    })
                }
            }
        }
    }
    Ok(bits)
}

fn threshold_32(p: f64) -> u64 {
    (p * 4_294_967_296.0).round() as u64
}

/// Unbounded streaming form of [`target_p_trits`]; ends with the bit stream.
pub struct TargetPTrits<I> {
    bits: I,
    threshold: u64,
}

impl<I: Iterator<Item = bool>> Iterator for TargetPTrits<I> {
    type Item = u8;
    fn next(&mut self) -> Option<u8> {
        let mut chunk: u64 = 0;
        for _ in 0..32 {
            chunk = (chunk << 1) | self.bits.next()? as u64;
        }
        if chunk < self.threshold {
            Some(2)
        } else {
            self.bits.next().map(|b| b as u8)
        }
    }
}

pub fn target_p_trit_stream<I: IntoIterator<Item = bool>>(
    bits: I,
    params: &ModulationParams,
) -> Result<TargetPTrits<I::IntoIter>> {
    params.validate()?;
    Ok(TargetPTrits {
        bits: bits.into_iter(),
        threshold: threshold_32(params.p_target),
    })
}

/// Draws `n_trits` trits with `P(2) = p_target` from a bit stream.
///
/// Each trit consumes a 32-bit chunk compared against `round(p·2³²)`; a
/// non-2 trit consumes one more bit to choose between 0 and 1.
pub fn target_p_trits<I: Iterator<Item = bool>>(
    bits: &mut I,
    params: &ModulationParams,
    n_trits: usize,
) -> Result<Vec<u8>> {
    params.validate()?;
    let threshold = threshold_32(params.p_target);
    let mut out = Vec::with_capacity(n_trits);
    for produced in 0..n_trits {
        let short = |taken: usize| ModulationError::Underflow {
            needed: (n_trits - produced) * 33 - taken,
        };
        let mut chunk: u64 = 0;
        for k in 0..32 {
            let b = bits.next().ok_or_else(|| short(k))?;
            chunk = (chunk << 1) | b as u64;
        }
        if chunk < threshold {
            out.push(2);
        } else {
            let b = bits.next().ok_or_else(|| short(32))?;
            out.push(b as u8);
        }
    }
    Ok(out)
}

pub fn bits_to_trits_target_p(
    bits: &[bool],
    params: &ModulationParams,
    n_trits: usize,
) -> Result<TritString> {
    let trits = target_p_trits(&mut bits.iter().copied(), params, n_trits)?;
    Ok(TritString {
        trits,
        role: TritRole::Modulation,
    })
}

/// The first `n_trits` modulation trits derived from a seed.
pub fn modulation_string(
    seed: &SeedToken,
    params: &ModulationParams,
    n_trits: usize,
) -> Result<TritString> {
    modulation_string_from(&AesCtr, seed, params, n_trits)
}

pub fn modulation_string_from<K: KeyedBitSource>(
    source: &K,
    seed: &SeedToken,
    params: &ModulationParams,
    n_trits: usize,
) -> Result<TritString> {
    params.validate()?;
    let mut stream = source.stream(seed)?;
    let trits = match params.rule {
        MappingRule::PaperPair => {
            let t: Vec<u8> = pair_rule_trits(&mut stream).take(n_trits).collect();
            if t.len() < n_trits {
                return Err(ModulationError::Underflow {
                    needed: 2 * (n_trits - t.len()),
                });
            }
            t
        }
        MappingRule::TargetP => target_p_trits(&mut stream, params, n_trits)?,
    };
    Ok(TritString {
        trits,
        role: TritRole::Modulation,
    })
}

/// Result of comparing a user's string against the modulation string.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlCorrelation {
    pub u: f64,
    pub n: usize,
}

/// Control-correlation statistic `U = Σ (−1)^(tu ⊕ td) / N` over positions
/// where `t_d` is not 2.
pub fn control_correlation(t_u: &TritString, t_d: &TritString) -> Result<ControlCorrelation> {
    if t_u.len() != t_d.len() {
        return Err(ModulationError::Alignment {
            left: t_u.len(),
            right: t_d.len(),
        });
    }
    let mut n = 0usize;
    let mut agree = 0usize;
    for (position, (&u, &d)) in t_u.trits().iter().zip(t_d.trits()).enumerate() {
        if d == 2 {
            continue;
        }
        if u == 2 {
            return Err(ModulationError::InvalidTrit { position, value: u });
        }
        n += 1;
        if u == d {
            agree += 1;
        }
    }
    if n == 0 {
        return Err(ModulationError::EmptyComparison);
    }
    Ok(ControlCorrelation {
        u: (2.0 * agree as f64 - n as f64) / n as f64,
        n,
    })
}

/// Binary entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(ModulationError::Domain(format!("{x} outside [0, 1]")));
    }
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    Ok(term(x) + term(1.0 - x))
}

/// `B = h((1 + U)/2)`.
pub fn entropy_of_control(u: f64) -> Result<f64> {
    check_u(u)?;
    binary_entropy((1.0 + u) / 2.0)
}

/// Inverts `B = h((1 + U)/2)` on the `U ≥ 0` branch by bisection.
pub fn control_from_entropy(b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&b) {
        return Err(ModulationError::Domain(format!("entropy {b} outside [0, 1]")));
    }
    // h((1+U)/2) decreases from 1 at U = 0 to 0 at U = 1
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy((1.0 + mid) / 2.0)? > b {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_u(u: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&u) {
        return Err(ModulationError::Domain(format!("U = {u} outside [-1, 1]")));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(ModulationError::Domain(format!("p = {p} outside [0, 1)")));
    }
    Ok(())
}

/// Modulated correlation `U·(1 − p)·E`.
pub fn predicted_e_mod(u: f64, p: f64, e: f64) -> Result<f64> {
    check_u(u)?;
    check_p(p)?;
    if !(-1.0..=1.0).contains(&e) {
        return Err(ModulationError::Domain(format!("E = {e} outside [-1, 1]")));
    }
    Ok(u * (1.0 - p) * e)
}

/// Modulated CHSH value `2√2·(1 − p)·U`.
pub fn predicted_s_mod(u: f64, p: f64) -> Result<f64> {
    check_u(u)?;
    check_p(p)?;
    Ok(2.0 * SQRT_2 * (1.0 - p) * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bits(s: &str) -> Vec<bool> {
        s.bytes().map(|c| c == b'1').collect()
    }

    fn trits(s: &str) -> TritString {
        s.parse().unwrap()
    }

    fn seed() -> SeedToken {
        SeedToken::from_hex("s0", "000102030405060708090a0b0c0d0e0f").unwrap()
    }

    #[test]
    fn seed_key_length_is_checked() {
        assert!(SeedToken::new("x", vec![0; 24]).is_err());
        assert!(SeedToken::new("x", vec![0; 32]).is_ok());
        assert!(matches!(
            SeedToken::from_hex("x", "zz"),
            Err(ModulationError::Config(_))
        ));
    }

    #[test]
    fn debug_output_hides_key() {
        let s = format!("{:?}", seed());
        assert!(!s.contains("0a0b"));
        assert!(s.contains("s0"));
    }

    fn xor_hex(a: &str, b: &str) -> Vec<u8> {
        hex::decode(a)
            .unwrap()
            .iter()
            .zip(hex::decode(b).unwrap())
            .map(|(x, y)| x ^ y)
            .collect()
    }

    // NIST SP 800-38A, F.5.1 and F.5.5: keystream = ciphertext ⊕ plaintext.
    #[test]
    fn aes_ctr_matches_published_vectors() {
        let counter: [u8; 16] = hex::decode("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff")
            .unwrap()
            .try_into()
            .unwrap();
        let pt = [
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
        ];
        let key128 = hex::decode("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let ct128 = [
            "874d6191b620e3261bef6864990db6ce",
            "9806f66b7970fdff8617187bb9fffdff",
        ];
        let mut ks = AesCtrKeystream::new(&key128, counter).unwrap();
        for (p, c) in pt.iter().zip(ct128) {
            assert_eq!(ks.next_block().to_vec(), xor_hex(p, c));
        }
        let key256 =
            hex::decode("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4").unwrap();
        let ct256 = [
            "601ec313775789a5b7a7f504bbf3d228",
            "f443e3ca4d62b59aca84e990cacaf5c5",
        ];
        let mut ks = AesCtrKeystream::new(&key256, counter).unwrap();
        for (p, c) in pt.iter().zip(ct256) {
            assert_eq!(ks.next_block().to_vec(), xor_hex(p, c));
        }
    }

    #[test]
    fn bits_are_msb_first() {
        let key = hex::decode("2b7e151628aed2a6abf7158809cf4f3c").unwrap();
        let mut blocks = AesCtrKeystream::new(&key, [0; 16]).unwrap();
        let first = blocks.next_block();
        let stream: Vec<bool> = AesCtrKeystream::new(&key, [0; 16]).unwrap().take(8).collect();
        let byte = stream.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8);
        assert_eq!(byte, first[0]);
    }

    #[test]
    fn expansion_is_deterministic_with_prefix_property() {
        assert!(expand_stream(&seed(), 0).unwrap().is_empty());
        let a = expand_stream(&seed(), 1_000_000).unwrap();
        let b = expand_stream(&seed(), 1_000_000).unwrap();
        assert_eq!(a, b);
        assert_eq!(expand_stream(&seed(), 1234).unwrap(), a[..1234]);
        let ones = a.iter().filter(|&&b| b).count() as f64 / a.len() as f64;
        assert!((ones - 0.5).abs() < 5.0 * (0.25f64 / 1e6).sqrt(), "{ones}");
    }

    #[test]
    fn pair_rule_examples() {
        assert_eq!(bits_to_trits_paper_rule(&bits("11")).trits(), &[2]);
        assert_eq!(bits_to_trits_paper_rule(&bits("01")).trits(), &[0, 1]);
        assert_eq!(bits_to_trits_paper_rule(&bits("10")).trits(), &[1, 0]);
        assert_eq!(bits_to_trits_paper_rule(&bits("00")).trits(), &[0, 0]);
        assert_eq!(bits_to_trits_paper_rule(&bits("1100")).trits(), &[2, 0, 0]);
        assert_eq!(bits_to_trits_paper_rule(&bits("11001")).trits(), &[2, 0, 0]);
    }

    #[test]
    fn pair_rule_fraction_is_one_seventh() {
        let b = expand_stream(&seed(), 1_000_000).unwrap();
        let t = bits_to_trits_paper_rule(&b);
        let n = t.len() as f64;
        let p = 1.0 / 7.0;
        assert!((t.mixed_fraction() - p).abs() < 5.0 * (p * (1.0 - p) / n).sqrt());
        assert_eq!(trits_to_bits_paper_rule(&t).unwrap(), b);
    }

    #[test]
    fn inverse_pair_rule_rejects_impossible_strings() {
        assert!(trits_to_bits_paper_rule(&trits("11")).is_err());
        assert!(trits_to_bits_paper_rule(&trits("0")).is_err());
        assert!(trits_to_bits_paper_rule(&trits("02")).is_err());
    }

    #[test]
    fn target_p_zero_never_emits_two() {
        let params = ModulationParams::target_p(0.0).unwrap();
        let t = modulation_string(&seed(), &params, 50_000).unwrap();
        assert_eq!(t.counts()[2], 0);
    }

    #[test]
    fn target_p_fractions() {
        let n = 1_000_000;
        let params = ModulationParams::target_p(0.5).unwrap();
        let t = modulation_string(&seed(), &params, n).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((t.mixed_fraction() - 0.5).abs() < 5.0 * sigma);

        let params = ModulationParams::target_p(0.2).unwrap();
        let t = modulation_string(&seed(), &params, n).unwrap();
        let c = t.counts();
        let sigma = (0.4 * 0.6 / n as f64).sqrt();
        for k in [0, 1] {
            let f = c[k] as f64 / n as f64;
            assert!((f - 0.4).abs() < 5.0 * sigma, "trit {k}: {f}");
        }
    }

    #[test]
    fn target_p_underflow() {
        let params = ModulationParams::target_p(0.3).unwrap();
        let err = bits_to_trits_target_p(&bits("1010"), &params, 1).unwrap_err();
        assert_eq!(err, ModulationError::Underflow { needed: 29 });
        assert!(ModulationParams::target_p(1.0).is_err());
    }

    #[test]
    fn target_p_stream_matches_bounded_form() {
        let params = ModulationParams::target_p(0.2).unwrap();
        let bits = expand_stream(&seed(), 33 * 500).unwrap();
        let bounded = bits_to_trits_target_p(&bits, &params, 400).unwrap();
        let streamed: Vec<u8> = target_p_trit_stream(bits.iter().copied(), &params)
            .unwrap()
            .take(400)
            .collect();
        assert_eq!(bounded.trits(), &streamed[..]);
    }

    #[test]
    fn target_p_threshold_is_exact() {
        // p = 0.5 → threshold 2^31: a leading 1 bit is never below it
        let params = ModulationParams::target_p(0.5).unwrap();
        let mut input = vec![true];
        input.extend(vec![false; 31]);
        input.push(true);
        assert_eq!(bits_to_trits_target_p(&input, &params, 1).unwrap().trits(), &[1]);
        let mut input = vec![false; 32];
        input[31] = true;
        assert_eq!(bits_to_trits_target_p(&input, &params, 1).unwrap().trits(), &[2]);
    }

    #[test]
    fn control_correlation_examples() {
        let c = control_correlation(&trits("00000000"), &trits("01010101")).unwrap();
        assert_eq!((c.u, c.n), (0.0, 8));
        let c = control_correlation(&trits("0110"), &trits("0110")).unwrap();
        assert_eq!(c.u, 1.0);
        let c = control_correlation(&trits("00000000"), &trits("00010000")).unwrap();
        assert_eq!(c.u, 0.75);
        // trit-2 positions of the modulation string are skipped
        let c = control_correlation(&trits("0210"), &trits("0201")).unwrap();
        assert_eq!((c.u, c.n), (-1.0 / 3.0, 3));
    }

    #[test]
    fn control_correlation_errors() {
        assert!(matches!(
            control_correlation(&trits("01"), &trits("011")),
            Err(ModulationError::Alignment { .. })
        ));
        assert_eq!(
            control_correlation(&trits("01"), &trits("22")),
            Err(ModulationError::EmptyComparison)
        );
        assert!(matches!(
            control_correlation(&trits("21"), &trits("01")),
            Err(ModulationError::InvalidTrit { position: 0, .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let x = (1.0 + 1.0 / SQRT_2) / 2.0;
        assert_abs_diff_eq!(binary_entropy(x).unwrap(), 0.60088, epsilon = 1e-5);
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn entropy_inversion_round_trips() {
        for u in [0.0, 0.1, 0.5, 1.0 / SQRT_2, 0.9, 1.0] {
            let b = entropy_of_control(u).unwrap();
            assert_abs_diff_eq!(control_from_entropy(b).unwrap(), u, epsilon = 1e-7);
        }
        assert!(control_from_entropy(-0.1).is_err());
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(predicted_e_mod(1.0, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(predicted_e_mod(0.0, 0.3, -0.7).unwrap(), 0.0);
        assert_abs_diff_eq!(
            predicted_e_mod(0.9, 0.2, 1.0 / SQRT_2).unwrap(),
            0.50912,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(predicted_s_mod(1.0, 0.0).unwrap(), 2.0 * SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(predicted_s_mod(1.0 / SQRT_2, 0.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(predicted_s_mod(1.0, 0.5).unwrap(), SQRT_2, epsilon = 1e-12);
        assert!(predicted_s_mod(1.1, 0.0).is_err());
        assert!(predicted_s_mod(0.5, 1.0).is_err());
        assert!(predicted_e_mod(0.5, 0.1, 1.5).is_err());
    }

    #[test]
    fn trit_string_text_form() {
        let t = trits("0120");
        assert_eq!(t.to_string(), "0120");
        assert!("013".parse::<TritString>().is_err());
        assert!(TritString::new(vec![0, 3], TritRole::Modulation).is_err());
        let t = trits("012012");
        assert_eq!(t.select(&[0, 2, 4]).unwrap().trits(), &[0, 2, 1]);
        assert!(t.select(&[6]).is_none());
    }

    proptest! {
        #[test]
        fn pair_rule_is_lossless(input in proptest::collection::vec(any::<bool>(), 0..400)) {
            let t = bits_to_trits_paper_rule(&input);
            let back = trits_to_bits_paper_rule(&t).unwrap();
            prop_assert_eq!(&back[..], &input[..input.len() / 2 * 2]);
        }

        #[test]
        fn self_and_complement_correlation(input in proptest::collection::vec(any::<bool>(), 1..200)) {
            let t = TritString::from_bits(&input, TritRole::Modulation);
            let flipped: Vec<bool> = input.iter().map(|b| !b).collect();
            let c = TritString::from_bits(&flipped, TritRole::UserDecoding);
            prop_assert_eq!(control_correlation(&t, &t).unwrap().u, 1.0);
            prop_assert_eq!(control_correlation(&c, &t).unwrap().u, -1.0);
        }

        #[test]
        fn violation_iff_above_threshold(u in -1.0f64..=1.0, p in 0.0f64..0.999) {
            let s = predicted_s_mod(u, p).unwrap();
            let margin = u.abs() * (1.0 - p) - 1.0 / SQRT_2;
            prop_assume!(margin.abs() > 1e-12);
            prop_assert_eq!(s.abs() > 2.0, margin > 0.0);
        }

        #[test]
        fn stream_prefix_property(k in 0usize..2000, extra in 0usize..500) {
            let long = expand_stream(&seed(), k + extra).unwrap();
            prop_assert_eq!(expand_stream(&seed(), k).unwrap(), long[..k].to_vec());
        }
    }
}
