//! Attack models: collaborating taps that try to read the modulation pattern,
//! the blind-guess bound for unauthorized decoding, and memory-attack replay.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{detect_event, BornTable, ChannelParams, CoincidenceEvent, EventClock, Peak};
use crate::modulation::{control_correlation, TritRole, TritString};
use crate::protocol::{
    privacy_amplify, reconcile_with, Controller, ModulationSource, NamedBasis, PaSeed,
    ProtocolError, PublicAnnouncement, ReconcileParams, ReplayParity, RoundRole, SessionResult,
};
use crate::quantum::{MeasurementSetting, Outcome, Party, Visibility};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("inconclusive: no period up to {max_period} has {min_votes} votes at every position")]
    Inconclusive { max_period: usize, min_votes: usize },
    #[error("n = {n} is above the supported maximum {max}")]
    TooLarge { n: u32, max: u32 },
    #[error("tap event at round {0} was not measured in X on both sides")]
    NotTapped(u64),
    #[error("session produced no key to attack")]
    NoKey,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, AdversaryError>;

/// A tap pair's reading of one round's phase: 0 for `++`/`−−`, 1 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TapObservation {
    pub round_index: u64,
    /// `None` for side-peak events, which carry no phase information.
    pub inferred_sign: Option<u8>,
}

/// Infers the per-round sign from coincidences measured in X by both taps.
pub fn tap_infer_signs(events: &[CoincidenceEvent]) -> Result<Vec<TapObservation>> {
    let x = MeasurementSetting::sigma_x();
    events
        .iter()
        .map(|e| {
            if !(e.basis_a.approx_eq(x, 1e-12) && e.basis_b.approx_eq(x, 1e-12)) {
                return Err(AdversaryError::NotTapped(e.round_index));
            }
            Ok(TapObservation {
                round_index: e.round_index,
                inferred_sign: (e.peak == Peak::Central)
                    .then_some((e.outcome_a != e.outcome_b) as u8),
            })
        })
        .collect()
}

/// Events seen by two collaborating taps fixed to X on a source's output.
pub fn tap_session<R: Rng + ?Sized>(
    source: &ModulationSource,
    rounds: u64,
    v: Visibility,
    channel: &ChannelParams,
    rng: &mut R,
) -> Result<Vec<CoincidenceEvent>> {
    let mut controller = Controller::new(source.clone(), rounds)?;
    let mut clock = EventClock::new(channel, rounds).map_err(ProtocolError::from)?;
    let mut born = BornTable::new(v);
    let x = MeasurementSetting::sigma_x();
    let mut events = Vec::new();
    while let Some((round, true_pair)) = clock.next_event(rng) {
        let kind = controller.emit(round)?;
        events.push(detect_event(round, kind, (x, x), true_pair, channel, &mut born, rng));
    }
    Ok(events)
}

/// Test rounds the taps could certify with: none, as both stay in X.
pub fn tap_chsh_usable(events: &[CoincidenceEvent]) -> usize {
    let named = |s: MeasurementSetting| {
        [NamedBasis::X, NamedBasis::Y, NamedBasis::XPlusY, NamedBasis::XMinusY]
            .into_iter()
            .find(|b| b.setting().approx_eq(s, 1e-12))
    };
    events
        .iter()
        .filter(|e| {
            matches!(
                (named(e.basis_a), named(e.basis_b)),
                (Some(a), Some(b)) if a.chsh_index(Party::A).is_some() && b.chsh_index(Party::B).is_some()
            )
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternHypothesis {
    pub period: usize,
    pub recovered: Vec<u8>,
    /// Mean per-position majority margin `|v0 − v1| / (v0 + v1)`.
    pub confidence: f64,
    pub min_votes_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternSearch {
    pub max_period: usize,
    pub min_votes: usize,
    pub confidence_floor: f64,
    /// Prefer the shortest period within this much of the best confidence,
    /// so multiples of the true period do not win on noise.
    pub tolerance: f64,
}

impl Default for PatternSearch {
    fn default() -> Self {
        PatternSearch {
            max_period: 64,
            min_votes: 50,
            confidence_floor: 0.9,
            tolerance: 0.05,
        }
    }
}

fn fold(obs: &[TapObservation], period: usize, min_votes: usize) -> Option<PatternHypothesis> {
    let mut votes = vec![[0usize; 2]; period];
    for o in obs {
        if let Some(s) = o.inferred_sign {
            votes[(o.round_index % period as u64) as usize][s as usize] += 1;
        }
    }
    let min_seen = votes.iter().map(|v| v[0] + v[1]).min().unwrap_or(0);
    if min_seen < min_votes.max(1) {
        return None;
    }
    let margin: f64 = votes
        .iter()
        .map(|v| v[0].abs_diff(v[1]) as f64 / (v[0] + v[1]) as f64)
        .sum();
    Some(PatternHypothesis {
        period,
        recovered: votes.iter().map(|v| (v[1] > v[0]) as u8).collect(),
        confidence: margin / period as f64,
        min_votes_seen: min_seen,
    })
}

/// Folds the observations at every candidate period and majority-votes each
/// position. Returns the shortest period close to the best confidence, or
/// `None` when nothing reaches the floor.
pub fn recover_repeated_pattern(
    obs: &[TapObservation],
    search: &PatternSearch,
) -> Result<Option<PatternHypothesis>> {
    let candidates: Vec<PatternHypothesis> = (1..=search.max_period)
        .into_par_iter()
        .filter_map(|p| fold(obs, p, search.min_votes))
        .collect();
    if candidates.is_empty() {
        return Err(AdversaryError::Inconclusive {
            max_period: search.max_period,
            min_votes: search.min_votes,
        });
    }
    let best = candidates
        .iter()
        .map(|h| h.confidence)
        .fold(f64::NEG_INFINITY, f64::max);
    let bar = search.confidence_floor.max(best - search.tolerance);
    Ok(candidates.into_iter().find(|h| h.confidence >= bar))
}

/// All candidate periods that had enough votes, with their confidence.
pub fn fold_confidences(obs: &[TapObservation], max_period: usize, min_votes: usize) -> Vec<(usize, f64)> {
    (1..=max_period)
        .into_par_iter()
        .filter_map(|p| fold(obs, p, min_votes).map(|h| (p, h.confidence)))
        .collect()
}

/// Share of positions (over one common cycle, skipping true 2s) the
/// hypothesis gets right.
pub fn pattern_accuracy(hypothesis: &PatternHypothesis, truth: &TritString) -> f64 {
    let p = hypothesis.period;
    let t = truth.trits();
    let span = num_lcm(p, t.len());
    let (mut right, mut total) = (0usize, 0usize);
    for i in 0..span {
        let want = t[i % t.len()];
        if want == 2 {
            continue;
        }
        total += 1;
        right += (hypothesis.recovered[i % p] == want) as usize;
    }
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}

fn num_lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Largest `n` for which the closed form is evaluated exactly in `u128`.
pub const BLIND_BOUND_MAX_N: u32 = 120;
pub const BRUTE_FORCE_MAX_N: u32 = 24;

/// Expected |U| of a uniformly random guess over `n` compared positions:
/// `Σ_{i ≤ n/2} C(n, i)·(n − 2i) / (2^{n−1}·n)`, and 1 for `n ≤ 1`.
pub fn blind_guess_expected_u(n: u32) -> Result<f64> {
    if n > BLIND_BOUND_MAX_N {
        return Err(AdversaryError::TooLarge {
            n,
            max: BLIND_BOUND_MAX_N,
        });
    }
    if n <= 1 {
        return Ok(1.0);
    }
    let n128 = n as u128;
    let mut binom: u128 = 1;
    let mut numerator: u128 = 0;
    for i in 0..=n128 / 2 {
        if i > 0 {
            binom = binom * (n128 - i + 1) / i;
        }
        numerator += binom * (n128 - 2 * i);
    }
    let denominator = (1u128 << (n - 1)) * n128;
    Ok(ratio_to_f64(numerator, denominator))
}

fn ratio_to_f64(num: u128, den: u128) -> f64 {
    let g = {
        let (mut a, mut b) = (num, den);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    };
    (num / g) as f64 / (den / g) as f64
}

/// Mean |U| over all `2^n` binary guesses against an all-zero string,
/// enumerated through [`control_correlation`].
pub fn brute_force_expected_u(n: u32) -> Result<f64> {
    if n > BRUTE_FORCE_MAX_N {
        return Err(AdversaryError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    if n == 0 {
        return Ok(1.0);
    }
    let zeros = TritString::new(vec![0; n as usize], TritRole::Modulation).expect("valid");
    let total: u128 = (0u64..1 << n)
        .into_par_iter()
        .map(|g| {
            let guess: Vec<u8> = (0..n).map(|k| ((g >> k) & 1) as u8).collect();
            let guess = TritString::new(guess, TritRole::UserDecoding).expect("valid");
            let c = control_correlation(&guess, &zeros).expect("aligned");
            // |U|·n is an integer
            (c.u.abs() * n as f64).round() as u128
        })
        .sum();
    Ok(ratio_to_f64(total, (1u128 << n) * n as u128))
}

/// What the compromised devices stored about one coincidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryEntry {
    pub round_index: u64,
    pub basis_a: NamedBasis,
    pub basis_b: NamedBasis,
    pub outcome_a: Outcome,
    pub outcome_b: Outcome,
    pub peak: Peak,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MemoryLog {
    pub entries: Vec<MemoryEntry>,
}

impl MemoryLog {
    /// Everything both measurement devices observed in a session.
    pub fn from_session(result: &SessionResult) -> Self {
        MemoryLog {
            entries: result
                .transcript
                .detections
                .iter()
                .map(|d| MemoryEntry {
                    round_index: d.event.round_index,
                    basis_a: d.basis_a,
                    basis_b: d.basis_b,
                    outcome_a: d.event.outcome_a,
                    outcome_b: d.event.outcome_b,
                    peak: d.event.peak,
                })
                .collect(),
        }
    }
}

/// Post-processing parameters the users exchanged openly.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicPostProcessing {
    pub key_length: usize,
    pub flip_party: Party,
    pub reconcile_params: ReconcileParams,
    pub parity_log: Vec<bool>,
    pub pa_seed: u64,
    pub ratio: f64,
}

impl PublicPostProcessing {
    pub fn from_session(result: &SessionResult, ratio: f64) -> Result<Self> {
        let keys = result.keys.as_ref().ok_or(AdversaryError::NoKey)?;
        Ok(PublicPostProcessing {
            key_length: keys.sifted_a.len(),
            flip_party: result.report.flip_party,
            reconcile_params: keys.reconcile_params,
            parity_log: keys.reconciliation.parity_log.clone(),
            pa_seed: keys.pa_seed,
            ratio,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttackScheme {
    /// Assumes every key round is kept, as when no mixed state is sent.
    Onefold,
    /// Knows some key rounds were dropped and guesses which.
    Twofold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub scheme: AttackScheme,
    pub given_decoding: bool,
    pub key_rounds: usize,
    pub key_length: usize,
    pub final_bits: usize,
    /// Agreement with the first user's final key.
    pub agreement: f64,
    /// Binomial standard error of `agreement` under chance.
    pub chance_sigma: f64,
}

/// Rebuilds a user's raw key from the memory log, replays the public
/// reconciliation and amplification, and compares with the real final key.
///
/// With `decoding` (aligned to the log) the attacker knows exactly which rounds
/// carried the mixed state.
pub fn memory_attack_reconstruct<R: Rng + ?Sized>(
    log: &MemoryLog,
    announcements: &[PublicAnnouncement],
    public: &PublicPostProcessing,
    scheme: AttackScheme,
    decoding: Option<&TritString>,
    true_final_key: &[bool],
    rng: &mut R,
) -> Result<AttackReport> {
    let key_rounds: Vec<usize> = announcements
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            a.role == RoundRole::Key
                && a.peak == Peak::Central
                && a.basis_a == NamedBasis::X
                && a.basis_b == NamedBasis::X
        })
        .map(|(k, _)| k)
        .collect();
    let l = public.key_length;
    let chosen: Vec<usize> = match (decoding, scheme) {
        (Some(d), _) => key_rounds
            .iter()
            .copied()
            .filter(|&k| d.trits()[k] != 2)
            .collect(),
        (None, AttackScheme::Onefold) => key_rounds.clone(),
        (None, AttackScheme::Twofold) => {
            let mut picked: Vec<usize> = sample(rng, key_rounds.len(), l.min(key_rounds.len()))
                .into_iter()
                .map(|i| key_rounds[i])
                .collect();
            picked.sort_unstable();
            picked
        }
    };
    // The user who does not flip keeps raw outcomes, so the log holds that
    // key verbatim; only the mixed-state omissions are unknown.
    let holder = match public.flip_party {
        Party::A => Party::B,
        Party::B => Party::A,
    };
    let mut raw: Vec<bool> = chosen
        .iter()
        .map(|&k| {
            let e = &log.entries[k];
            match holder {
                Party::A => e.outcome_a.bit(),
                Party::B => e.outcome_b.bit(),
            }
        })
        .collect();
    raw.resize(l, false);
    let corrected = match holder {
        Party::A => raw,
        Party::B => reconcile_with(
            &raw,
            &mut ReplayParity::new(&public.parity_log),
            &public.reconcile_params,
        ),
    };
    let guess = privacy_amplify(&corrected, public.ratio, PaSeed::Seeded(public.pa_seed))?;
    let m = true_final_key.len().min(guess.len());
    let agree = guess
        .iter()
        .zip(true_final_key)
        .filter(|(a, b)| a == b)
        .count();
    Ok(AttackReport {
        scheme,
        given_decoding: decoding.is_some(),
        key_rounds: key_rounds.len(),
        key_length: l,
        final_bits: m,
        agreement: if m == 0 { 0.0 } else { agree as f64 / m as f64 },
        chance_sigma: 0.5 / (m.max(1) as f64).sqrt(),
    })
}
