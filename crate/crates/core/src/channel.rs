//! Photon-pair emission, loss and coincidence detection.
//!
//! Losses are collapsed into one transmittance per arm. A pulse yields a true
//! pair coincidence with probability `μ·ηa·ηb` and, when enabled, an accidental
//! coincidence from two independent pairs with probability `μ²·ηa·ηb`.
//! Coincidences land in the central (phase basis) peak or in a side (time
//! basis) peak of the arrival-time histogram.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modulation::TritString;
use crate::quantum::{
    element_state, outcome_probabilities, ElementStateKind, MeasurementSetting, Outcome,
    OutcomeProbabilities, Party, Visibility,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
    #[error("basis schedule has {schedule} entries for {trits} trits")]
    ScheduleMismatch { schedule: usize, trits: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("malformed record line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Per-arm heralding efficiency of the reference setup.
pub const DEFAULT_ARM_TRANSMITTANCE: f64 = 0.016;
/// Pair probability per pulse giving a coincidence-to-accidental ratio of 50.
pub const DEFAULT_PAIR_PROBABILITY: f64 = 0.02;
pub const DEFAULT_CLOCK_RATE_HZ: f64 = 2.5e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    /// Mean pair number per pulse, μ.
    pub pair_probability: f64,
    pub transmittance_a: f64,
    pub transmittance_b: f64,
    pub clock_rate_hz: f64,
    pub accidentals: bool,
    /// Share of coincidences falling into the side (time-basis) peaks.
    pub side_peak_fraction: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            pair_probability: DEFAULT_PAIR_PROBABILITY,
            transmittance_a: DEFAULT_ARM_TRANSMITTANCE,
            transmittance_b: DEFAULT_ARM_TRANSMITTANCE,
            clock_rate_hz: DEFAULT_CLOCK_RATE_HZ,
            accidentals: true,
            side_peak_fraction: 0.5,
        }
    }
}

impl ChannelParams {
    /// Every pulse carries a pair and every pair is detected in the central peak.
    pub fn lossless() -> Self {
        ChannelParams {
            pair_probability: 1.0,
            transmittance_a: 1.0,
            transmittance_b: 1.0,
            clock_rate_hz: DEFAULT_CLOCK_RATE_HZ,
            accidentals: false,
            side_peak_fraction: 0.0,
        }
    }

    /// Lossless apart from a common per-pulse survival probability.
    pub fn with_survival(survival: f64) -> Self {
        ChannelParams {
            transmittance_a: survival,
            ..ChannelParams::lossless()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(ChannelError::InvalidParams(format!("{what} = {v}")))
        };
        if !(self.pair_probability > 0.0 && self.pair_probability <= 1.0) {
            return bad("pair_probability", self.pair_probability);
        }
        for (name, eta) in [
            ("transmittance_a", self.transmittance_a),
            ("transmittance_b", self.transmittance_b),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return bad(name, eta);
            }
        }
        if !(self.clock_rate_hz > 0.0 && self.clock_rate_hz.is_finite()) {
            return bad("clock_rate_hz", self.clock_rate_hz);
        }
        if !(0.0..=1.0).contains(&self.side_peak_fraction) {
            return bad("side_peak_fraction", self.side_peak_fraction);
        }
        if self.true_pair_probability() + self.accidental_probability() > 1.0 + 1e-12 {
            return Err(ChannelError::InvalidParams(
                "true and accidental probabilities exceed 1".into(),
            ));
        }
        Ok(())
    }

    pub fn heralding_product(&self) -> f64 {
        self.transmittance_a * self.transmittance_b
    }

    /// Per-pulse probability of a detected true pair, `μ·ηa·ηb`.
    pub fn true_pair_probability(&self) -> f64 {
        self.pair_probability * self.heralding_product()
    }

    /// Per-pulse probability of an accidental coincidence, `μ²·ηa·ηb`.
    pub fn accidental_probability(&self) -> f64 {
        if self.accidentals {
            self.pair_probability * self.pair_probability * self.heralding_product()
        } else {
            0.0
        }
    }

    pub fn expected_car(&self) -> f64 {
        self.true_pair_probability() / self.accidental_probability()
    }

    /// Total coincidence rate over all peaks.
    pub fn coincidence_rate_hz(&self) -> f64 {
        (self.true_pair_probability() + self.accidental_probability()) * self.clock_rate_hz
    }
}

/// Arrival-time histogram peak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Peak {
    /// Phase-basis detections.
    Central,
    /// Time-basis detections.
    Side,
}

impl Peak {
    pub fn tag(self) -> char {
        match self {
            Peak::Central => 'C',
            Peak::Side => 'S',
        }
    }
}

/// One user's local detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub round_index: u64,
    pub basis: MeasurementSetting,
    pub outcome: Outcome,
    pub peak: Peak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceEvent {
    pub round_index: u64,
    pub basis_a: MeasurementSetting,
    pub basis_b: MeasurementSetting,
    pub outcome_a: Outcome,
    pub outcome_b: Outcome,
    pub peak: Peak,
    pub true_pair: bool,
}

impl CoincidenceEvent {
    pub fn record(&self, party: Party) -> DetectionRecord {
        let (basis, outcome) = match party {
            Party::A => (self.basis_a, self.outcome_a),
            Party::B => (self.basis_b, self.outcome_b),
        };
        DetectionRecord {
            round_index: self.round_index,
            basis,
            outcome,
            peak: self.peak,
        }
    }
}

fn setting_key(s: MeasurementSetting) -> u64 {
    match s {
        MeasurementSetting::Equatorial(a) => a.to_bits(),
        MeasurementSetting::TimeBasis => u64::MAX,
    }
}

/// Memoized Born probabilities for a fixed visibility.
#[derive(Debug, Clone)]
pub struct BornTable {
    visibility: Visibility,
    cache: HashMap<(ElementStateKind, u64, u64), OutcomeProbabilities>,
}

impl BornTable {
    pub fn new(visibility: Visibility) -> Self {
        BornTable {
            visibility,
            cache: HashMap::new(),
        }
    }

    pub fn probabilities(
        &mut self,
        kind: ElementStateKind,
        a: MeasurementSetting,
        b: MeasurementSetting,
    ) -> OutcomeProbabilities {
        let v = self.visibility;
        *self
            .cache
            .entry((kind, setting_key(a), setting_key(b)))
            .or_insert_with(|| outcome_probabilities(&element_state(kind, v), a, b))
    }
}

/// Resolves a coincidence known to have happened into a peak and outcomes.
pub fn detect_event<R: Rng + ?Sized>(
    round_index: u64,
    kind: ElementStateKind,
    (a, b): (MeasurementSetting, MeasurementSetting),
    true_pair: bool,
    params: &ChannelParams,
    born: &mut BornTable,
    rng: &mut R,
) -> CoincidenceEvent {
    let peak = if params.side_peak_fraction > 0.0 && rng.gen::<f64>() < params.side_peak_fraction {
        Peak::Side
    } else {
        Peak::Central
    };
    let (outcome_a, outcome_b) = if true_pair {
        match peak {
            Peak::Central => born.probabilities(kind, a, b).sample(rng),
            Peak::Side => born
                .probabilities(kind, MeasurementSetting::TimeBasis, MeasurementSetting::TimeBasis)
                .sample(rng),
        }
    } else {
        OutcomeProbabilities::UNIFORM.sample(rng)
    };
    CoincidenceEvent {
        round_index,
        basis_a: a,
        basis_b: b,
        outcome_a,
        outcome_b,
        peak,
        true_pair,
    }
}

/// Simulates one pulse. Returns the coincidence it produced, if any.
pub fn transmit_round<R: Rng + ?Sized>(
    round_index: u64,
    kind: ElementStateKind,
    bases: (MeasurementSetting, MeasurementSetting),
    params: &ChannelParams,
    born: &mut BornTable,
    rng: &mut R,
) -> Option<CoincidenceEvent> {
    let q_true = params.true_pair_probability();
    let q_acc = params.accidental_probability();
    let u: f64 = rng.gen();
    let true_pair = if u < q_true {
        true
    } else if u < q_true + q_acc {
        false
    } else {
        return None;
    };
    Some(detect_event(round_index, kind, bases, true_pair, params, born, rng))
}

/// Runs [`transmit_round`] over a modulation string and per-round bases.
pub fn simulate_detection_stream<R: Rng + ?Sized>(
    trits: &TritString,
    schedule: &[(MeasurementSetting, MeasurementSetting)],
    v: Visibility,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<Vec<CoincidenceEvent>> {
    params.validate()?;
    if schedule.len() != trits.len() {
        return Err(ChannelError::ScheduleMismatch {
            schedule: schedule.len(),
            trits: trits.len(),
        });
    }
    let mut born = BornTable::new(v);
    let mut events = Vec::new();
    for (i, (&t, &bases)) in trits.trits().iter().zip(schedule).enumerate() {
        let kind = ElementStateKind::from_trit(t).expect("validated trit");
        if let Some(ev) = transmit_round(i as u64, kind, bases, params, &mut born, rng) {
            events.push(ev);
        }
    }
    Ok(events)
}

/// Rounds carrying a coincidence, drawn by geometric gaps between events.
///
/// Has the same distribution as testing every pulse, so very long runs stay
/// cheap. Yields `(round_index, true_pair)`.
pub struct EventClock {
    gaps: Geometric,
    q_event: f64,
    q_true: f64,
    next_round: u64,
    n_rounds: u64,
}

impl EventClock {
    pub fn new(params: &ChannelParams, n_rounds: u64) -> Result<Self> {
        params.validate()?;
        let q_true = params.true_pair_probability();
        let q_event = (q_true + params.accidental_probability()).min(1.0);
        let gaps = Geometric::new(q_event).map_err(|e| ChannelError::InvalidParams(e.to_string()))?;
        Ok(EventClock {
            gaps,
            q_event,
            q_true,
            next_round: 0,
            n_rounds,
        })
    }

    pub fn next_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<(u64, bool)> {
        let gap = self.gaps.sample(rng);
        let round = self.next_round.checked_add(gap).filter(|&r| r < self.n_rounds)?;
        self.next_round = round + 1;
        let true_pair = self.q_event == self.q_true || rng.gen::<f64>() * self.q_event < self.q_true;
        Some((round, true_pair))
    }
}

/// Sparse simulation of `n_rounds` identical pulses.
pub fn calibration_run<R: Rng + ?Sized>(
    n_rounds: u64,
    kind: ElementStateKind,
    bases: (MeasurementSetting, MeasurementSetting),
    v: Visibility,
    params: &ChannelParams,
    rng: &mut R,
) -> Result<Vec<CoincidenceEvent>> {
    let mut clock = EventClock::new(params, n_rounds)?;
    let mut born = BornTable::new(v);
    let mut events = Vec::new();
    while let Some((round, true_pair)) = clock.next_event(rng) {
        events.push(detect_event(round, kind, bases, true_pair, params, &mut born, rng));
    }
    Ok(events)
}

/// Coincidence-to-accidental ratio. Infinite when no accidental was seen.
pub fn car_estimate(events: &[CoincidenceEvent]) -> Result<f64> {
    if events.is_empty() {
        return Err(ChannelError::EmptySample);
    }
    let accidental = events.iter().filter(|e| !e.true_pair).count();
    let true_pairs = events.len() - accidental;
    if accidental == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(true_pairs as f64 / accidental as f64)
}

fn mrad(s: MeasurementSetting) -> String {
    match s.angle() {
        Some(a) => format!("{}", (a * 1000.0).round() as i64),
        None => "Z".to_string(),
    }
}

/// One line per user record: `round_index,user,basis_mrad,outcome,peak`.
pub fn format_records(events: &[CoincidenceEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 32);
    for ev in events {
        for party in [Party::A, Party::B] {
            let r = ev.record(party);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round_index,
                party.label(),
                mrad(r.basis),
                r.outcome.symbol(),
                r.peak.tag()
            );
        }
    }
    out
}

/// Parses the record format back; angles come back at milliradian precision.
pub fn parse_records(text: &str) -> Result<Vec<(Party, DetectionRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| ChannelError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let round_index = fields[0].parse().map_err(|_| err("bad round index"))?;
        let party = match fields[1] {
            "A" => Party::A,
            "B" => Party::B,
            _ => return Err(err("user must be A or B")),
        };
        let basis = match fields[2] {
            "Z" => MeasurementSetting::TimeBasis,
            m => MeasurementSetting::equatorial(
                m.parse::<i64>().map_err(|_| err("bad basis angle"))? as f64 / 1000.0,
            ),
        };
        let outcome = match fields[3] {
            "+" => Outcome::Plus,
            "-" => Outcome::Minus,
            _ => return Err(err("outcome must be + or -")),
        };
        let peak = match fields[4] {
            "C" => Peak::Central,
            "S" => Peak::Side,
            _ => return Err(err("peak must be C or S")),
        };
        out.push((
            party,
            DetectionRecord {
                round_index,
                basis,
                outcome,
                peak,
            },
        ));
    }
    Ok(out)
}
