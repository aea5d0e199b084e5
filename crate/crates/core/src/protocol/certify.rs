use serde::Serialize;

use super::config::NamedBasis;
use super::session::{SessionTranscript, SiftGroups};
use super::{ProtocolError, Result};
use crate::modulation::{entropy_of_control, ModulationError, TritString};
use crate::quantum::{chsh_sign, CorrelationEstimate, Outcome, OutcomeCounts, Party};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Certified,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyOptions {
    /// The user who XORs trit 1 into their outcome.
    pub flip_party: Party,
    pub abort_threshold_sigma: f64,
    pub min_rounds_per_combination: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            flip_party: Party::A,
            abort_threshold_sigma: 3.0,
            min_rounds_per_combination: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CombinationStats {
    pub basis_a: NamedBasis,
    pub basis_b: NamedBasis,
    pub sign: f64,
    pub estimate: CorrelationEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub combinations: Vec<CombinationStats>,
    pub s_mod: f64,
    pub stderr: f64,
    /// Sign of the measured CHSH value; certification itself uses |S|.
    pub sign: i8,
    /// Control correlation of the decoding string against the true trits,
    /// over included rounds whose true trit is not 2.
    pub u: Option<f64>,
    pub n: usize,
    pub b: Option<f64>,
    /// Share of included rounds that really carried the mixed state.
    pub p_effective: f64,
    pub included_rounds: usize,
    pub omitted_rounds: usize,
    pub threshold_sigma: f64,
    pub flip_party: Party,
    pub verdict: Verdict,
}

impl CertificationReport {
    /// `|S| − 2` in units of the standard error.
    pub fn margin_sigma(&self) -> f64 {
        (self.s_mod.abs() - 2.0) / self.stderr
    }
}

fn decode(outcome: Outcome, flip: bool) -> Outcome {
    Outcome::from_bit(outcome.bit() ^ flip)
}

/// CHSH value of the disclosed test outcomes after applying a decoding string.
///
/// Rounds where `decoding` holds 2 are omitted; where it holds 1 the flip
/// party's outcome is inverted. `decoding` is aligned with the transcript's
/// detections.
pub fn certify_chsh(
    transcript: &SessionTranscript,
    groups: &SiftGroups,
    decoding: &TritString,
    opts: &CertifyOptions,
) -> Result<CertificationReport> {
    if decoding.len() != transcript.detections.len() {
        return Err(ModulationError::Alignment {
            left: decoding.len(),
            right: transcript.detections.len(),
        }
        .into());
    }
    let truth = transcript.controller_trits();
    let bases_a = [NamedBasis::X, NamedBasis::Y];
    let bases_b = [NamedBasis::XPlusY, NamedBasis::XMinusY];
    let mut combinations = Vec::with_capacity(4);
    let (mut included, mut omitted, mut included_mixed) = (0usize, 0usize, 0usize);
    let (mut n, mut agree) = (0usize, 0usize);
    let mut s = 0.0;
    let mut var = 0.0;
    for (i, &basis_a) in bases_a.iter().enumerate() {
        for (j, &basis_b) in bases_b.iter().enumerate() {
            let mut counts = OutcomeCounts::default();
            for &k in &groups.chsh[i][j] {
                let d = decoding.trits()[k];
                if d == 2 {
                    omitted += 1;
                    continue;
                }
                included += 1;
                let t = truth.trits()[k];
                if t == 2 {
                    included_mixed += 1;
                } else {
                    n += 1;
                    agree += (t == d) as usize;
                }
                let det = &transcript.detections[k];
                let flip = d == 1;
                let oa = decode(det.event.outcome_a, flip && opts.flip_party == Party::A);
                let ob = decode(det.event.outcome_b, flip && opts.flip_party == Party::B);
                counts.record(oa, ob);
            }
            if counts.total() < opts.min_rounds_per_combination.max(1) {
                return Err(ProtocolError::Inconclusive {
                    combination: format!("{}/{}", basis_a.label(), basis_b.label()),
                    rounds: counts.total(),
                    required: opts.min_rounds_per_combination.max(1),
                });
            }
            let estimate = CorrelationEstimate::from_counts(counts)?;
            let sign = chsh_sign(i, j);
            s += sign * estimate.e;
            var += estimate.stderr * estimate.stderr;
            combinations.push(CombinationStats {
                basis_a,
                basis_b,
                sign,
                estimate,
            });
        }
    }
    let stderr = var.sqrt();
    let u = (n > 0).then(|| (2.0 * agree as f64 - n as f64) / n as f64);
    let b = u.map(|u| entropy_of_control(u).expect("U in range"));
    let verdict = if s.abs() - 2.0 > opts.abort_threshold_sigma * stderr {
        Verdict::Certified
    } else {
        Verdict::Abort
    };
    Ok(CertificationReport {
        combinations,
        s_mod: s,
        stderr,
        sign: if s < 0.0 { -1 } else { 1 },
        u,
        n,
        b,
        p_effective: if included > 0 {
            included_mixed as f64 / included as f64
        } else {
            0.0
        },
        included_rounds: included,
        omitted_rounds: omitted,
        threshold_sigma: opts.abort_threshold_sigma,
        flip_party: opts.flip_party,
        verdict,
    })
}
