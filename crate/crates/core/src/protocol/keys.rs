use serde::Serialize;

use super::certify::{CertificationReport, Verdict};
use super::session::{SessionTranscript, SiftGroups};
use super::{ProtocolError, Result};
use crate::modulation::{ModulationError, TritString};
use crate::quantum::Party;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SiftedKey {
    pub bits: Vec<bool>,
    pub round_indices: Vec<u64>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

fn user_key(
    transcript: &SessionTranscript,
    groups: &SiftGroups,
    party: Party,
    decoding: &TritString,
    flip_party: Party,
    invert: bool,
) -> Result<SiftedKey> {
    if decoding.len() != transcript.detections.len() {
        return Err(ModulationError::Alignment {
            left: decoding.len(),
            right: transcript.detections.len(),
        }
        .into());
    }
    let mut key = SiftedKey::default();
    for &k in &groups.key {
        let d = decoding.trits()[k];
        if d == 2 {
            continue;
        }
        let det = &transcript.detections[k];
        let mut bit = det.outcome(party).bit();
        if party == flip_party {
            bit ^= (d == 1) ^ invert;
        }
        key.bits.push(bit);
        key.round_indices.push(det.event.round_index);
    }
    Ok(key)
}

/// Raw keys from the X⊗X key rounds, each user using their own decoding string.
///
/// Trit-2 rounds are dropped, trit-1 rounds are flipped at the report's flip
/// party, and a negative certified sign inverts that party's bits as well.
pub fn sift_key(
    transcript: &SessionTranscript,
    groups: &SiftGroups,
    decoding_a: &TritString,
    decoding_b: &TritString,
    report: &CertificationReport,
) -> Result<(SiftedKey, SiftedKey)> {
    if report.verdict != Verdict::Certified {
        return Err(ProtocolError::Uncertified);
    }
    let flip_party = report.flip_party;
    let invert = report.sign < 0;
    Ok((
        user_key(transcript, groups, Party::A, decoding_a, flip_party, invert)?,
        user_key(transcript, groups, Party::B, decoding_b, flip_party, invert)?,
    ))
}

/// Fraction of positions where two equally long keys differ.
pub fn key_error_rate(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ProtocolError::KeyMisaligned);
    }
    if a.is_empty() {
        return Err(ProtocolError::EmptyKey);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}
