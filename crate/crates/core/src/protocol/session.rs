use rand::Rng;
use serde::Serialize;

use super::amplify::{privacy_amplify, PaSeed};
use super::certify::{certify_chsh, CertificationReport, CertifyOptions, Verdict};
use super::config::{NamedBasis, SessionConfig};
use super::keys::{key_error_rate, sift_key, SiftedKey};
use super::reconcile::{reconcile, Reconciliation, ReconcileParams};
use super::{ProtocolError, Result};
use crate::channel::{detect_event, BornTable, CoincidenceEvent, DetectionRecord, EventClock, Peak};
use crate::modulation::{
    pair_rule_trits, target_p_trit_stream, AesCtr, KeyedBitSource, MappingRule, ModulationParams,
    SeedToken, TritRole, TritString,
};
use crate::quantum::{ElementStateKind, Outcome, Party};
use crate::seeding::{self, derived_rng, derived_seed};

/// Where the per-round trits come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModulationSource {
    Keystream {
        seed: SeedToken,
        params: ModulationParams,
    },
    /// A fixed pattern repeated for the whole session.
    Repeating(TritString),
}

impl ModulationSource {
    pub fn trit_stream(&self) -> Result<Box<dyn Iterator<Item = u8> + Send>> {
        Ok(match self {
            ModulationSource::Keystream { seed, params } => {
                let bits = AesCtr.stream(seed)?;
                match params.rule {
                    MappingRule::PaperPair => Box::new(pair_rule_trits(bits)),
                    MappingRule::TargetP => Box::new(target_p_trit_stream(bits, params)?),
                }
            }
            ModulationSource::Repeating(pattern) => {
                Box::new(pattern.trits().to_vec().into_iter().cycle())
            }
        })
    }

    /// Trits at strictly increasing round indices.
    pub fn select(&self, rounds: &[u64]) -> Result<TritString> {
        if rounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProtocolError::Config(
                "round indices must be strictly increasing".into(),
            ));
        }
        let trits = match self {
            ModulationSource::Repeating(pattern) => {
                let len = pattern.len() as u64;
                rounds
                    .iter()
                    .map(|&r| pattern.trits()[(r % len) as usize])
                    .collect()
            }
            ModulationSource::Keystream { .. } => {
                let mut stream = self.trit_stream()?;
                let mut next = 0u64;
                let mut out = Vec::with_capacity(rounds.len());
                for &r in rounds {
                    let t = stream
                        .nth((r - next) as usize)
                        .ok_or(ProtocolError::Exhausted { round: r, budget: next })?;
                    out.push(t);
                    next = r + 1;
                }
                out
            }
        };
        Ok(TritString::new(trits, TritRole::UserDecoding)?)
    }
}

/// Emits element states round by round, expanding the keystream lazily.
pub struct Controller {
    source: ModulationSource,
    budget: u64,
    stream: Box<dyn Iterator<Item = u8> + Send>,
    next_round: u64,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("budget", &self.budget)
            .field("next_round", &self.next_round)
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(source: ModulationSource, budget: u64) -> Result<Self> {
        let stream = source.trit_stream()?;
        Ok(Controller {
            source,
            budget,
            stream,
            next_round: 0,
        })
    }

    pub fn source(&self) -> &ModulationSource {
        &self.source
    }

    /// The state sent in `round`. Rounds must be requested in increasing order.
    pub fn emit(&mut self, round: u64) -> Result<ElementStateKind> {
        if round >= self.budget {
            return Err(ProtocolError::Exhausted {
                round,
                budget: self.budget,
            });
        }
        if round < self.next_round {
            return Err(ProtocolError::Config(format!(
                "round {round} already emitted"
            )));
        }
        let trit = self
            .stream
            .nth((round - self.next_round) as usize)
            .ok_or(ProtocolError::Exhausted {
                round,
                budget: self.budget,
            })?;
        self.next_round = round + 1;
        Ok(ElementStateKind::from_trit(trit)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub party: Party,
    pub seed: SeedToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RoundRole {
    Test,
    Key,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub event: CoincidenceEvent,
    pub role: RoundRole,
    pub basis_a: NamedBasis,
    pub basis_b: NamedBasis,
}

impl Detection {
    pub fn basis(&self, party: Party) -> NamedBasis {
        match party {
            Party::A => self.basis_a,
            Party::B => self.basis_b,
        }
    }

    pub fn outcome(&self, party: Party) -> Outcome {
        match party {
            Party::A => self.event.outcome_a,
            Party::B => self.event.outcome_b,
        }
    }
}

/// What is said over the classical channel about one surviving round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublicAnnouncement {
    pub round_index: u64,
    pub peak: Peak,
    pub role: RoundRole,
    pub basis_a: NamedBasis,
    pub basis_b: NamedBasis,
    /// Outcomes revealed for certification.
    pub disclosed: Option<(Outcome, Outcome)>,
}

#[derive(Debug, Clone)]
pub struct SessionTranscript {
    pub rounds: u64,
    pub detections: Vec<Detection>,
    pub announcements: Vec<PublicAnnouncement>,
    controller_trits: Vec<u8>,
}

impl SessionTranscript {
    pub fn new(rounds: u64, detections: Vec<Detection>, controller_trits: Vec<u8>) -> Self {
        assert_eq!(detections.len(), controller_trits.len());
        let announcements = detections
            .iter()
            .map(|d| PublicAnnouncement {
                round_index: d.event.round_index,
                peak: d.event.peak,
                role: d.role,
                basis_a: d.basis_a,
                basis_b: d.basis_b,
                disclosed: (d.role == RoundRole::Test && d.event.peak == Peak::Central)
                    .then_some((d.event.outcome_a, d.event.outcome_b)),
            })
            .collect();
        SessionTranscript {
            rounds,
            detections,
            announcements,
            controller_trits,
        }
    }

    /// The controller's private trits at the surviving rounds.
    pub fn controller_trits(&self) -> TritString {
        TritString::new(self.controller_trits.clone(), TritRole::Modulation)
            .expect("emitted trits are valid")
    }

    pub fn round_indices(&self) -> Vec<u64> {
        self.detections.iter().map(|d| d.event.round_index).collect()
    }

    pub fn records(&self, party: Party) -> Vec<DetectionRecord> {
        self.detections.iter().map(|d| d.event.record(party)).collect()
    }

    pub fn events(&self) -> Vec<CoincidenceEvent> {
        self.detections.iter().map(|d| d.event).collect()
    }
}

/// Detection indices grouped by usable basis combination.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiftGroups {
    /// `chsh[i][j]`: A's i-th and B's j-th CHSH setting.
    pub chsh: [[Vec<usize>; 2]; 2],
    pub key: Vec<usize>,
}

impl SiftGroups {
    pub fn chsh_total(&self) -> usize {
        self.chsh.iter().flatten().map(Vec::len).sum()
    }
}

/// Keeps central-peak rounds with a CHSH combination (test rounds) or X⊗X
/// (key rounds) and drops the rest.
pub fn basis_sift(transcript: &SessionTranscript) -> SiftGroups {
    let mut groups = SiftGroups::default();
    for (k, d) in transcript.detections.iter().enumerate() {
        if d.event.peak != Peak::Central {
            continue;
        }
        match d.role {
            RoundRole::Test => {
                if let (Some(i), Some(j)) = (
                    d.basis_a.chsh_index(Party::A),
                    d.basis_b.chsh_index(Party::B),
                ) {
                    groups.chsh[i][j].push(k);
                }
            }
            RoundRole::Key => {
                if d.basis_a == NamedBasis::X && d.basis_b == NamedBasis::X {
                    groups.key.push(k);
                }
            }
        }
    }
    groups
}

/// The modulation trits at the rounds where detections happened.
pub fn derive_decoding_string(
    round_indices: &[u64],
    knowledge: Option<&ModulationSource>,
) -> Result<TritString> {
    knowledge.ok_or(ProtocolError::Denied)?.select(round_indices)
}

#[derive(Debug)]
pub struct Session {
    pub config: SessionConfig,
    pub controller: Controller,
    pub users: [User; 2],
}

/// Checks the configuration and that both users present the controller's token.
pub fn session_setup(config: SessionConfig) -> Result<Session> {
    config.validate()?;
    let users = [Party::A, Party::B].map(|party| User {
        party,
        seed: config.user_seed(party).clone(),
    });
    for u in &users {
        if u.seed.token_id() != config.seed.token_id() {
            return Err(ProtocolError::Setup(format!(
                "user {} presents token '{}', controller expects '{}'",
                u.party.label(),
                u.seed.token_id(),
                config.seed.token_id()
            )));
        }
    }
    let source = match config.pattern()? {
        Some(p) => ModulationSource::Repeating(p),
        None => ModulationSource::Keystream {
            seed: config.seed.clone(),
            params: config.modulation,
        },
    };
    let controller = Controller::new(source, config.rounds)?;
    Ok(Session {
        config,
        controller,
        users,
    })
}

impl Session {
    pub fn user(&self, party: Party) -> &User {
        &self.users[party as usize]
    }

    /// What the user can expand with the seed it holds.
    pub fn user_knowledge(&self, party: Party) -> Result<ModulationSource> {
        Ok(match self.config.pattern()? {
            Some(p) => ModulationSource::Repeating(p),
            None => ModulationSource::Keystream {
                seed: self.user(party).seed.clone(),
                params: self.config.modulation,
            },
        })
    }

    /// Distribution and measurement over every round of the session.
    pub fn distribute(&mut self) -> Result<SessionTranscript> {
        let c = &self.config;
        let mut channel_rng = derived_rng(c.master_seed, seeding::CHANNEL);
        let mut role_rng = derived_rng(c.master_seed, seeding::ROLES);
        let mut basis_rng_a = derived_rng(c.master_seed, seeding::BASIS_A);
        let mut basis_rng_b = derived_rng(c.master_seed, seeding::BASIS_B);
        let mut clock = EventClock::new(&c.channel, c.rounds)?;
        let mut born = BornTable::new(c.visibility);
        let mut detections = Vec::new();
        let mut trits = Vec::new();
        while let Some((round, true_pair)) = clock.next_event(&mut channel_rng) {
            let kind = self.controller.emit(round)?;
            let role = if role_rng.gen::<f64>() < c.test_fraction {
                RoundRole::Test
            } else {
                RoundRole::Key
            };
            let (basis_a, basis_b) = match role {
                RoundRole::Test => (
                    c.basis_menu_a.sample(&mut basis_rng_a),
                    c.basis_menu_b.sample(&mut basis_rng_b),
                ),
                RoundRole::Key => (NamedBasis::X, NamedBasis::X),
            };
            let event = detect_event(
                round,
                kind,
                (basis_a.setting(), basis_b.setting()),
                true_pair,
                &c.channel,
                &mut born,
                &mut channel_rng,
            );
            detections.push(Detection {
                event,
                role,
                basis_a,
                basis_b,
            });
            trits.push(kind.trit());
        }
        Ok(SessionTranscript::new(c.rounds, detections, trits))
    }

    pub fn decoding_string(&self, party: Party, transcript: &SessionTranscript) -> Result<TritString> {
        derive_decoding_string(&transcript.round_indices(), Some(&self.user_knowledge(party)?))
    }

    pub fn certify_options(&self) -> CertifyOptions {
        CertifyOptions {
            flip_party: self.config.flip_party,
            abort_threshold_sigma: self.config.abort_threshold_sigma,
            min_rounds_per_combination: self.config.min_rounds_per_combination,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeyMaterial {
    pub sifted_a: SiftedKey,
    pub sifted_b: SiftedKey,
    /// Fraction of sifted bits on which the users disagree.
    pub raw_error_rate: f64,
    pub reconcile_params: ReconcileParams,
    pub reconciliation: Reconciliation,
    pub pa_seed: u64,
    pub final_a: Vec<bool>,
    pub final_b: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub transcript: SessionTranscript,
    pub groups: SiftGroups,
    pub report: CertificationReport,
    pub keys: Option<KeyMaterial>,
}

/// All six steps: setup, distribution, measurement, sifting, certification
/// and key extraction (the latter only when certified).
pub fn run_session(config: &SessionConfig) -> Result<SessionResult> {
    let mut session = session_setup(config.clone())?;
    let transcript = session.distribute()?;
    let groups = basis_sift(&transcript);
    let certifier = config.flip_party;
    let decoding = session.decoding_string(certifier, &transcript)?;
    let report = certify_chsh(&transcript, &groups, &decoding, &session.certify_options())?;
    let keys = if report.verdict == Verdict::Certified {
        let other = match certifier {
            Party::A => Party::B,
            Party::B => Party::A,
        };
        let other_decoding = session.decoding_string(other, &transcript)?;
        let (dec_a, dec_b) = match certifier {
            Party::A => (&decoding, &other_decoding),
            Party::B => (&other_decoding, &decoding),
        };
        let (sifted_a, sifted_b) = sift_key(&transcript, &groups, dec_a, dec_b, &report)?;
        if sifted_a.round_indices != sifted_b.round_indices {
            return Err(ProtocolError::KeyMisaligned);
        }
        if sifted_a.bits.is_empty() {
            return Err(ProtocolError::EmptyKey);
        }
        let raw_error_rate = key_error_rate(&sifted_a.bits, &sifted_b.bits)?;
        let reconcile_params = ReconcileParams {
            permutation_seed: derived_seed(config.master_seed, seeding::RECONCILE),
            ..ReconcileParams::default()
        };
        let reconciliation = reconcile(&sifted_a.bits, &sifted_b.bits, None, &reconcile_params)?;
        let pa_seed = derived_seed(config.master_seed, seeding::AMPLIFY);
        let final_a = privacy_amplify(
            &reconciliation.key_a,
            config.amplification_ratio,
            PaSeed::Seeded(pa_seed),
        )?;
        let final_b = privacy_amplify(
            &reconciliation.key_b,
            config.amplification_ratio,
            PaSeed::Seeded(pa_seed),
        )?;
        Some(KeyMaterial {
            sifted_a,
            sifted_b,
            raw_error_rate,
            reconcile_params,
            reconciliation,
            pa_seed,
            final_a,
            final_b,
        })
    } else {
        None
    };
    Ok(SessionResult {
        transcript,
        groups,
        report,
        keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;

    fn lossless(seed: u64, rounds: u64) -> SessionConfig {
        SessionConfig::lossless(seed, rounds)
    }

    #[test]
    fn trits_map_to_element_states() {
        let mut c = Controller::new(ModulationSource::Repeating("012".parse().unwrap()), 10).unwrap();
        assert_eq!(c.emit(0).unwrap(), ElementStateKind::PhiPlus);
        assert_eq!(c.emit(1).unwrap(), ElementStateKind::PhiMinus);
        assert_eq!(c.emit(5).unwrap(), ElementStateKind::MixedR);
        assert!(matches!(c.emit(4), Err(ProtocolError::Config(_))));
        assert_eq!(
            c.emit(10),
            Err(ProtocolError::Exhausted { round: 10, budget: 10 })
        );
    }

    #[test]
    fn controller_has_budget_for_a_million_rounds() {
        let source = ModulationSource::Keystream {
            seed: SeedToken::from_u64("t", 3),
            params: ModulationParams::paper_pair(),
        };
        let mut c = Controller::new(source.clone(), 1_000_000).unwrap();
        c.emit(999_999).unwrap();
        let direct = crate::modulation::modulation_string(
            &SeedToken::from_u64("t", 3),
            &ModulationParams::paper_pair(),
            1000,
        )
        .unwrap();
        let picked = source.select(&[0, 17, 999]).unwrap();
        assert_eq!(picked.trits(), &[direct.trits()[0], direct.trits()[17], direct.trits()[999]]);
    }

    #[test]
    fn setup_checks_tokens() {
        let mut config = lossless(1, 100);
        assert!(session_setup(config.clone()).is_ok());
        config.user_b_seed = Some(SeedToken::from_u64("intruder", 1));
        assert!(matches!(session_setup(config), Err(ProtocolError::Setup(_))));
    }

    #[test]
    fn decoding_string_is_a_subsequence() {
        let source = ModulationSource::Repeating("012".parse().unwrap());
        let t = derive_decoding_string(&[0, 2, 4], Some(&source)).unwrap();
        assert_eq!(t.to_string(), "021");
        assert_eq!(t.role(), TritRole::UserDecoding);
        assert_eq!(derive_decoding_string(&[0], None), Err(ProtocolError::Denied));
        assert!(source.select(&[3, 3]).is_err());
    }

    #[test]
    fn full_survival_gives_the_whole_string() {
        let mut session = session_setup(lossless(4, 3000)).unwrap();
        let transcript = session.distribute().unwrap();
        assert_eq!(transcript.detections.len(), 3000);
        let t_d = session.decoding_string(Party::A, &transcript).unwrap();
        let full = crate::modulation::modulation_string(
            &session.config.seed,
            &session.config.modulation,
            3000,
        )
        .unwrap();
        assert_eq!(t_d.trits(), full.trits());
        assert_eq!(transcript.controller_trits().trits(), full.trits());
    }

    #[test]
    fn random_survival_length() {
        let mut config = lossless(5, 500_000);
        config.channel = ChannelParams {
            accidentals: false,
            ..ChannelParams::with_survival(0.01)
        };
        let mut session = session_setup(config).unwrap();
        let transcript = session.distribute().unwrap();
        let n = transcript.detections.len() as f64;
        let sigma = (500_000.0 * 0.01 * 0.99f64).sqrt();
        assert!((n - 5000.0).abs() < 5.0 * sigma);
        let idx = transcript.round_indices();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let t_d = session.decoding_string(Party::B, &transcript).unwrap();
        assert_eq!(t_d.trits(), transcript.controller_trits().trits());
    }

    #[test]
    fn sift_groups() {
        let mut config = lossless(6, 40_000);
        config.test_fraction = 0.5;
        let mut session = session_setup(config).unwrap();
        let t = session.distribute().unwrap();
        let g = basis_sift(&t);
        let test = g.chsh_total() as f64;
        for cell in g.chsh.iter().flatten() {
            let f = cell.len() as f64 / test;
            assert!((f - 0.25).abs() < 5.0 * (0.1875 / test).sqrt());
        }
        assert_eq!(g.chsh_total() + g.key.len(), 40_000);
        assert_eq!(basis_sift(&SessionTranscript::new(0, vec![], vec![])), SiftGroups::default());

        // a menu that only offers X sends every test round out of the CHSH set
        let mut config = lossless(6, 1000);
        config.basis_menu_b = super::super::BasisMenu::uniform(&[NamedBasis::X]);
        let mut session = session_setup(config).unwrap();
        let g = basis_sift(&session.distribute().unwrap());
        assert_eq!(g.chsh_total(), 0);
    }

    #[test]
    fn announcements_never_carry_controller_trits() {
        let mut session = session_setup(lossless(7, 500)).unwrap();
        let t = session.distribute().unwrap();
        let json = serde_json::to_string(&t.announcements).unwrap();
        assert!(!json.contains("trit"));
        assert!(!json.to_lowercase().contains("phi"));
        assert!(!json.contains("Mixed"));
        for (a, d) in t.announcements.iter().zip(&t.detections) {
            if let Some((oa, ob)) = a.disclosed {
                assert_eq!(a.round_index, d.event.round_index);
                assert_eq!((oa, ob), (d.event.outcome_a, d.event.outcome_b));
                assert_eq!(d.role, RoundRole::Test);
            }
        }
    }

    #[test]
    fn honest_sessions_end_with_identical_keys() {
        for (k, p) in [0.0, 1.0 / 7.0, 0.2, 0.5].into_iter().enumerate() {
            let config = SessionConfig {
                modulation: ModulationParams::target_p(p).unwrap(),
                ..lossless(40 + k as u64, 20_000)
            };
            let r = run_session(&config).unwrap();
            assert_eq!(r.report.verdict, Verdict::Certified, "p={p}");
            let keys = r.keys.unwrap();
            assert_eq!(keys.raw_error_rate, 0.0);
            assert_eq!(keys.final_a, keys.final_b);
            assert_eq!(keys.final_a.len(), keys.sifted_a.len() / 2);
        }
    }

    #[test]
    fn mixed_rounds_never_reach_the_key() {
        let config = SessionConfig {
            modulation: ModulationParams::target_p(0.2).unwrap(),
            ..lossless(50, 40_000)
        };
        let r = run_session(&config).unwrap();
        let keys = r.keys.unwrap();
        let truth = r.transcript.controller_trits();
        let by_round: std::collections::HashMap<u64, u8> = r
            .transcript
            .round_indices()
            .into_iter()
            .zip(truth.trits().iter().copied())
            .collect();
        for key in [&keys.sifted_a, &keys.sifted_b] {
            assert!(key.round_indices.iter().all(|r| by_round[r] != 2));
        }
        let n = r.groups.key.len() as f64;
        let len = keys.sifted_a.len() as f64;
        assert!((len - 0.8 * n).abs() < 5.0 * (n * 0.16).sqrt());
    }

    #[test]
    fn visibility_sets_the_key_error_rate() {
        let config = SessionConfig {
            visibility: crate::quantum::Visibility::new(0.961).unwrap(),
            ..lossless(51, 100_000)
        };
        let keys = run_session(&config).unwrap().keys.unwrap();
        let q = 0.0195;
        let n = keys.sifted_a.len() as f64;
        assert!((keys.raw_error_rate - q).abs() < 5.0 * (q * (1.0 - q) / n).sqrt());
        assert_eq!(keys.final_a, keys.final_b);
        assert!(keys.reconciliation.corrections > 0);
    }

    #[test]
    fn uncertified_sessions_yield_no_key() {
        let mut config = lossless(52, 20_000);
        config.user_a_seed = Some(SeedToken::from_u64(config.seed.token_id(), 999));
        let r = run_session(&config).unwrap();
        assert_eq!(r.report.verdict, Verdict::Abort);
        assert!(r.keys.is_none());
        let d = derive_decoding_string(&r.transcript.round_indices(), Some(&ModulationSource::Keystream {
            seed: config.seed.clone(),
            params: config.modulation,
        }))
        .unwrap();
        assert_eq!(
            sift_key(&r.transcript, &r.groups, &d, &d, &r.report),
            Err(ProtocolError::Uncertified)
        );
    }

    #[test]
    fn sessions_are_deterministic() {
        let run = |seed| {
            let mut s = session_setup(lossless(seed, 2000)).unwrap();
            s.distribute().unwrap().events()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]
        #[test]
        fn sifted_keys_hold_no_mixed_rounds(seed in 0u64..1_000_000, p in 0.0f64..0.6) {
            let config = SessionConfig {
                modulation: ModulationParams::target_p(p).unwrap(),
                ..lossless(seed, 5_000)
            };
            let r = run_session(&config).unwrap();
            let keys = r.keys.unwrap();
            let truth = r.transcript.controller_trits();
            let rounds = r.transcript.round_indices();
            for key in [&keys.sifted_a, &keys.sifted_b] {
                for round in &key.round_indices {
                    let k = rounds.binary_search(round).unwrap();
                    proptest::prop_assert_ne!(truth.trits()[k], 2);
                }
            }
            proptest::prop_assert_eq!(&keys.final_a, &keys.final_b);
        }
    }
}
