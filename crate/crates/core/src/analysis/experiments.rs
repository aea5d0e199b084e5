use std::f64::consts::SQRT_2;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AnalysisError, Experiment, Result, Table};
use crate::adversary::{
    blind_guess_expected_u, fold_confidences, memory_attack_reconstruct, pattern_accuracy,
    recover_repeated_pattern, tap_infer_signs, tap_session, AttackScheme, MemoryLog, PatternSearch,
    PublicPostProcessing,
};
use crate::channel::{format_records, ChannelParams};
use crate::modulation::{
    control_from_entropy, expand_stream, pair_rule_trits, predicted_s_mod, target_p_trit_stream,
    trits_to_bits_paper_rule, ModulationParams, SeedToken, TritRole, TritString,
};
use crate::protocol::{
    basis_sift, certify_chsh, run_session, session_setup, CertificationReport, ModulationSource,
    SessionConfig, SessionResult, Verdict,
};
use crate::quantum::{fringe_curve, Visibility};
use crate::seeding::{derived_rng, derived_seed, CELLS, DECODING};

/// Share of rounds used for testing in experiments that need no key.
const EXPERIMENT_TEST_FRACTION: f64 = 0.99;

fn domain(msg: String) -> AnalysisError {
    AnalysisError::Domain(msg)
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

/// Test rounds needed for `stderr(S) ≤ target` in the worst case.
///
/// Each of the four correlations sees a quarter of the rounds and has
/// variance at most 1 per round, so `stderr(S)² ≤ 4 · 4/n`.
pub fn surface_cell_budget(target_stderr: f64) -> Result<u64> {
    if !(target_stderr > 0.0 && target_stderr.is_finite()) {
        return Err(domain(format!("target stderr {target_stderr} must be positive")));
    }
    Ok((16.0 / (target_stderr * target_stderr)).ceil() as u64)
}

/// A lossless, test-heavy session sized so at least `test_rounds` CHSH rounds survive.
pub fn chsh_session_config(seed: u64, test_rounds: u64, v: Visibility) -> SessionConfig {
    let n = test_rounds as f64;
    let rounds = ((n + 6.0 * n.sqrt() + 100.0) / EXPERIMENT_TEST_FRACTION).ceil() as u64;
    SessionConfig {
        visibility: v,
        test_fraction: EXPERIMENT_TEST_FRACTION,
        ..SessionConfig::lossless(seed, rounds)
    }
}

/// A binary decoding string that matches the non-2 trits of `truth` at
/// `positions` with control correlation exactly as close to `u` as the count allows.
///
/// Every 2 of `truth` is replaced by a random bit, so nothing is omitted.
pub fn decoding_with_control<R: Rng + ?Sized>(
    truth: &TritString,
    positions: &[usize],
    u: f64,
    rng: &mut R,
) -> Result<TritString> {
    if !(-1.0..=1.0).contains(&u) {
        return Err(domain(format!("control correlation {u} outside [-1, 1]")));
    }
    let mut trits = truth.trits().to_vec();
    let eligible: Vec<usize> = positions.iter().copied().filter(|&i| trits[i] != 2).collect();
    let flips = ((1.0 - u) / 2.0 * eligible.len() as f64).round() as usize;
    for k in sample(rng, eligible.len(), flips) {
        trits[eligible[k]] ^= 1;
    }
    for t in trits.iter_mut().filter(|t| **t == 2) {
        *t = rng.gen::<bool>() as u8;
    }
    Ok(TritString::new(trits, TritRole::UserDecoding)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSpec {
    pub u: f64,
    pub p: f64,
    pub visibility: Visibility,
    pub test_rounds: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub spec: CellSpec,
    /// `2√2 · V · (1 − p) · U` at the nominal U and p.
    pub s_analytic: f64,
    pub report: CertificationReport,
}

/// One protocol session at a keystream with mixed-state share `p`, certified
/// with a decoding string built to reach control correlation `u`.
pub fn simulate_cell(spec: &CellSpec) -> Result<CellResult> {
    let config = SessionConfig {
        modulation: ModulationParams::target_p(spec.p)?,
        ..chsh_session_config(spec.seed, spec.test_rounds, spec.visibility)
    };
    let mut session = session_setup(config)?;
    let transcript = session.distribute()?;
    let groups = basis_sift(&transcript);
    let positions: Vec<usize> = groups.chsh.iter().flatten().flatten().copied().collect();
    let mut rng = derived_rng(spec.seed, DECODING);
    let decoding = decoding_with_control(&transcript.controller_trits(), &positions, spec.u, &mut rng)?;
    let report = certify_chsh(&transcript, &groups, &decoding, &session.certify_options())?;
    Ok(CellResult {
        spec: *spec,
        s_analytic: spec.visibility.value() * predicted_s_mod(spec.u, spec.p)?,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceGrid {
    pub b_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub visibility: Visibility,
    pub test_rounds_per_cell: u64,
}

impl Default for SurfaceGrid {
    fn default() -> Self {
        SurfaceGrid {
            b_values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            p_values: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            visibility: Visibility::PERFECT,
            test_rounds_per_cell: surface_cell_budget(0.02).expect("positive target"),
        }
    }
}

impl SurfaceGrid {
    pub fn validate(&self) -> Result<()> {
        if self.b_values.len() < 2 || self.p_values.len() < 2 {
            return Err(domain("surface grid needs at least 2 values per axis".into()));
        }
        if let Some(b) = self.b_values.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(domain(format!("entropy {b} outside [0, 1]")));
        }
        if let Some(p) = self.p_values.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(domain(format!("mixed-state share {p} outside [0, 1)")));
        }
        if self.test_rounds_per_cell == 0 {
            return Err(domain("test rounds per cell must be positive".into()));
        }
        Ok(())
    }
}

/// Runs cells in parallel; results keep the order of `specs`.
pub fn simulate_cells(specs: &[CellSpec]) -> Result<Vec<CellResult>> {
    specs.par_iter().map(simulate_cell).collect()
}

pub const SURFACE_COLUMNS: [&str; 9] = [
    "b",
    "p",
    "u",
    "s_analytic",
    "s_simulated",
    "stderr",
    "u_measured",
    "p_effective",
    "test_rounds",
];

/// S_mod over an entropy × mixed-state grid, analytic next to simulated.
pub fn sweep_smod_surface(grid: &SurfaceGrid, master_seed: u64) -> Result<Table> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &b in &grid.b_values {
        let u = control_from_entropy(b)?;
        for &p in &grid.p_values {
            cells.push((b, CellSpec {
                u,
                p,
                visibility: grid.visibility,
                test_rounds: grid.test_rounds_per_cell,
                seed: derived_seed(master_seed, CELLS + cells.len() as u64),
            }));
        }
    }
    let specs: Vec<CellSpec> = cells.iter().map(|c| c.1).collect();
    let results = simulate_cells(&specs)?;
    let mut table = Table::new(Experiment::SmodSurface, master_seed, SURFACE_COLUMNS.to_vec());
    table.param("grid", grid);
    for ((b, spec), r) in cells.iter().zip(results) {
        table.push(vec![
            json!(b),
            json!(spec.p),
            json!(spec.u),
            json!(r.s_analytic),
            json!(r.report.s_mod),
            json!(r.report.stderr),
            opt(r.report.u),
            json!(r.report.p_effective),
            json!(r.report.included_rounds),
        ]);
    }
    Ok(table)
}

/// A repeated modulation pattern with control bias `bias` towards trit 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    pub sweep: String,
    pub bias: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasExperiment {
    pub configs: Vec<BiasConfig>,
    pub pattern_length: usize,
    pub visibility: Visibility,
    pub test_rounds: u64,
}

impl Default for BiasExperiment {
    fn default() -> Self {
        let by_bias = [1.0, 0.9, 0.8, 0.7, 0.6, 0.4, 0.2, 0.0].map(|bias| BiasConfig {
            sweep: "s_vs_b".into(),
            bias,
            p: 1.0 / 7.0,
        });
        let by_p = [0.0, 1.0 / 7.0, 0.2, 0.3, 0.4, 0.5].map(|p| BiasConfig {
            sweep: "s_vs_p".into(),
            bias: 0.8,
            p,
        });
        BiasExperiment {
            configs: by_bias.into_iter().chain(by_p).collect(),
            pattern_length: 5000,
            visibility: Visibility::new(0.961).expect("valid visibility"),
            test_rounds: 40_000,
        }
    }
}

/// `len` trits with `round(p·len)` 2s and a `(1 + bias)/2` share of 0s among
/// the rest, shuffled.
pub fn biased_pattern<R: Rng + ?Sized>(len: usize, bias: f64, p: f64, rng: &mut R) -> Result<TritString> {
    if len == 0 {
        return Err(domain("pattern length must be positive".into()));
    }
    if !(-1.0..=1.0).contains(&bias) {
        return Err(domain(format!("bias {bias} outside [-1, 1]")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(domain(format!("mixed-state share {p} outside [0, 1)")));
    }
    let twos = (p * len as f64).round() as usize;
    let rest = len - twos;
    let zeros = ((1.0 + bias) / 2.0 * rest as f64).round() as usize;
    let mut trits = vec![2u8; twos];
    trits.extend(std::iter::repeat_n(0, zeros));
    trits.extend(std::iter::repeat_n(1, rest - zeros));
    trits.shuffle(rng);
    Ok(TritString::new(trits, TritRole::Modulation)?)
}

pub const BIAS_COLUMNS: [&str; 10] = [
    "sweep",
    "bias",
    "p_target",
    "u",
    "b",
    "p_effective",
    "s_measured",
    "stderr",
    "s_theory",
    "test_rounds",
];

/// Sessions driven by biased repeated patterns, decoded with an all-zero
/// string so that U comes from the pattern alone.
pub fn experiment_biased_modulation(exp: &BiasExperiment, master_seed: u64) -> Result<Table> {
    if exp.configs.is_empty() {
        return Err(domain("no modulation configurations".into()));
    }
    let reports: Vec<CertificationReport> = exp
        .configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = derived_seed(master_seed, CELLS + i as u64);
            let pattern = biased_pattern(exp.pattern_length, c.bias, c.p, &mut derived_rng(seed, DECODING))?;
            let config = SessionConfig {
                modulation_pattern: Some(pattern.to_string()),
                ..chsh_session_config(seed, exp.test_rounds, exp.visibility)
            };
            let mut session = session_setup(config)?;
            let transcript = session.distribute()?;
            let groups = basis_sift(&transcript);
            let plain = TritString::new(vec![0; transcript.detections.len()], TritRole::UserDecoding)?;
            Ok(certify_chsh(&transcript, &groups, &plain, &session.certify_options())?)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(Experiment::BiasedModulation, master_seed, BIAS_COLUMNS.to_vec());
    table.param("experiment", exp);
    let v = exp.visibility.value();
    for (c, r) in exp.configs.iter().zip(reports) {
        let theory = r.u.map(|u| 2.0 * SQRT_2 * v * (1.0 - r.p_effective) * u);
        table.push(vec![
            json!(c.sweep),
            json!(c.bias),
            json!(c.p),
            opt(r.u),
            opt(r.b),
            json!(r.p_effective),
            json!(r.s_mod),
            json!(r.stderr),
            opt(theory),
            json!(r.included_rounds),
        ]);
    }
    Ok(table)
}

pub const THRESHOLD_U: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Expected |U| of a blind guess for `N ∈ [0, n_max]`, flagged against 1/√2.
pub fn curve_blind_bound(n_max: u32, master_seed: u64) -> Result<Table> {
    if n_max < 1 {
        return Err(domain("n_max must be at least 1".into()));
    }
    let mut table = Table::new(
        Experiment::BlindBound,
        master_seed,
        vec!["n", "expected_u", "threshold", "above_threshold"],
    );
    table.param("n_max", n_max);
    for n in 0..=n_max {
        let u = blind_guess_expected_u(n)?;
        table.push(vec![json!(n), json!(u), json!(THRESHOLD_U), json!(u > THRESHOLD_U)]);
    }
    Ok(table)
}

/// Two-port interference fringes against the interferometer phase.
pub fn fringe_scan(v: Visibility, offset: f64, points: usize, master_seed: u64) -> Result<Table> {
    if points < 8 {
        return Err(domain(format!("fringe scan needs at least 8 points, got {points}")));
    }
    let mut table = Table::new(
        Experiment::Fringes,
        master_seed,
        vec!["phase", "p_port1", "p_port2", "sum"],
    );
    table.param("visibility", v).param("offset", offset).param("points", points);
    for f in fringe_curve(v, offset, points)? {
        table.push(vec![
            json!(f.phase),
            json!(f.port_plus),
            json!(f.port_minus),
            json!(f.port_plus + f.port_minus),
        ]);
    }
    Ok(table)
}

pub const SESSION_COLUMNS: [&str; 17] = [
    "verdict",
    "s_mod",
    "stderr",
    "margin_sigma",
    "sign",
    "u",
    "b",
    "p_effective",
    "n",
    "included_rounds",
    "omitted_rounds",
    "detections",
    "sifted_bits",
    "raw_error_rate",
    "disclosed",
    "final_bits",
    "keys_match",
];

#[derive(Debug, Clone)]
pub struct FullSessionRun {
    pub result: SessionResult,
    pub table: Table,
}

impl FullSessionRun {
    pub fn verdict(&self) -> Verdict {
        self.result.report.verdict
    }

    /// One line per coincidence: `round,party,basis,outcome,peak`.
    pub fn transcript_dump(&self) -> String {
        format_records(&self.result.transcript.events())
    }
}

/// All protocol steps, summarised in a one-row table.
pub fn run_full_session(config: &SessionConfig) -> Result<FullSessionRun> {
    let result = run_session(config)?;
    let r = &result.report;
    let keys = result.keys.as_ref();
    let mut table = Table::new(Experiment::FullSession, config.master_seed, SESSION_COLUMNS.to_vec());
    table.param("config", config);
    table.push(vec![
        json!(format!("{:?}", r.verdict)),
        json!(r.s_mod),
        json!(r.stderr),
        json!(r.margin_sigma()),
        json!(r.sign),
        opt(r.u),
        opt(r.b),
        json!(r.p_effective),
        json!(r.n),
        json!(r.included_rounds),
        json!(r.omitted_rounds),
        json!(result.transcript.detections.len()),
        keys.map_or(Value::Null, |k| json!(k.sifted_a.len())),
        opt(keys.map(|k| k.raw_error_rate)),
        keys.map_or(Value::Null, |k| json!(k.reconciliation.disclosed)),
        keys.map_or(Value::Null, |k| json!(k.final_a.len())),
        keys.map_or(Value::Null, |k| json!(k.final_a == k.final_b)),
    ]);
    Ok(FullSessionRun { result, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackExperiment {
    /// Period pattern the controller repeats for the tap scenario.
    pub pattern: String,
    pub tap_survival: f64,
    pub tap_rounds: u64,
    pub keystream_trits: u64,
    pub search: PatternSearch,
    pub visibility: Visibility,
    pub memory_rounds: u64,
    pub twofold_p: Vec<f64>,
    pub given_decoding_p: f64,
    pub amplification_ratio: f64,
}

impl Default for AttackExperiment {
    fn default() -> Self {
        AttackExperiment {
            pattern: "01101001".into(),
            tap_survival: 0.01,
            tap_rounds: 1_000_000,
            keystream_trits: 100_000,
            search: PatternSearch::default(),
            visibility: Visibility::new(0.961).expect("valid visibility"),
            memory_rounds: 60_000,
            twofold_p: vec![0.1, 1.0 / 7.0, 0.2, 0.5],
            given_decoding_p: 0.2,
            amplification_ratio: 0.5,
        }
    }
}

pub const ATTACK_COLUMNS: [&str; 11] = [
    "scenario",
    "p",
    "survival",
    "rounds",
    "period",
    "confidence",
    "accuracy",
    "key_bits",
    "agreement",
    "chance_sigma",
    "votes",
];

fn tap_rows(exp: &AttackExperiment, master_seed: u64, table: &mut Table) -> Result<()> {
    let pattern: TritString = exp
        .pattern
        .parse()
        .map_err(|e| domain(format!("pattern: {e}")))?;
    let scenarios = [
        (
            "tap_repeating",
            ModulationSource::Repeating(pattern.clone()),
            exp.tap_rounds,
            ChannelParams::with_survival(exp.tap_survival),
        ),
        (
            "tap_keystream",
            ModulationSource::Keystream {
                seed: SeedToken::from_u64("attack", master_seed),
                params: ModulationParams::paper_pair(),
            },
            exp.keystream_trits,
            ChannelParams::lossless(),
        ),
    ];
    for (k, (name, source, rounds, channel)) in scenarios.into_iter().enumerate() {
        let mut rng = derived_rng(derived_seed(master_seed, CELLS + k as u64), 0);
        let events = tap_session(&source, rounds, exp.visibility, &channel, &mut rng)?;
        let obs = tap_infer_signs(&events)?;
        let hypothesis = recover_repeated_pattern(&obs, &exp.search)?;
        let best = fold_confidences(&obs, exp.search.max_period, exp.search.min_votes)
            .into_iter()
            .map(|(_, c)| c)
            .fold(0.0, f64::max);
        let (period, confidence, accuracy, votes) = match &hypothesis {
            Some(h) => (
                json!(h.period),
                json!(h.confidence),
                match &source {
                    ModulationSource::Repeating(p) => json!(pattern_accuracy(h, p)),
                    ModulationSource::Keystream { .. } => Value::Null,
                },
                json!(h.min_votes_seen),
            ),
            None => (Value::Null, json!(best), Value::Null, Value::Null),
        };
        table.push(vec![
            json!(name),
            Value::Null,
            json!(channel.heralding_product()),
            json!(rounds),
            period,
            confidence,
            accuracy,
            Value::Null,
            Value::Null,
            Value::Null,
            votes,
        ]);
    }
    Ok(())
}

/// Tap-based pattern recovery and memory-replay attacks against full sessions.
pub fn experiment_attack(exp: &AttackExperiment, master_seed: u64) -> Result<Table> {
    let mut table = Table::new(Experiment::Attack, master_seed, ATTACK_COLUMNS.to_vec());
    table.param("experiment", exp);
    tap_rows(exp, master_seed, &mut table)?;

    let mut memory = vec![("memory_onefold", 0.0, AttackScheme::Onefold, false)];
    memory.extend(exp.twofold_p.iter().map(|&p| ("memory_twofold", p, AttackScheme::Twofold, false)));
    memory.push(("memory_given_decoding", exp.given_decoding_p, AttackScheme::Twofold, true));
    let rows: Vec<Vec<Value>> = memory
        .par_iter()
        .enumerate()
        .map(|(i, &(name, p, scheme, given))| {
            let seed = derived_seed(master_seed, CELLS + 16 + i as u64);
            let config = SessionConfig {
                modulation: ModulationParams::target_p(p)?,
                visibility: exp.visibility,
                amplification_ratio: exp.amplification_ratio,
                ..SessionConfig::lossless(seed, exp.memory_rounds)
            };
            let result = run_session(&config)?;
            let keys = result.keys.as_ref().ok_or(crate::adversary::AdversaryError::NoKey)?;
            let log = MemoryLog::from_session(&result);
            let public = PublicPostProcessing::from_session(&result, exp.amplification_ratio)?;
            let truth = result.transcript.controller_trits();
            let report = memory_attack_reconstruct(
                &log,
                &result.transcript.announcements,
                &public,
                scheme,
                given.then_some(&truth),
                &keys.final_a,
                &mut derived_rng(seed, crate::seeding::ATTACK),
            )?;
            Ok(vec![
                json!(name),
                json!(p),
                json!(1.0),
                json!(exp.memory_rounds),
                Value::Null,
                Value::Null,
                Value::Null,
                json!(report.final_bits),
                json!(report.agreement),
                json!(report.chance_sigma),
                Value::Null,
            ])
        })
        .collect::<Result<_>>()?;
    for row in rows {
        table.push(row);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TernaryExperiment {
    pub bits: usize,
    /// Mixed-state share for the additional target-p row.
    pub target_p: f64,
}

impl Default for TernaryExperiment {
    fn default() -> Self {
        TernaryExperiment {
            bits: 1_000_000,
            target_p: 1.0 / 7.0,
        }
    }
}

pub const TERNARY_COLUMNS: [&str; 11] = [
    "rule", "bits", "trits", "count_0", "count_1", "count_2", "fraction_2", "expected_2", "sigma",
    "z", "roundtrip",
];

fn ternary_row(rule: &str, bits: usize, trits: &TritString, expected: f64, roundtrip: Value) -> Vec<Value> {
    let [c0, c1, c2] = trits.counts();
    let n = trits.len() as f64;
    let fraction = c2 as f64 / n;
    let sigma = (expected * (1.0 - expected) / n).sqrt();
    vec![
        json!(rule),
        json!(bits),
        json!(trits.len()),
        json!(c0),
        json!(c1),
        json!(c2),
        json!(fraction),
        json!(expected),
        json!(sigma),
        json!((fraction - expected) / sigma),
        roundtrip,
    ]
}

/// Trit statistics of both mapping rules on one keystream.
pub fn ternary_check(exp: &TernaryExperiment, master_seed: u64) -> Result<Table> {
    if exp.bits < 2 {
        return Err(domain("need at least 2 keystream bits".into()));
    }
    let seed = SeedToken::from_u64("ternary", master_seed);
    let bits = expand_stream(&seed, exp.bits)?;
    let pair = TritString::new(pair_rule_trits(bits.iter().copied()).collect(), TritRole::Modulation)?;
    // a dangling final bit produces no trit
    let used = &bits[..bits.len() & !1];
    let roundtrip = trits_to_bits_paper_rule(&pair).map(|b| b == used).unwrap_or(false);
    let params = ModulationParams::target_p(exp.target_p)?;
    let target = TritString::new(
        target_p_trit_stream(bits.iter().copied(), &params)?.collect(),
        TritRole::Modulation,
    )?;
    let mut table = Table::new(Experiment::Ternary, master_seed, TERNARY_COLUMNS.to_vec());
    table.param("experiment", exp).param("seed_token", seed.token_id());
    table.push(ternary_row("pair", exp.bits, &pair, 1.0 / 7.0, json!(roundtrip)));
    table.push(ternary_row("target_p", exp.bits, &target, exp.target_p, Value::Null));
    Ok(table)
}
