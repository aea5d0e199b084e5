//! Exact two-qubit state algebra.
//!
//! Holds the three element states of the source, equatorial phase-basis
//! measurements, Born-rule outcome probabilities, the correlation function
//! and the CHSH combination, plus the sinusoidal fringe law of the analyzers.
//!
//! Basis ordering is `|00>, |01>, |10>, |11>` with user A on the first qubit.
//! User A's equatorial observable at angle `θ` is `cos θ·σX + sin θ·σY`; user B
//! uses the conjugate convention `cos θ·σX − sin θ·σY`, so that for `|φ+>` the
//! correlation is `cos(θa − θb)`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2, TAU};

use nalgebra::{Matrix2, Matrix4};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for exact algebra (hermiticity, trace).
pub const EXACT_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_TOL` are accepted as non-negative.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantumError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty sample: no counts to estimate a correlation from")]
    EmptySample,
}

pub type Result<T> = std::result::Result<T, QuantumError>;

/// Which end of the pair a measurement acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
}

impl Party {
    pub fn label(self) -> char {
        match self {
            Party::A => 'A',
            Party::B => 'B',
        }
    }
}

/// Binary measurement outcome, `+` or `−`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    /// Key-bit encoding: `+` is 0, `−` is 1.
    pub fn bit(self) -> bool {
        matches!(self, Outcome::Minus)
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Outcome::Minus
        } else {
            Outcome::Plus
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Outcome::Plus => '+',
            Outcome::Minus => '-',
        }
    }
}

/// Entanglement visibility, the Werner mixing weight of the pure state.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Visibility(f64);

impl Visibility {
    pub const PERFECT: Visibility = Visibility(1.0);

    pub fn new(v: f64) -> Result<Self> {
        if v.is_finite() && (0.0..=1.0).contains(&v) {
            Ok(Visibility(v))
        } else {
            Err(QuantumError::Domain(format!("visibility {v} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Visibility {
    type Error = QuantumError;
    fn try_from(v: f64) -> Result<Self> {
        Visibility::new(v)
    }
}

impl From<Visibility> for f64 {
    fn from(v: Visibility) -> f64 {
        v.0
    }
}

/// The three states the controller can emit, indexed by trit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementStateKind {
    PhiPlus,
    PhiMinus,
    MixedR,
}

impl ElementStateKind {
    pub const ALL: [ElementStateKind; 3] = [
        ElementStateKind::PhiPlus,
        ElementStateKind::PhiMinus,
        ElementStateKind::MixedR,
    ];

    /// Trit 0 → `|φ+>`, 1 → `|φ−>`, 2 → `R`.
    pub fn from_trit(trit: u8) -> Result<Self> {
        match trit {
            0 => Ok(ElementStateKind::PhiPlus),
            1 => Ok(ElementStateKind::PhiMinus),
            2 => Ok(ElementStateKind::MixedR),
            t => Err(QuantumError::Domain(format!("{t} is not a trit"))),
        }
    }

    pub fn trit(self) -> u8 {
        match self {
            ElementStateKind::PhiPlus => 0,
            ElementStateKind::PhiMinus => 1,
            ElementStateKind::MixedR => 2,
        }
    }
}

/// A projective measurement on one qubit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeasurementSetting {
    /// Equatorial observable at the stored angle, always in `[0, 2π)`.
    Equatorial(f64),
    /// `σZ`, the time basis of a time-bin encoding.
    TimeBasis,
}

impl MeasurementSetting {
    pub fn equatorial(angle: f64) -> Self {
        let mut a = angle.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        if a >= TAU {
            a = 0.0;
        }
        MeasurementSetting::Equatorial(a)
    }

    pub fn sigma_x() -> Self {
        Self::equatorial(0.0)
    }

    pub fn sigma_y() -> Self {
        Self::equatorial(FRAC_PI_2)
    }

    pub fn sigma_x_plus_y() -> Self {
        Self::equatorial(FRAC_PI_4)
    }

    pub fn sigma_x_minus_y() -> Self {
        Self::equatorial(-FRAC_PI_4)
    }

    pub fn angle(self) -> Option<f64> {
        match self {
            MeasurementSetting::Equatorial(a) => Some(a),
            MeasurementSetting::TimeBasis => None,
        }
    }

    /// Same setting up to `tol` radians on the circle.
    pub fn approx_eq(self, other: Self, tol: f64) -> bool {
        match (self, other) {
            (MeasurementSetting::TimeBasis, MeasurementSetting::TimeBasis) => true,
            (MeasurementSetting::Equatorial(a), MeasurementSetting::Equatorial(b)) => {
                let d = (a - b).rem_euclid(TAU);
                d.min(TAU - d) <= tol
            }
            _ => false,
        }
    }

    /// Projector onto the `outcome` eigenspace, in `party`'s convention.
    pub fn projector(self, party: Party, outcome: Outcome) -> Matrix2<Complex64> {
        let half = Complex64::new(0.5, 0.0);
        match self {
            MeasurementSetting::TimeBasis => match outcome {
                Outcome::Plus => Matrix2::new(1.0.into(), 0.0.into(), 0.0.into(), 0.0.into()),
                Outcome::Minus => Matrix2::new(0.0.into(), 0.0.into(), 0.0.into(), 1.0.into()),
            },
            MeasurementSetting::Equatorial(theta) => {
                let phase = match party {
                    Party::A => theta,
                    Party::B => -theta,
                };
                let sign = match outcome {
                    Outcome::Plus => 1.0,
                    Outcome::Minus => -1.0,
                };
                // |v> = (|0> + sign·e^{iφ}|1>)/√2, P = |v><v|
                let c = Complex64::from_polar(sign, phase);
                Matrix2::new(half, half * c.conj(), half * c, half)
            }
        }
    }
}

fn kron(a: &Matrix2<Complex64>, b: &Matrix2<Complex64>) -> Matrix4<Complex64> {
    Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// A validated two-qubit density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix4<Complex64>);

impl DensityMatrix {
    /// Validates hermiticity, unit trace and positivity.
    pub fn new(m: Matrix4<Complex64>) -> Result<Self> {
        for r in 0..4 {
            for c in 0..4 {
                if (m[(r, c)] - m[(c, r)].conj()).norm() > EXACT_TOL {
                    return Err(QuantumError::Domain(format!(
                        "matrix is not Hermitian at ({r}, {c})"
                    )));
                }
            }
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > EXACT_TOL || tr.im.abs() > EXACT_TOL {
            return Err(QuantumError::Domain(format!("trace {tr} differs from 1")));
        }
        let min_eig = m
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL {
            return Err(QuantumError::Domain(format!(
                "matrix is not positive semidefinite (eigenvalue {min_eig:e})"
            )));
        }
        Ok(DensityMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.0
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.0[(row, col)]
    }

    /// Werner mixture `v·|ψ><ψ| + (1 − v)·I/4` of a pure state.
    fn werner(psi: [Complex64; 4], v: Visibility) -> Self {
        let v = v.value();
        let m = Matrix4::from_fn(|r, c| {
            let pure = psi[r] * psi[c].conj() * v;
            if r == c {
                pure + Complex64::new((1.0 - v) / 4.0, 0.0)
            } else {
                pure
            }
        });
        DensityMatrix(m)
    }
}

/// Builds the density matrix of an element state.
///
/// `|φ±>` are Werner-mixed with the given visibility; `R` is returned exactly,
/// since its equatorial statistics are already uniform.
pub fn element_state(kind: ElementStateKind, v: Visibility) -> DensityMatrix {
    let s = Complex64::new(1.0 / SQRT_2, 0.0);
    let z = Complex64::new(0.0, 0.0);
    match kind {
        ElementStateKind::PhiPlus => DensityMatrix::werner([s, z, z, s], v),
        ElementStateKind::PhiMinus => DensityMatrix::werner([s, z, z, -s], v),
        ElementStateKind::MixedR => {
            let mut m = Matrix4::zeros();
            m[(0, 0)] = Complex64::new(0.5, 0.0);
            m[(3, 3)] = Complex64::new(0.5, 0.0);
            DensityMatrix(m)
        }
    }
}

/// Joint outcome probabilities `(p++, p+−, p−+, p−−)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeProbabilities {
    pub pp: f64,
    pub pm: f64,
    pub mp: f64,
    pub mm: f64,
}

impl OutcomeProbabilities {
    pub const UNIFORM: OutcomeProbabilities = OutcomeProbabilities {
        pp: 0.25,
        pm: 0.25,
        mp: 0.25,
        mm: 0.25,
    };

    pub fn get(&self, a: Outcome, b: Outcome) -> f64 {
        match (a, b) {
            (Outcome::Plus, Outcome::Plus) => self.pp,
            (Outcome::Plus, Outcome::Minus) => self.pm,
            (Outcome::Minus, Outcome::Plus) => self.mp,
            (Outcome::Minus, Outcome::Minus) => self.mm,
        }
    }

    pub fn total(&self) -> f64 {
        self.pp + self.pm + self.mp + self.mm
    }

    /// Draws one outcome pair by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Outcome, Outcome) {
        let u: f64 = rng.gen::<f64>() * self.total();
        let mut acc = self.pp;
        if u < acc {
            return (Outcome::Plus, Outcome::Plus);
        }
        acc += self.pm;
        if u < acc {
            return (Outcome::Plus, Outcome::Minus);
        }
        acc += self.mp;
        if u < acc {
            return (Outcome::Minus, Outcome::Plus);
        }
        (Outcome::Minus, Outcome::Minus)
    }
}

/// Born-rule probabilities of the four outcome pairs, `tr(ρ·(Pa ⊗ Pb))`.
pub fn outcome_probabilities(
    rho: &DensityMatrix,
    a: MeasurementSetting,
    b: MeasurementSetting,
) -> OutcomeProbabilities {
    let prob = |oa: Outcome, ob: Outcome| -> f64 {
        let p = kron(&a.projector(Party::A, oa), &b.projector(Party::B, ob));
        // tr(ρP) without forming the product
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..4 {
            for c in 0..4 {
                acc += rho.0[(r, c)] * p[(c, r)];
            }
        }
        acc.re.max(0.0)
    };
    OutcomeProbabilities {
        pp: prob(Outcome::Plus, Outcome::Plus),
        pm: prob(Outcome::Plus, Outcome::Minus),
        mp: prob(Outcome::Minus, Outcome::Plus),
        mm: prob(Outcome::Minus, Outcome::Minus),
    }
}

/// Coincidence counts per outcome pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub pp: u64,
    pub pm: u64,
    pub mp: u64,
    pub mm: u64,
}

impl OutcomeCounts {
    pub fn record(&mut self, a: Outcome, b: Outcome) {
        match (a, b) {
            (Outcome::Plus, Outcome::Plus) => self.pp += 1,
            (Outcome::Plus, Outcome::Minus) => self.pm += 1,
            (Outcome::Minus, Outcome::Plus) => self.mp += 1,
            (Outcome::Minus, Outcome::Minus) => self.mm += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.pp + self.pm + self.mp + self.mm
    }
}

/// Correlation function value with its counts and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub counts: OutcomeCounts,
    pub e: f64,
    pub stderr: f64,
}

impl CorrelationEstimate {
    /// Exact correlation from probabilities; the standard error is zero.
    pub fn from_probabilities(p: &OutcomeProbabilities) -> Result<Self> {
        for x in [p.pp, p.pm, p.mp, p.mm] {
            if !(x >= 0.0) {
                return Err(QuantumError::Domain(format!("negative probability {x}")));
            }
        }
        let total = p.total();
        if total <= 0.0 {
            return Err(QuantumError::EmptySample);
        }
        let e = (p.pp + p.mm - p.pm - p.mp) / total;
        Ok(CorrelationEstimate {
            counts: OutcomeCounts::default(),
            e: e.clamp(-1.0, 1.0),
            stderr: 0.0,
        })
    }

    /// Sample correlation; the error treats each coincidence as a ±1 draw.
    pub fn from_counts(counts: OutcomeCounts) -> Result<Self> {
        let n = counts.total();
        if n == 0 {
            return Err(QuantumError::EmptySample);
        }
        let nf = n as f64;
        let agree = (counts.pp + counts.mm) as f64;
        let e = (2.0 * agree - nf) / nf;
        let stderr = ((1.0 - e * e).max(0.0) / nf).sqrt();
        Ok(CorrelationEstimate { counts, e, stderr })
    }
}

/// The two canonical settings of each user entering the CHSH sum.
pub fn chsh_settings() -> ([MeasurementSetting; 2], [MeasurementSetting; 2]) {
    (
        [MeasurementSetting::sigma_x(), MeasurementSetting::sigma_y()],
        [
            MeasurementSetting::sigma_x_plus_y(),
            MeasurementSetting::sigma_x_minus_y(),
        ],
    )
}

/// Sign of each `(a, b)` term: `E(X,X+Y) + E(Y,X+Y) + E(X,X−Y) − E(Y,X−Y)`.
pub fn chsh_sign(a_index: usize, b_index: usize) -> f64 {
    if a_index == 1 && b_index == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Exact CHSH parameter of a state at the canonical settings.
pub fn chsh(rho: &DensityMatrix) -> f64 {
    let (alice, bob) = chsh_settings();
    let mut s = 0.0;
    for (i, &a) in alice.iter().enumerate() {
        for (j, &b) in bob.iter().enumerate() {
            let p = outcome_probabilities(rho, a, b);
            s += chsh_sign(i, j) * (p.pp + p.mm - p.pm - p.mp);
        }
    }
    s
}

/// Draws one outcome pair from the Born distribution.
pub fn sample_outcome<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    a: MeasurementSetting,
    b: MeasurementSetting,
    rng: &mut R,
) -> (Outcome, Outcome) {
    outcome_probabilities(rho, a, b).sample(rng)
}

/// One sample of the analyzer interference fringe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FringePoint {
    pub phase: f64,
    /// `(1 + V cos(φ + offset))/4`
    pub port_plus: f64,
    /// `(1 − V cos(φ + offset))/4`
    pub port_minus: f64,
}

pub fn fringe_curve(v: Visibility, phase_offset: f64, n_points: usize) -> Result<Vec<FringePoint>> {
    if n_points < 2 {
        return Err(QuantumError::Domain(format!(
            "fringe needs at least 2 points, got {n_points}"
        )));
    }
    Ok((0..n_points)
        .map(|k| {
            let phase = TAU * k as f64 / n_points as f64;
            let c = v.value() * (phase + phase_offset).cos();
            FringePoint {
                phase,
                port_plus: (1.0 + c) / 4.0,
                port_minus: (1.0 - c) / 4.0,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vis(v: f64) -> Visibility {
        Visibility::new(v).unwrap()
    }

    /// Independent route: state vectors and observables as plain arrays.
    fn brute_force_correlation(sign: f64, v: f64, ta: f64, tb: f64) -> f64 {
        // <Oa ⊗ Ob> on Werner state; the I/4 part has zero correlation
        let s = 1.0 / SQRT_2;
        let psi = [
            Complex64::new(s, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(sign * s, 0.0),
        ];
        let obs = |theta: f64| -> [[Complex64; 2]; 2] {
            let e = Complex64::from_polar(1.0, theta);
            [[0.0.into(), e.conj()], [e, 0.0.into()]]
        };
        let oa = obs(ta);
        let ob = obs(-tb);
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..4 {
            for c in 0..4 {
                let o = oa[r / 2][c / 2] * ob[r % 2][c % 2];
                acc += psi[r].conj() * o * psi[c];
            }
        }
        v * acc.re
    }

    #[test]
    fn phi_plus_pure_has_half_corners() {
        let rho = element_state(ElementStateKind::PhiPlus, Visibility::PERFECT);
        for &(r, c) in &[(0, 0), (0, 3), (3, 0), (3, 3)] {
            assert_abs_diff_eq!(rho.entry(r, c).re, 0.5, epsilon = EXACT_TOL);
        }
        assert_abs_diff_eq!(rho.entry(1, 1).norm(), 0.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(rho.entry(0, 1).norm(), 0.0, epsilon = EXACT_TOL);
    }

    #[test]
    fn zero_visibility_is_maximally_mixed() {
        let rho = element_state(ElementStateKind::PhiPlus, vis(0.0));
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { 0.25 } else { 0.0 };
                assert_abs_diff_eq!(rho.entry(r, c).re, want, epsilon = EXACT_TOL);
            }
        }
    }

    #[test]
    fn mixed_r_is_diagonal() {
        let rho = element_state(ElementStateKind::MixedR, vis(0.3));
        let diag: Vec<f64> = (0..4).map(|i| rho.entry(i, i).re).collect();
        assert_eq!(diag, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn visibility_out_of_range_is_rejected() {
        assert!(Visibility::new(1.2).is_err());
        assert!(Visibility::new(-0.01).is_err());
        assert!(Visibility::new(f64::NAN).is_err());
    }

    #[test]
    fn non_psd_matrix_is_rejected() {
        let mut m = Matrix4::zeros();
        m[(0, 0)] = Complex64::new(1.5, 0.0);
        m[(1, 1)] = Complex64::new(-0.5, 0.0);
        assert!(matches!(DensityMatrix::new(m), Err(QuantumError::Domain(_))));
    }

    #[test]
    fn trit_mapping_is_a_bijection() {
        for kind in ElementStateKind::ALL {
            assert_eq!(ElementStateKind::from_trit(kind.trit()).unwrap(), kind);
        }
        assert!(ElementStateKind::from_trit(3).is_err());
    }

    #[test]
    fn canonical_angles() {
        assert_eq!(MeasurementSetting::sigma_x().angle(), Some(0.0));
        assert_abs_diff_eq!(
            MeasurementSetting::sigma_x_minus_y().angle().unwrap(),
            7.0 * FRAC_PI_4,
            epsilon = 1e-15
        );
        assert!(MeasurementSetting::equatorial(TAU).approx_eq(MeasurementSetting::sigma_x(), 1e-12));
    }

    #[test]
    fn perfect_xx_correlation() {
        let rho = element_state(ElementStateKind::PhiPlus, Visibility::PERFECT);
        let x = MeasurementSetting::sigma_x();
        let p = outcome_probabilities(&rho, x, x);
        assert_abs_diff_eq!(p.pp, 0.5, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.pm, 0.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.mp, 0.0, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.mm, 0.5, epsilon = EXACT_TOL);
    }

    #[test]
    fn mixed_r_equatorial_is_uniform() {
        let rho = element_state(ElementStateKind::MixedR, Visibility::PERFECT);
        for ta in [0.0, 0.3, FRAC_PI_2, 2.0] {
            for tb in [0.0, FRAC_PI_4, -FRAC_PI_4, 5.0] {
                let p = outcome_probabilities(
                    &rho,
                    MeasurementSetting::equatorial(ta),
                    MeasurementSetting::equatorial(tb),
                );
                for x in [p.pp, p.pm, p.mp, p.mm] {
                    assert_abs_diff_eq!(x, 0.25, epsilon = EXACT_TOL);
                }
            }
        }
    }

    #[test]
    fn x_against_x_plus_y() {
        let rho = element_state(ElementStateKind::PhiPlus, Visibility::PERFECT);
        let p = outcome_probabilities(
            &rho,
            MeasurementSetting::sigma_x(),
            MeasurementSetting::sigma_x_plus_y(),
        );
        let hi = (1.0 + 1.0 / SQRT_2) / 4.0;
        let lo = (1.0 - 1.0 / SQRT_2) / 4.0;
        assert_abs_diff_eq!(p.pp, hi, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.pm, lo, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.mp, lo, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.mm, hi, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(hi, 0.4268, epsilon = 1e-4);
    }

    #[test]
    fn time_basis_on_mixed_r_is_correlated() {
        let rho = element_state(ElementStateKind::MixedR, Visibility::PERFECT);
        let z = MeasurementSetting::TimeBasis;
        let p = outcome_probabilities(&rho, z, z);
        assert_abs_diff_eq!(p.pp, 0.5, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(p.mm, 0.5, epsilon = EXACT_TOL);
    }

    #[test]
    fn correlation_examples() {
        let e = CorrelationEstimate::from_probabilities(&OutcomeProbabilities {
            pp: 0.5,
            pm: 0.0,
            mp: 0.0,
            mm: 0.5,
        })
        .unwrap();
        assert_eq!(e.e, 1.0);
        assert_eq!(e.stderr, 0.0);
        let e = CorrelationEstimate::from_probabilities(&OutcomeProbabilities::UNIFORM).unwrap();
        assert_eq!(e.e, 0.0);

        let e = CorrelationEstimate::from_counts(OutcomeCounts {
            pp: 427,
            pm: 73,
            mp: 73,
            mm: 427,
        })
        .unwrap();
        assert_abs_diff_eq!(e.e, 0.708, epsilon = 1e-12);
        // sqrt((1 - 0.708²)/1000)
        assert_abs_diff_eq!(e.stderr, 0.022332397990363687, epsilon = 1e-12);
        assert_eq!(
            CorrelationEstimate::from_counts(OutcomeCounts::default()),
            Err(QuantumError::EmptySample)
        );
    }

    #[test]
    fn chsh_anchors() {
        let two_root_two = 2.0 * SQRT_2;
        let plus = element_state(ElementStateKind::PhiPlus, Visibility::PERFECT);
        let minus = element_state(ElementStateKind::PhiMinus, Visibility::PERFECT);
        let mixed = element_state(ElementStateKind::MixedR, Visibility::PERFECT);
        assert_abs_diff_eq!(chsh(&plus), two_root_two, epsilon = 1e-9);
        assert_abs_diff_eq!(chsh(&minus), -two_root_two, epsilon = 1e-9);
        assert_abs_diff_eq!(chsh(&mixed), 0.0, epsilon = 1e-12);
        let noisy = element_state(ElementStateKind::PhiPlus, vis(0.961));
        assert_abs_diff_eq!(chsh(&noisy), 2.7181, epsilon = 1e-4);
    }

    #[test]
    fn chsh_scales_linearly_with_visibility() {
        for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let plus = element_state(ElementStateKind::PhiPlus, vis(v));
            let minus = element_state(ElementStateKind::PhiMinus, vis(v));
            assert_abs_diff_eq!(chsh(&plus), 2.0 * SQRT_2 * v, epsilon = 1e-9);
            assert_abs_diff_eq!(chsh(&minus), -2.0 * SQRT_2 * v, epsilon = 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_zeros() {
        let rho = element_state(ElementStateKind::PhiPlus, Visibility::PERFECT);
        let x = MeasurementSetting::sigma_x();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let (a, b) = sample_outcome(&rho, x, x, &mut rng);
            assert_eq!(a, b);
        }
        let once = sample_outcome(&rho, x, x, &mut ChaCha8Rng::seed_from_u64(11));
        let twice = sample_outcome(&rho, x, x, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(once, twice);
    }

    #[test]
    fn mixed_r_monte_carlo_is_uniform() {
        let rho = element_state(ElementStateKind::MixedR, Visibility::PERFECT);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = OutcomeCounts::default();
        let n = 100_000u64;
        for _ in 0..n {
            let (a, b) = sample_outcome(
                &rho,
                MeasurementSetting::sigma_y(),
                MeasurementSetting::sigma_x_plus_y(),
                &mut rng,
            );
            counts.record(a, b);
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for c in [counts.pp, counts.pm, counts.mp, counts.mm] {
            assert!((c as f64 / n as f64 - 0.25).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn monte_carlo_correlation_converges() {
        let rho = element_state(ElementStateKind::PhiMinus, vis(0.9));
        let (a, b) = (MeasurementSetting::sigma_y(), MeasurementSetting::sigma_x_minus_y());
        let exact = CorrelationEstimate::from_probabilities(&outcome_probabilities(&rho, a, b))
            .unwrap()
            .e;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = OutcomeCounts::default();
        for _ in 0..100_000 {
            let (x, y) = sample_outcome(&rho, a, b, &mut rng);
            counts.record(x, y);
        }
        let est = CorrelationEstimate::from_counts(counts).unwrap();
        assert!((est.e - exact).abs() < 5.0 * est.stderr, "{est:?} vs {exact}");
    }

    #[test]
    fn fringe_examples() {
        let f = fringe_curve(Visibility::PERFECT, 0.0, 4).unwrap();
        assert_abs_diff_eq!(f[0].port_plus, 0.5, epsilon = EXACT_TOL);
        assert_abs_diff_eq!(f[2].port_plus, 0.0, epsilon = EXACT_TOL);
        let f = fringe_curve(vis(0.961), 0.0, 16).unwrap();
        assert_abs_diff_eq!(f[0].port_plus, 0.49025, epsilon = EXACT_TOL);
        for p in &f {
            assert_abs_diff_eq!(p.port_plus + p.port_minus, 0.5, epsilon = EXACT_TOL);
        }
        assert!(fringe_curve(Visibility::PERFECT, 0.0, 1).is_err());
    }

    fn random_density_matrix(entries: &[(f64, f64)]) -> DensityMatrix {
        let a = Matrix4::from_fn(|r, c| {
            let (re, im) = entries[4 * r + c];
            Complex64::new(re, im)
        });
        let m = a * a.adjoint();
        let tr = m.trace().re;
        let mut m = m / Complex64::new(tr, 0.0);
        // symmetrize away rounding
        m = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        DensityMatrix::new(m).unwrap()
    }

    proptest! {
        #[test]
        fn probabilities_are_normalized(
            kind in 0u8..3, v in 0.0f64..=1.0, ta in -7.0f64..7.0, tb in -7.0f64..7.0
        ) {
            let rho = element_state(ElementStateKind::from_trit(kind).unwrap(), vis(v));
            prop_assert!(DensityMatrix::new(rho.matrix().clone()).is_ok());
            let p = outcome_probabilities(
                &rho,
                MeasurementSetting::equatorial(ta),
                MeasurementSetting::equatorial(tb),
            );
            prop_assert!((p.total() - 1.0).abs() < EXACT_TOL);
            for x in [p.pp, p.pm, p.mp, p.mm] {
                prop_assert!(x >= -EXACT_TOL);
            }
        }

        #[test]
        fn correlation_matches_brute_force(v in 0.0f64..=1.0, ta in -7.0f64..7.0, tb in -7.0f64..7.0) {
            for (kind, sign) in [(ElementStateKind::PhiPlus, 1.0), (ElementStateKind::PhiMinus, -1.0)] {
                let rho = element_state(kind, vis(v));
                let p = outcome_probabilities(
                    &rho,
                    MeasurementSetting::equatorial(ta),
                    MeasurementSetting::equatorial(tb),
                );
                let e = p.pp + p.mm - p.pm - p.mp;
                prop_assert!((e - brute_force_correlation(sign, v, ta, tb)).abs() < EXACT_TOL);
                prop_assert!((e - sign * v * (ta - tb).cos()).abs() < EXACT_TOL);
            }
        }

        #[test]
        fn tsirelson_bound_holds(entries in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 16)) {
            let rho = random_density_matrix(&entries);
            prop_assert!(chsh(&rho).abs() <= 2.0 * SQRT_2 + 1e-9);
        }
    }
}
