use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ProtocolError, Result};
use crate::channel::ChannelParams;
use crate::modulation::{ModulationParams, SeedToken, TritString};
use crate::quantum::{MeasurementSetting, Party, Visibility};

/// The four equatorial settings used by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NamedBasis {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "y")]
    Y,
    #[serde(rename = "x+y")]
    XPlusY,
    #[serde(rename = "x-y")]
    XMinusY,
}

impl NamedBasis {
    pub fn setting(self) -> MeasurementSetting {
        match self {
            NamedBasis::X => MeasurementSetting::sigma_x(),
            NamedBasis::Y => MeasurementSetting::sigma_y(),
            NamedBasis::XPlusY => MeasurementSetting::sigma_x_plus_y(),
            NamedBasis::XMinusY => MeasurementSetting::sigma_x_minus_y(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NamedBasis::X => "X",
            NamedBasis::Y => "Y",
            NamedBasis::XPlusY => "X+Y",
            NamedBasis::XMinusY => "X-Y",
        }
    }

    /// Position in the CHSH table: A uses {X, Y}, B uses {X+Y, X−Y}.
    pub fn chsh_index(self, party: Party) -> Option<usize> {
        match (party, self) {
            (Party::A, NamedBasis::X) | (Party::B, NamedBasis::XPlusY) => Some(0),
            (Party::A, NamedBasis::Y) | (Party::B, NamedBasis::XMinusY) => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisChoice {
    pub basis: NamedBasis,
    pub probability: f64,
}

/// A user's weighted list of test-round settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BasisMenu(Vec<BasisChoice>);

impl BasisMenu {
    pub fn new(choices: Vec<BasisChoice>) -> Result<Self> {
        let menu = BasisMenu(choices);
        menu.validate()?;
        Ok(menu)
    }

    pub fn uniform(bases: &[NamedBasis]) -> Self {
        let p = 1.0 / bases.len() as f64;
        BasisMenu(
            bases
                .iter()
                .map(|&basis| BasisChoice { basis, probability: p })
                .collect(),
        )
    }

    pub fn chsh_a() -> Self {
        BasisMenu::uniform(&[NamedBasis::X, NamedBasis::Y])
    }

    pub fn chsh_b() -> Self {
        BasisMenu::uniform(&[NamedBasis::XPlusY, NamedBasis::XMinusY])
    }

    pub fn choices(&self) -> &[BasisChoice] {
        &self.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(ProtocolError::Config("basis menu is empty".into()));
        }
        if self
            .0
            .iter()
            .any(|c| !(c.probability >= 0.0 && c.probability.is_finite()))
        {
            return Err(ProtocolError::Config("negative basis probability".into()));
        }
        let total: f64 = self.0.iter().map(|c| c.probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ProtocolError::Config(format!(
                "basis probabilities sum to {total}"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NamedBasis {
        let mut u: f64 = rng.gen();
        for c in &self.0 {
            if u < c.probability {
                return c.basis;
            }
            u -= c.probability;
        }
        self.0.last().expect("validated menu").basis
    }
}

/// Everything both users and the controller agree on before a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Seeds every simulated random stream.
    pub master_seed: u64,
    /// The controller's preshared seed.
    pub seed: SeedToken,
    /// Seeds held by the users; the controller's seed when absent.
    pub user_a_seed: Option<SeedToken>,
    pub user_b_seed: Option<SeedToken>,
    pub modulation: ModulationParams,
    /// A secret trit pattern repeated instead of the keystream.
    pub modulation_pattern: Option<String>,
    pub rounds: u64,
    pub visibility: Visibility,
    pub channel: ChannelParams,
    pub basis_menu_a: BasisMenu,
    pub basis_menu_b: BasisMenu,
    pub test_fraction: f64,
    pub abort_threshold_sigma: f64,
    pub min_rounds_per_combination: u64,
    /// The user who undoes the phase flips and runs certification.
    pub flip_party: Party,
    pub amplification_ratio: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            master_seed: 0,
            seed: SeedToken::from_u64("default", 0),
            user_a_seed: None,
            user_b_seed: None,
            modulation: ModulationParams::paper_pair(),
            modulation_pattern: None,
            rounds: 1_000_000_000,
            visibility: Visibility::new(0.961).expect("in range"),
            channel: ChannelParams::default(),
            basis_menu_a: BasisMenu::chsh_a(),
            basis_menu_b: BasisMenu::chsh_b(),
            test_fraction: 0.5,
            abort_threshold_sigma: 3.0,
            min_rounds_per_combination: 100,
            flip_party: Party::A,
            amplification_ratio: 0.5,
        }
    }
}

impl SessionConfig {
    /// An ideal-channel session: every round yields a central-peak coincidence.
    pub fn lossless(master_seed: u64, rounds: u64) -> Self {
        SessionConfig {
            master_seed,
            seed: SeedToken::from_u64("session", master_seed),
            rounds,
            visibility: Visibility::PERFECT,
            channel: ChannelParams::lossless(),
            ..SessionConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SessionConfig =
            toml::from_str(text).map_err(|e| ProtocolError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn pattern(&self) -> Result<Option<TritString>> {
        match &self.modulation_pattern {
            None => Ok(None),
            Some(s) => {
                let t: TritString = s.parse()?;
                if t.is_empty() {
                    return Err(ProtocolError::Config("empty modulation pattern".into()));
                }
                Ok(Some(t))
            }
        }
    }

    pub fn user_seed(&self, party: Party) -> &SeedToken {
        match party {
            Party::A => self.user_a_seed.as_ref(),
            Party::B => self.user_b_seed.as_ref(),
        }
        .unwrap_or(&self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        if !(self.abort_threshold_sigma >= 0.0 && self.abort_threshold_sigma.is_finite()) {
            return bad(format!(
                "abort_threshold_sigma {} must be non-negative",
                self.abort_threshold_sigma
            ));
        }
        if !(self.amplification_ratio > 0.0 && self.amplification_ratio <= 1.0) {
            return bad(format!(
                "amplification_ratio {} outside (0, 1]",
                self.amplification_ratio
            ));
        }
        self.basis_menu_a.validate()?;
        self.basis_menu_b.validate()?;
        self.channel.validate()?;
        self.modulation.validate()?;
        self.pattern()?;
        Ok(())
    }
}
