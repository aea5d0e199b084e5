//! The controlled key-distribution session.
//!
//! A controller distributes one of three element states per round according to
//! a keyed modulation string. Users measure, sift by basis, certify with CHSH
//! after decoding, and turn the key rounds into a shared secret.

mod amplify;
mod certify;
mod config;
mod keys;
mod reconcile;
mod session;

pub use amplify::{privacy_amplify, PaSeed};
pub use certify::{certify_chsh, CertificationReport, CertifyOptions, CombinationStats, Verdict};
pub use config::{BasisChoice, BasisMenu, NamedBasis, SessionConfig};
pub use keys::{key_error_rate, sift_key, SiftedKey};
pub use reconcile::{
    reconcile, reconcile_with, LiveParity, ParityOracle, Reconciliation, ReconcileParams,
    ReplayParity,
};
pub use session::{
    basis_sift, derive_decoding_string, run_session, session_setup, Controller, Detection,
    KeyMaterial, ModulationSource, PublicAnnouncement, RoundRole, Session, SessionResult,
    SessionTranscript, SiftGroups, User,
};

use thiserror::Error;

use crate::channel::ChannelError;
use crate::modulation::ModulationError;
use crate::quantum::QuantumError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("round {round} is beyond the session budget of {budget} rounds")]
    Exhausted { round: u64, budget: u64 },
    #[error("decoding string denied: no seed held")]
    Denied,
    #[error("inconclusive: combination {combination} has {rounds} rounds, {required} required")]
    Inconclusive {
        combination: String,
        rounds: u64,
        required: u64,
    },
    #[error("refusing to sift keys from an uncertified session")]
    Uncertified,
    #[error("sifted keys cover different rounds")]
    KeyMisaligned,
    #[error("estimated error rate {0:.4} exceeds the reconciliation threshold")]
    ErrorRateAbort(f64),
    #[error("reconciliation disclosed {disclosed} bits, budget is {budget}")]
    DisclosureExceeded { disclosed: usize, budget: usize },
    #[error("empty key")]
    EmptyKey,
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;
