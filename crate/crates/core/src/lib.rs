//! Simulator and analysis toolkit for a controlled entanglement source.

pub mod adversary;
pub mod analysis;
pub mod channel;
pub mod modulation;
pub mod protocol;
pub mod quantum;
pub mod seeding;
