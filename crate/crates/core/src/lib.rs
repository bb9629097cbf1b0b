//! Exact finite-coalition fingerprinting capacity games over q-ary alphabets.
//!
//! Bias-based fingerprinting under the Marking Assumption turns each content
//! segment into a noisy channel: the coalition's symbol tally goes in, the
//! forged symbol comes out. This crate evaluates that channel's
//! mutual-information payoff exactly for finite coalition size, solves the
//! attacker/watermarker minimax and maximin games numerically with duality
//! certificates, and checks the large-coalition limits: the interleaving
//! attack pins the asymptotic payoff at q - 1, giving capacity
//! (q - 1) / (2 c^2 ln q).
//!
//! Modules follow the pipeline: [`channel`] enumerates tallies and the
//! multinomial channel, [`strategy`] holds finite and continuum attacks,
//! [`payoff`] evaluates I and the asymptotic functional T, [`solver`] plays
//! the games, [`asymptotics`] ties finite values to the closed forms, and
//! [`simulate`] cross-checks everything by Monte Carlo.

pub mod asymptotics;
pub mod channel;
pub mod error;
pub mod payoff;
pub mod simulate;
pub mod solver;
pub mod strategy;
mod util;

pub use channel::{BiasVector, CovarianceMatrix, Params, TallyVector};
pub use error::{Error, Result};
pub use payoff::{FisherMatrix, PayoffReport, TofU};
pub use solver::{BiasDistribution, Certificate, GameSolution, TraceRow};
pub use strategy::{GammaMap, Strategy, ValidationReport};
pub use util::fmt_g17;
