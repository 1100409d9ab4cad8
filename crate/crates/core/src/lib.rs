//! Desk-scale adversarial training on dense ReLU networks.
//!
//! Implements the AT, TRADES, and bridged (BAT) training objectives with
//! exact analytic gradients, L-infinity PGD/FGSM attacks, margin and
//! smoothness diagnostics, and a standalone numerical verification suite
//! for the gradient decomposition and KL-chain inequalities the bridged
//! loss relies on.

pub mod attack;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod theorycheck;

mod error;

pub use error::{Error, Result};
