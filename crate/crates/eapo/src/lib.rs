//! Exploration-aware policy optimization on small, exactly enumerable
//! information-gathering worlds.
//!
//! The crate is organised around the pieces of the training pipeline:
//!
//! - [`mdp`]: augmented states/actions, transitions, trajectories, returns and
//!   visitation depth.
//! - [`worlds`]: the `key-corridor` and `shop-sim` environments, the
//!   inverse-action (rollback) oracle and exact success-probability
//!   enumeration.
//! - [`structured_io`]: the tagged output template, its parser and the binary
//!   format reward.
//! - [`policy`]: a factorised tabular softmax policy with exact log-probs,
//!   the clipped group-relative surrogate gradient and rollback fine-tuning.
//! - [`reward`]: the variational exploration-memory reward model, total
//!   reward composition, the online rollout reward and the lower-bound checker.
//! - [`optim`]: rollout collection, visitation-depth grouping, advantage
//!   normalisation and the two-stage training loop.
//! - [`metrics`]: per-epoch diagnostics and multi-seed aggregation.

pub mod error;
pub mod mdp;
pub mod metrics;
pub mod optim;
mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod structured_io;
pub mod worlds;

pub use error::{Error, Result};
