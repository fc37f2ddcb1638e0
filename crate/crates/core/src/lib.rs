//! Constraint-aware offline Q-learning with a proximal Bellman operator.
//!
//! The crate covers the constraint operators (monotone penalty, cone
//! projection, Lipschitz penalty and their proxes), a tabular oracle for the
//! proximal Bellman operator, a small MLP with explicit forward/backward
//! passes, the implicit-gradient critic update, the training loops for the
//! constraint-aware agent and its baselines, the Bid–Click environment, and
//! the experiment harness behind the `proxq` binary.

pub mod agents;
pub mod constraint;
pub mod critic;
pub mod env;
pub mod error;
pub mod harness;
pub mod mlp;
pub mod tabular;
pub mod verify;

pub use error::{Error, Result};
