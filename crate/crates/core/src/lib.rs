//! Targeted, `l_inf`-bounded black-box attacks on classifiers that only
//! expose logits.
//!
//! The main attack fits linear models on small random sub-spaces of a
//! coarse-to-fine block parametrisation of the perturbation and takes
//! trust-region steps on them. Four reference attacks, query oracles for
//! built-in and remote classifiers, and a campaign harness producing
//! success-rate CDFs come with it.

pub mod attack;
pub mod baselines;
pub mod bobyqa;
pub mod error;
pub mod harness;
pub mod lifting;
pub mod problem;
pub mod sampling;
pub mod targets;

pub use attack::AttackConfig;
pub use bobyqa::{bobyqa_attack, bobyqa_batch, BobyqaConfig};
pub use error::{Error, Result};
pub use problem::{
    AttackError, AttackObjective, AttackProblem, AttackResult, InputTensor, Perturbation, QueryOracle, Shape,
    StopReason,
};
