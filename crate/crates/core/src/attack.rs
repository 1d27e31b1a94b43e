use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    frank_wolfe_attack, gen_attack, parsimonious_attack, square_attack, FrankWolfeConfig, GenAttackConfig,
    ParsimoniousConfig, SquareConfig,
};
use crate::bobyqa::{bobyqa_attack, BobyqaConfig};
use crate::error::Error;
use crate::problem::{AttackError, AttackProblem, AttackResult, QueryOracle};

/// Any of the five attacks together with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum AttackConfig {
    Bobyqa(BobyqaConfig),
    Square(SquareConfig),
    Parsimonious(ParsimoniousConfig),
    GenAttack(GenAttackConfig),
    FrankWolfe(FrankWolfeConfig),
}

impl AttackConfig {
    pub const NAMES: [&'static str; 5] = ["bobyqa", "square", "parsimonious", "genattack", "frankwolfe"];

    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Bobyqa(_) => "bobyqa",
            AttackConfig::Square(_) => "square",
            AttackConfig::Parsimonious(_) => "parsimonious",
            AttackConfig::GenAttack(_) => "genattack",
            AttackConfig::FrankWolfe(_) => "frankwolfe",
        }
    }

    pub fn run<R: Rng + ?Sized>(
        &self,
        oracle: &mut dyn QueryOracle,
        problem: &AttackProblem,
        rng: &mut R,
    ) -> Result<AttackResult, AttackError> {
        match self {
            AttackConfig::Bobyqa(c) => bobyqa_attack(oracle, problem, c, rng),
            AttackConfig::Square(c) => square_attack(oracle, problem, c, rng),
            AttackConfig::Parsimonious(c) => parsimonious_attack(oracle, problem, c, rng),
            AttackConfig::GenAttack(c) => gen_attack(oracle, problem, c, rng),
            AttackConfig::FrankWolfe(c) => frank_wolfe_attack(oracle, problem, c, rng),
        }
    }
}

impl FromStr for AttackConfig {
    type Err = Error;

    /// Default settings for the named attack.
    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "bobyqa" => AttackConfig::Bobyqa(BobyqaConfig::default()),
            "square" => AttackConfig::Square(SquareConfig::default()),
            "parsimonious" => AttackConfig::Parsimonious(ParsimoniousConfig::default()),
            "genattack" => AttackConfig::GenAttack(GenAttackConfig::default()),
            "frankwolfe" | "frank-wolfe" => AttackConfig::FrankWolfe(FrankWolfeConfig::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown attack {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }
}
