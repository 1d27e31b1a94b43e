use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::problem::{run_session, AttackError, AttackProblem, AttackResult, Halt, QueryOracle, Session};

use super::perturbation_range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenAttackConfig {
    pub population: usize,
    pub mutation_prob: f64,
    /// Softmax temperature turning fitness into selection probabilities.
    pub temperature: f64,
}

impl Default for GenAttackConfig {
    fn default() -> Self {
        Self {
            population: 6,
            mutation_prob: 0.05,
            temperature: 0.1,
        }
    }
}

fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn body<R: Rng + ?Sized>(session: &mut Session<'_>, config: &GenAttackConfig, rng: &mut R) -> Result<(), Halt> {
    if config.population == 0
        || !(0.0..=1.0).contains(&config.mutation_prob)
        || !(config.temperature > 0.0)
    {
        return Err(Error::Config(format!("invalid genetic parameters: {config:?}")).into());
    }
    let problem = session.problem();
    let image = &problem.image;
    let eps = problem.epsilon;
    let n = image.len();
    session.evaluate(&vec![0.0; n])?;

    let active = problem.active_coordinates();
    let ranges: Vec<(f64, f64)> = active
        .iter()
        .map(|&i| perturbation_range(image, i, eps))
        .collect();
    let sample = |rng: &mut R, k: usize| {
        let (lo, hi) = ranges[k];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };

    let mut population: Vec<Vec<f64>> = (0..config.population)
        .map(|_| {
            let mut eta = vec![0.0; n];
            for (k, &i) in active.iter().enumerate() {
                eta[i] = sample(rng, k);
            }
            eta
        })
        .collect();

    loop {
        let mut fitness = Vec::with_capacity(population.len());
        for member in &population {
            fitness.push(-session.evaluate(member)?);
        }
        let elite = fitness
            .iter()
            .enumerate()
            .fold(0, |best, (i, f)| if *f > fitness[best] { i } else { best });
        let probs = softmax(&fitness, config.temperature);
        let pick = WeightedIndex::new(&probs)
            .map_err(|e| Halt::Failed(Error::Contract(format!("selection weights: {e}"))))?;
        let mut next = Vec::with_capacity(population.len());
        next.push(population[elite].clone());
        while next.len() < population.len() {
            let (a, b) = (pick.sample(rng), pick.sample(rng));
            let from_a = probs[a] / (probs[a] + probs[b]);
            let mut child = vec![0.0; n];
            for (k, &i) in active.iter().enumerate() {
                child[i] = if rng.random::<f64>() < from_a {
                    population[a][i]
                } else {
                    population[b][i]
                };
                if rng.random::<f64>() < config.mutation_prob {
                    child[i] = sample(rng, k);
                }
            }
            next.push(child);
        }
        population = next;
    }
}

/// Genetic search: fitness-proportional (softmax) selection on `-loss`,
/// uniform crossover biased toward the fitter parent, per-coordinate
/// resampling mutation, and an elite member carried over unchanged. Every
/// member is evaluated each generation.
pub fn gen_attack<R: Rng + ?Sized>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    config: &GenAttackConfig,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    run_session(oracle, problem, |s| body(s, config, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_normalised_and_ordered() {
        let p = softmax(&[-1.0, -0.5, -2.0], 0.1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > p[0] && p[0] > p[2]);
    }
}
