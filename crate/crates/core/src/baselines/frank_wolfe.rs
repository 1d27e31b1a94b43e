use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::problem::{run_session, AttackError, AttackProblem, AttackResult, Halt, QueryOracle, Session};

use super::perturbation_range;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// Random unit vectors over the active coordinates.
    Gaussian,
    /// Canonical directions, cycling through the active coordinates.
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum StepSize {
    /// `1 / sqrt(k + 1)` at iteration `k`.
    InverseSqrt,
    Constant(f64),
}

impl StepSize {
    pub fn at(self, k: usize) -> f64 {
        match self {
            StepSize::InverseSqrt => 1.0 / ((k + 1) as f64).sqrt(),
            StepSize::Constant(g) => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrankWolfeConfig {
    pub momentum: f64,
    /// Directions per gradient estimate; each costs two queries.
    pub directions: usize,
    pub direction_kind: DirectionKind,
    /// Finite-difference step.
    pub smoothing: f64,
    pub step_size: StepSize,
}

impl Default for FrankWolfeConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            directions: 25,
            direction_kind: DirectionKind::Gaussian,
            smoothing: 1e-3,
            step_size: StepSize::InverseSqrt,
        }
    }
}

fn body<R: Rng + ?Sized>(session: &mut Session<'_>, config: &FrankWolfeConfig, rng: &mut R) -> Result<(), Halt> {
    if config.directions == 0
        || !(0.0..1.0).contains(&config.momentum)
        || !(config.smoothing > 0.0)
    {
        return Err(Error::Config(format!("invalid Frank-Wolfe parameters: {config:?}")).into());
    }
    if let StepSize::Constant(g) = config.step_size {
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::Config(format!("step size must be in (0, 1], got {g}")).into());
        }
    }
    let problem = session.problem();
    let image = &problem.image;
    let eps = problem.epsilon;
    let n = image.len();
    let active = problem.active_coordinates();
    let d = active.len();
    let ranges: Vec<(f64, f64)> = active
        .iter()
        .map(|&i| perturbation_range(image, i, eps))
        .collect();
    let mut eta = vec![0.0; n];
    session.evaluate(&eta)?;
    if d == 0 {
        return Err(Halt::Converged);
    }

    let delta = config.smoothing;
    let mut momentum = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut dir = vec![0.0; d];
    let mut probe = vec![0.0; n];
    let mut next_coordinate = 0;
    for k in 0.. {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..config.directions {
            match config.direction_kind {
                DirectionKind::Gaussian => {
                    for u in dir.iter_mut() {
                        *u = rng.sample(StandardNormal);
                    }
                    let norm = dir.iter().map(|u| u * u).sum::<f64>().sqrt();
                    dir.iter_mut().for_each(|u| *u /= norm);
                }
                DirectionKind::Coordinate => {
                    dir.iter_mut().for_each(|u| *u = 0.0);
                    dir[next_coordinate % d] = 1.0;
                    next_coordinate += 1;
                }
            }
            let mut side = |scale: f64, probe: &mut Vec<f64>| {
                probe.copy_from_slice(&eta);
                for (j, &i) in active.iter().enumerate() {
                    let (lo, hi) = ranges[j];
                    probe[i] = (eta[i] + scale * dir[j]).clamp(lo, hi);
                }
                session.evaluate(probe)
            };
            let up = side(delta, &mut probe)?;
            let down = side(-delta, &mut probe)?;
            let slope = (up - down) / (2.0 * delta);
            for (g, u) in grad.iter_mut().zip(&dir) {
                *g += slope * u;
            }
        }
        let scale = match config.direction_kind {
            DirectionKind::Gaussian => d as f64 / config.directions as f64,
            DirectionKind::Coordinate => 1.0,
        };
        let beta = config.momentum;
        for (m, g) in momentum.iter_mut().zip(&grad) {
            *m = beta * *m + (1.0 - beta) * g * scale;
        }
        // linear minimisation over the feasible box, then a convex step
        let gamma = config.step_size.at(k);
        for (j, &i) in active.iter().enumerate() {
            let (lo, hi) = ranges[j];
            let vertex = if momentum[j] > 0.0 {
                lo
            } else if momentum[j] < 0.0 {
                hi
            } else {
                eta[i]
            };
            eta[i] = (eta[i] + gamma * (vertex - eta[i])).clamp(lo, hi);
        }
        session.evaluate(&eta)?;
    }
    Ok(())
}

/// Zeroth-order Frank-Wolfe: symmetric finite differences along
/// `directions` random (or canonical) directions estimate the gradient,
/// momentum smooths it, and each iterate moves toward the box vertex that
/// minimises the momentum direction. One iteration costs
/// `2 * directions + 1` queries.
pub fn frank_wolfe_attack<R: Rng + ?Sized>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    config: &FrankWolfeConfig,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    run_session(oracle, problem, |s| body(s, config, rng))
}
