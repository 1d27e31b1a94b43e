use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::problem::{run_session, AttackError, AttackProblem, AttackResult, Halt, QueryOracle, Session};

use super::vertex_value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SquareConfig {
    /// Initial fraction of the image area covered by a square.
    pub p_init: f64,
    /// Query counts at which the fraction halves.
    pub milestones: Vec<u64>,
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            p_init: 0.1,
            milestones: vec![10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000],
        }
    }
}

impl SquareConfig {
    pub fn fraction(&self, queries: u64) -> f64 {
        let halvings = self.milestones.iter().filter(|m| queries > **m).count();
        self.p_init / f64::powi(2.0, halvings as i32)
    }
}

/// Resampling budget for proposals identical to the current window.
const MAX_RESAMPLES: usize = 20;

fn body<R: Rng + ?Sized>(session: &mut Session<'_>, config: &SquareConfig, rng: &mut R) -> Result<(), Halt> {
    if !(config.p_init > 0.0 && config.p_init <= 1.0) {
        return Err(Error::Config(format!("p_init must be in (0, 1], got {}", config.p_init)).into());
    }
    let problem = session.problem();
    let image = &problem.image;
    let shape = image.shape();
    let eps = problem.epsilon;
    let n = image.len();
    let mut eta = vec![0.0; n];
    session.evaluate(&eta)?;

    let active = problem.active_coordinates();
    if active.is_empty() {
        return Err(Halt::Converged);
    }
    let mut allowed = vec![false; n];
    for &i in &active {
        allowed[i] = true;
    }

    // vertical stripes: one sign per (column, channel)
    let mut sign = vec![0.0; n];
    let stripes: Vec<f64> = (0..shape.width * shape.channels)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    for &i in &active {
        let (_, x, c) = shape.coords(i);
        sign[i] = stripes[x * shape.channels + c];
        eta[i] = vertex_value(image, i, sign[i], eps);
    }
    let mut current = session.evaluate(&eta)?;

    let masked = problem.support.is_some();
    let mut proposal = eta.clone();
    let mut proposal_sign = sign.clone();
    let mut idle = 0;
    loop {
        proposal.copy_from_slice(&eta);
        proposal_sign.copy_from_slice(&sign);
        if masked {
            // squares of a single coordinate
            let i = active[rng.random_range(0..active.len())];
            proposal_sign[i] = -sign[i];
            proposal[i] = vertex_value(image, i, proposal_sign[i], eps);
        } else {
            let p = config.fraction(session.used());
            let area = (p * (shape.height * shape.width) as f64).sqrt().round() as usize;
            let side = area.clamp(1, shape.height.min(shape.width));
            let mut changed = false;
            for _ in 0..MAX_RESAMPLES {
                let y0 = rng.random_range(0..=shape.height - side);
                let x0 = rng.random_range(0..=shape.width - side);
                let signs: Vec<f64> = (0..shape.channels)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        for (c, s) in signs.iter().enumerate() {
                            let i = shape.index(y, x, c);
                            if allowed[i] && sign[i] != *s {
                                changed = true;
                            }
                        }
                    }
                }
                if changed {
                    for y in y0..y0 + side {
                        for x in x0..x0 + side {
                            for (c, s) in signs.iter().enumerate() {
                                let i = shape.index(y, x, c);
                                if allowed[i] {
                                    proposal_sign[i] = *s;
                                    proposal[i] = vertex_value(image, i, *s, eps);
                                }
                            }
                        }
                    }
                    break;
                }
            }
            if !changed {
                idle += 1;
                if idle > 1000 {
                    return Err(Halt::Converged);
                }
                continue;
            }
            idle = 0;
        }
        let value = session.evaluate(&proposal)?;
        if value < current {
            current = value;
            std::mem::swap(&mut eta, &mut proposal);
            std::mem::swap(&mut sign, &mut proposal_sign);
        }
    }
}

/// Random search over square windows set to `+eps` or `-eps` per channel,
/// starting from vertical stripes; a proposal is kept iff it lowers the loss.
pub fn square_attack<R: Rng + ?Sized>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    config: &SquareConfig,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    run_session(oracle, problem, |s| body(s, config, rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_halves_past_milestones() {
        let c = SquareConfig::default();
        assert_eq!(c.fraction(0), 0.1);
        assert_eq!(c.fraction(10), 0.1);
        assert_eq!(c.fraction(11), 0.05);
        assert_eq!(c.fraction(9000), 0.1 / 512.0);
    }
}
