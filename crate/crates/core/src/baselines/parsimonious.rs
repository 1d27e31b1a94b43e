use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::lifting::generate_lifting;
use crate::problem::{run_session, AttackError, AttackProblem, AttackResult, Halt, QueryOracle, Session};

use super::vertex_value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParsimoniousConfig {
    /// Blocks per side of each channel at the first level.
    pub initial_grid: usize,
}

impl Default for ParsimoniousConfig {
    fn default() -> Self {
        Self { initial_grid: 2 }
    }
}

fn body<R: Rng + ?Sized>(
    session: &mut Session<'_>,
    config: &ParsimoniousConfig,
    rng: &mut R,
) -> Result<(), Halt> {
    if config.initial_grid == 0 {
        return Err(Error::Config("initial grid must be positive".into()).into());
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
    let mut sign = vec![0.0; n];
    for &i in &active {
        sign[i] = -1.0;
        eta[i] = vertex_value(image, i, -1.0, eps);
    }
    let mut current = session.evaluate(&eta)?;

    let mut grid = config.initial_grid;
    let mut proposal = eta.clone();
    loop {
        // a masked problem works on single coordinates from the start
        let (blocks, finest): (Vec<Vec<usize>>, bool) = if problem.support.is_some() {
            (active.iter().map(|&i| vec![i]).collect(), true)
        } else {
            let lifting = generate_lifting(grid * grid * shape.channels, shape)?;
            (lifting.groups(), lifting.is_identity())
        };
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(rng);
        let mut improved = false;
        for b in order {
            let block = &blocks[b];
            let plus = block.iter().filter(|&&i| sign[i] > 0.0).count();
            let target = if 2 * plus > block.len() { -1.0 } else { 1.0 };
            proposal.copy_from_slice(&eta);
            for &i in block {
                proposal[i] = vertex_value(image, i, target, eps);
            }
            if proposal == eta {
                continue;
            }
            let value = session.evaluate(&proposal)?;
            if value < current {
                current = value;
                eta.copy_from_slice(&proposal);
                for &i in block {
                    sign[i] = target;
                }
                improved = true;
            }
        }
        if !improved {
            if finest {
                return Err(Halt::Converged);
            }
            grid *= 2;
        }
    }
}

/// Greedy flipping of blocks between `-eps` and `+eps`, starting from the
/// all-`-eps` vertex and refining the block grid 4x whenever a full pass
/// finds no improving flip. Stops early at a local optimum of the finest
/// grid.
pub fn parsimonious_attack<R: Rng + ?Sized>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    config: &ParsimoniousConfig,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    run_session(oracle, problem, |s| body(s, config, rng))
}
