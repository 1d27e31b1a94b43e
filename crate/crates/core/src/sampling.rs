//! Domain sub-sampling: which `b` coordinates of the current optimisation
//! domain are active in each batch.
//!
//! Three orderings are supported. `Random` draws a fresh set every batch.
//! `Ordered` fixes a random permutation per sweep and walks it in slices.
//! `Variance` ranks coordinates by the variance of their 8 in-channel
//! neighbours, highest first, and walks that ranking in slices. For the last
//! two, one sweep of `ceil(n / b)` batches covers every coordinate once; the
//! final batch is shorter when `b` does not divide `n`.

use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{InputTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Random,
    Ordered,
    #[default]
    Variance,
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "ordered" => Ok(Self::Ordered),
            "variance" => Ok(Self::Variance),
            other => Err(Error::Config(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

/// Selected coordinates for batch `batch`; equivalent to the 0/1 matrix
/// whose column `q` has its one in row `indices[q]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionSet {
    pub indices: Vec<usize>,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    pub strategy: SamplingStrategy,
    pub batch_size: usize,
    pub domain_size: usize,
}

impl SamplingPlan {
    pub fn new(strategy: SamplingStrategy, batch_size: usize, domain_size: usize) -> Result<Self> {
        if batch_size == 0 || domain_size == 0 {
            return Err(Error::InvalidPlan(format!(
                "batch size {batch_size} and domain size {domain_size} must be positive"
            )));
        }
        if batch_size > domain_size {
            return Err(Error::InvalidPlan(format!(
                "batch size {batch_size} exceeds domain size {domain_size}"
            )));
        }
        Ok(Self {
            strategy,
            batch_size,
            domain_size,
        })
    }

    /// Batches per sweep.
    pub fn num_batches(&self) -> usize {
        self.domain_size.div_ceil(self.batch_size)
    }
}

/// Population variance of each cell's up-to-8 neighbours within its channel
/// on a `height x width x channels` grid.
pub(crate) fn grid_neighbor_variance(values: &[f64], shape: Shape) -> Vec<f64> {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..shape.channels {
                let mut neigh = [0.0f64; 8];
                let mut count = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h || nx >= w {
                            continue;
                        }
                        neigh[count] = values[shape.index(ny as usize, nx as usize, c)];
                        count += 1;
                    }
                }
                let var = if count > 0 {
                    let k = count as f64;
                    let mean = neigh[..count].iter().sum::<f64>() / k;
                    neigh[..count].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k
                } else {
                    0.0
                };
                out[shape.index(y as usize, x as usize, c)] = var;
            }
        }
    }
    out
}

pub fn neighborhood_variance(x_hat: &InputTensor) -> Vec<f64> {
    grid_neighbor_variance(x_hat.data(), x_hat.shape())
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn variance_ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Coordinate order for one sweep over the domain.
#[derive(Debug, Clone)]
pub struct Sweep {
    plan: SamplingPlan,
    order: Vec<usize>,
}

impl Sweep {
    /// `scores` is required for the variance strategy and ignored otherwise.
    pub fn start<R: Rng + ?Sized>(
        plan: SamplingPlan,
        scores: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Self> {
        let order = match plan.strategy {
            SamplingStrategy::Variance => {
                let scores = scores.ok_or_else(|| {
                    Error::InvalidPlan("variance sampling needs a variance map".into())
                })?;
                if scores.len() != plan.domain_size {
                    return Err(Error::InvalidPlan(format!(
                        "variance map has {} entries for a domain of {}",
                        scores.len(),
                        plan.domain_size
                    )));
                }
                variance_ranking(scores)
            }
            SamplingStrategy::Ordered => {
                let mut perm: Vec<usize> = (0..plan.domain_size).collect();
                perm.shuffle(rng);
                perm
            }
            SamplingStrategy::Random => Vec::new(),
        };
        Ok(Self { plan, order })
    }

    pub fn plan(&self) -> SamplingPlan {
        self.plan
    }

    pub fn num_batches(&self) -> usize {
        self.plan.num_batches()
    }

    pub fn batch<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Result<SelectionSet> {
        let SamplingPlan {
            batch_size: b,
            domain_size: n,
            ..
        } = self.plan;
        let indices = match self.plan.strategy {
            SamplingStrategy::Random => index::sample(rng, n, b).into_vec(),
            _ => {
                let start = j * b;
                if start >= n {
                    return Err(Error::InvalidPlan(format!(
                        "batch {j} starts past the end of a domain of {n}"
                    )));
                }
                self.order[start..(start + b).min(n)].to_vec()
            }
        };
        Ok(SelectionSet { indices, batch: j })
    }
}

/// Selection for batch `j` over a domain of `domain_size` coordinates whose
/// intensities are `x_hat` (the image itself, or block means at coarse
/// levels).
pub fn generate_sampling_matrix<R: Rng + ?Sized>(
    x_hat: &InputTensor,
    domain_size: usize,
    batch_size: usize,
    j: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<SelectionSet> {
    let plan = SamplingPlan::new(strategy, batch_size, domain_size)?;
    let scores = match strategy {
        SamplingStrategy::Variance => Some(neighborhood_variance(x_hat)),
        _ => None,
    };
    Sweep::start(plan, scores.as_deref(), rng)?.batch(j, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn peak3() -> InputTensor {
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        InputTensor::new(Shape::new(3, 3, 1).unwrap(), d, 0.0, 1.0).unwrap()
    }

    #[test]
    fn constant_image_has_zero_variance() {
        let x = InputTensor::normalized(Shape::new(4, 5, 3).unwrap(), vec![0.25; 60]).unwrap();
        assert!(neighborhood_variance(&x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_peak_variances() {
        let v = neighborhood_variance(&peak3());
        for corner in [0, 2, 6, 8] {
            assert!((v[corner] - 2.0 / 9.0).abs() < 1e-15);
        }
        assert_eq!(v[4], 0.0);
        // edge pixels see five neighbours, one of them the peak
        assert!((v[1] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn variance_batch_picks_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = generate_sampling_matrix(&peak3(), 9, 4, 0, SamplingStrategy::Variance, &mut rng)
            .unwrap();
        assert_eq!(s.indices, vec![0, 2, 6, 8]);
    }

    #[test]
    fn full_cover_with_single_batch() {
        let x = InputTensor::normalized(Shape::new(2, 2, 1).unwrap(), vec![0.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for strategy in [
            SamplingStrategy::Random,
            SamplingStrategy::Ordered,
            SamplingStrategy::Variance,
        ] {
            let mut s = generate_sampling_matrix(&x, 4, 4, 0, strategy, &mut rng)
                .unwrap()
                .indices;
            s.sort_unstable();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn sweep_partitions_domain_with_short_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = SamplingPlan::new(SamplingStrategy::Ordered, 4, 10).unwrap();
        let sweep = Sweep::start(plan, None, &mut rng).unwrap();
        assert_eq!(sweep.num_batches(), 3);
        let mut all: Vec<usize> = (0..3)
            .flat_map(|j| sweep.batch(j, &mut rng).unwrap().indices)
            .collect();
        assert_eq!(sweep.batch(2, &mut rng).unwrap().indices.len(), 2);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(sweep.batch(3, &mut rng).is_err());
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(matches!(
            SamplingPlan::new(SamplingStrategy::Random, 5, 4),
            Err(Error::InvalidPlan(_))
        ));
    }

    #[test]
    fn ranking_is_stable_descending() {
        assert_eq!(variance_ranking(&[1.0, 3.0, 1.0, 3.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn strategy_parses() {
        assert_eq!(
            "Variance".parse::<SamplingStrategy>().unwrap(),
            SamplingStrategy::Variance
        );
        assert!("zigzag".parse::<SamplingStrategy>().is_err());
    }
}
