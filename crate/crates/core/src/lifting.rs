//! Hierarchical lifting: maps a coarse perturbation with `n_level` entries to
//! the full image by piecewise-constant interpolation over a block grid (or
//! over a random grouping of pixels).
//!
//! Block liftings split each channel into a `rows x cols` grid of near-equal
//! rectangles. Coarse variables follow the same channel-innermost layout as
//! images, so a grid as fine as the image is the identity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::problem::{InputTensor, Shape};
use crate::sampling::grid_neighbor_variance;

/// Piecewise-constant lifting; row `i` of the implied 0/1 matrix has its
/// single one in column `assignment[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lifting {
    assignment: Vec<usize>,
    coarse_dim: usize,
    /// Coarse grid, present for block liftings.
    grid: Option<Shape>,
    image: Option<Shape>,
}

/// Start offset of part `k` when `len` is split into `parts` near-equal
/// pieces, the longer pieces first.
fn split_start(len: usize, parts: usize, k: usize) -> usize {
    let (q, r) = (len / parts, len % parts);
    k * q + k.min(r)
}

fn part_of(len: usize, parts: usize, pos: usize) -> usize {
    let (q, r) = (len / parts, len % parts);
    let long = (q + 1) * r;
    if pos < long {
        pos / (q + 1)
    } else {
        r + (pos - long) / q
    }
}

impl Lifting {
    fn block(shape: Shape, rows: usize, cols: usize) -> Self {
        let grid = Shape {
            height: rows,
            width: cols,
            channels: shape.channels,
        };
        let mut assignment = vec![0; shape.len()];
        for (i, a) in assignment.iter_mut().enumerate() {
            let (y, x, c) = shape.coords(i);
            let by = part_of(shape.height, rows, y);
            let bx = part_of(shape.width, cols, x);
            *a = grid.index(by, bx, c);
        }
        Self {
            assignment,
            coarse_dim: grid.len(),
            grid: Some(grid),
            image: Some(shape),
        }
    }

    pub fn identity(shape: Shape) -> Self {
        Self::block(shape, shape.height, shape.width)
    }

    /// Full dimension `n`.
    pub fn full_dim(&self) -> usize {
        self.assignment.len()
    }

    /// Coarse dimension `n_level`.
    pub fn coarse_dim(&self) -> usize {
        self.coarse_dim
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn grid(&self) -> Option<Shape> {
        self.grid
    }

    pub fn is_identity(&self) -> bool {
        self.coarse_dim == self.full_dim() && self.assignment.iter().enumerate().all(|(i, a)| i == *a)
    }

    /// Pixels owned by each coarse variable, in increasing order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.coarse_dim];
        for (i, a) in self.assignment.iter().enumerate() {
            groups[*a].push(i);
        }
        groups
    }

    pub fn apply(&self, eta_hat: &[f64]) -> Result<Vec<f64>> {
        if eta_hat.len() != self.coarse_dim {
            return Err(Error::Contract(format!(
                "coarse vector has {} entries, lifting expects {}",
                eta_hat.len(),
                self.coarse_dim
            )));
        }
        Ok(self.assignment.iter().map(|a| eta_hat[*a]).collect())
    }

    /// Mean intensity of each block, as an image on the coarse grid.
    pub fn block_means(&self, x: &InputTensor) -> Result<InputTensor> {
        let grid = self
            .grid
            .ok_or_else(|| Error::Contract("block means need a block lifting".into()))?;
        if Some(x.shape()) != self.image {
            return Err(Error::Shape(format!(
                "lifting built for {:?}, image is {}",
                self.image,
                x.shape()
            )));
        }
        let mut sums = vec![0.0; self.coarse_dim];
        let mut counts = vec![0usize; self.coarse_dim];
        for (v, a) in x.data().iter().zip(&self.assignment) {
            sums[*a] += v;
            counts[*a] += 1;
        }
        let means = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| (s / *c as f64).clamp(x.lower(), x.upper()))
            .collect();
        InputTensor::new(grid, means, x.lower(), x.upper())
    }
}

/// Block lifting with `n_level` coarse variables for images of `shape`.
///
/// `n_level` is rounded down to `g * g * channels`; each channel is then cut
/// into a `g x g` grid (fewer rows or columns when the image is smaller than
/// `g` along that side). `n_level >= n` gives the identity.
pub fn generate_lifting(n_level: usize, shape: Shape) -> Result<Lifting> {
    if n_level < shape.channels {
        return Err(Error::InvalidLevel(format!(
            "{n_level} coarse variables cannot cover {} channels",
            shape.channels
        )));
    }
    if n_level >= shape.len() {
        return Ok(Lifting::identity(shape));
    }
    let g = ((n_level / shape.channels) as f64).sqrt().floor() as usize;
    let mut g = g.max(1);
    // guard against sqrt rounding for perfect squares
    while (g + 1) * (g + 1) * shape.channels <= n_level {
        g += 1;
    }
    while g * g * shape.channels > n_level {
        g -= 1;
    }
    Ok(Lifting::block(shape, g.min(shape.height), g.min(shape.width)))
}

pub fn apply_lifting(lifting: &Lifting, eta_hat: &[f64]) -> Result<Vec<f64>> {
    lifting.apply(eta_hat)
}

/// Variance of the mean intensities of each block's up-to-8 neighbouring
/// blocks in the same channel.
pub fn block_variance_order(x_hat: &InputTensor, lifting: &Lifting) -> Result<Vec<f64>> {
    let means = lifting.block_means(x_hat)?;
    Ok(grid_neighbor_variance(means.data(), means.shape()))
}

/// Random grouping of `n` pixels into `n_level` groups whose sizes differ by
/// at most one.
pub fn random_lifting(n_level: usize, n: usize, seed: u64) -> Result<Lifting> {
    if n_level == 0 || n_level > n {
        return Err(Error::InvalidLevel(format!(
            "random lifting needs 0 < n_level <= n, got {n_level} for n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels: Vec<usize> = (0..n).collect();
    pixels.shuffle(&mut rng);
    let mut assignment = vec![0; n];
    for (k, p) in pixels.into_iter().enumerate() {
        assignment[p] = k % n_level;
    }
    Ok(Lifting {
        assignment,
        coarse_dim: n_level,
        grid: None,
        image: None,
    })
}

/// Level sizes `n_1, growth * n_1, ...`, capped at `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchySchedule {
    levels: Vec<usize>,
}

impl HierarchySchedule {
    pub fn new(initial: usize, growth: usize, n: usize) -> Result<Self> {
        if initial == 0 || growth < 2 || n == 0 {
            return Err(Error::InvalidLevel(format!(
                "schedule needs initial > 0 and growth >= 2, got {initial} and {growth}"
            )));
        }
        let mut levels = Vec::new();
        let mut size = initial;
        while size < n {
            levels.push(size);
            size = size.saturating_mul(growth);
        }
        levels.push(n);
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Size at zero-based level `index`; the finest level repeats forever.
    pub fn size(&self, index: usize) -> usize {
        self.levels[index.min(self.levels.len() - 1)]
    }
}

/// Pixel boundaries of block `k` when `len` pixels are split into `parts`.
pub fn block_extent(len: usize, parts: usize, k: usize) -> std::ops::Range<usize> {
    split_start(len, parts, k)..split_start(len, parts, k + 1)
}
