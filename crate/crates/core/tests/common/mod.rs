#![allow(dead_code)]

use dfo_attack::problem::{argmax, InputTensor, QueryOracle, Shape};
use dfo_attack::targets::synthetic::{random_image, random_linear_model};
use dfo_attack::targets::{Classifier, LinearSoftmaxModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Linear target, clean image, its class and a different target class.
pub struct Instance {
    pub model: LinearSoftmaxModel,
    pub image: InputTensor,
    pub original: usize,
    pub target: usize,
}

pub fn instance(shape: Shape, classes: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_linear_model(shape, classes, &mut rng);
    let image = random_image(shape, &mut rng);
    let original = argmax(&model.logits(image.data()).unwrap());
    let mut target = rng.random_range(0..classes - 1);
    if target >= original {
        target += 1;
    }
    Instance {
        model,
        image,
        original,
        target,
    }
}

/// Minimiser of the targeted loss over the `eps` box around the clean
/// image, by sign-gradient descent with the analytic gradient. For these
/// targets it ends on a vertex of the box.
pub fn loss_optimal_point(inst: &Instance, eps: f64) -> Vec<f64> {
    let x = inst.image.data();
    let (lo, hi) = (inst.image.lower(), inst.image.upper());
    let mut eta = vec![0.0; x.len()];
    let mut point = x.to_vec();
    for it in 0..300 {
        let g = inst.model.loss_gradient(&point, inst.target).unwrap();
        let step = eps * 0.2 / (1.0 + it as f64 / 10.0);
        for i in 0..eta.len() {
            eta[i] = (eta[i] - step * g[i].signum()).clamp((-eps).max(lo - x[i]), eps.min(hi - x[i]));
            point[i] = x[i] + eta[i];
        }
    }
    point
}

/// Smallest epsilon, to `1e-4`, at which the loss-optimal vertex is
/// classified as the target: a `1e-3` scan refined by a `1e-4` scan.
pub fn min_vertex_energy(inst: &Instance) -> Option<f64> {
    let hits = |eps: f64| argmax(&inst.model.logits(&loss_optimal_point(inst, eps)).unwrap()) == inst.target;
    let coarse = (1..=500).map(|k| k as f64 * 1e-3).find(|e| hits(*e))?;
    (1..=10).map(|k| coarse - 1e-3 + k as f64 * 1e-4).find(|e| hits(*e))
}

/// Counts queries and tracks the worst budget or range violation seen.
pub struct Auditor<O> {
    pub inner: O,
    pub clean: Vec<f64>,
    pub epsilon: f64,
    pub lower: f64,
    pub upper: f64,
    pub seen: u64,
    pub worst_budget: f64,
    pub worst_range: f64,
    pub queries: Vec<Vec<f64>>,
    pub keep: bool,
}

impl<O: QueryOracle> Auditor<O> {
    pub fn new(inner: O, image: &InputTensor, epsilon: f64) -> Self {
        Self {
            inner,
            clean: image.data().to_vec(),
            epsilon,
            lower: image.lower(),
            upper: image.upper(),
            seen: 0,
            worst_budget: 0.0,
            worst_range: 0.0,
            queries: Vec::new(),
            keep: false,
        }
    }
}

impl<O: QueryOracle> QueryOracle for Auditor<O> {
    fn input_shape(&self) -> Shape {
        self.inner.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn query(&mut self, x: &[f64]) -> dfo_attack::Result<Vec<f64>> {
        self.seen += 1;
        for (v, c) in x.iter().zip(&self.clean) {
            self.worst_budget = self.worst_budget.max((v - c).abs() - self.epsilon);
            self.worst_range = self
                .worst_range
                .max(self.lower - v)
                .max(v - self.upper);
        }
        if self.keep {
            self.queries.push(x.to_vec());
        }
        self.inner.query(x)
    }

    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }

    fn peek(&self, x: &[f64]) -> dfo_attack::Result<Vec<f64>> {
        self.inner.peek(x)
    }
}

/// Neighbour variance by explicit enumeration of the 3x3 window.
pub fn brute_variance(x: &[f64], shape: Shape) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for y in 0..shape.height as isize {
        for xx in 0..shape.width as isize {
            for c in 0..shape.channels {
                let mut vals = Vec::new();
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y + dy, xx + dx);
                        if ny < 0 || nx < 0 || ny >= shape.height as isize || nx >= shape.width as isize {
                            continue;
                        }
                        vals.push(x[shape.index(ny as usize, nx as usize, c)]);
                    }
                }
                if vals.is_empty() {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                out[shape.index(y as usize, xx as usize, c)] =
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            }
        }
    }
    out
}

/// Minimum of `c . p` over a `points`-per-side grid on `[lo, hi]`.
pub fn grid_minimum(c: &[f64], lo: &[f64], hi: &[f64], points: usize) -> f64 {
    let b = c.len();
    let mut idx = vec![0usize; b];
    let mut best = f64::INFINITY;
    loop {
        let v: f64 = (0..b)
            .map(|i| {
                let t = idx[i] as f64 / (points - 1) as f64;
                c[i] * (lo[i] * (1.0 - t) + hi[i] * t)
            })
            .sum();
        best = best.min(v);
        let mut k = 0;
        loop {
            if k == b {
                return best;
            }
            idx[k] += 1;
            if idx[k] < points {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
