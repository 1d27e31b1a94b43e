//! Random desk-scale targets for demos and tests.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::problem::{InputTensor, Shape, DEFAULT_LOWER, DEFAULT_UPPER};

use super::LinearSoftmaxModel;

/// Linear classifier with `N(0, 1/n)` weights and `N(0, 0.1^2)` biases.
pub fn random_linear_model<R: Rng + ?Sized>(
    shape: Shape,
    num_classes: usize,
    rng: &mut R,
) -> LinearSoftmaxModel {
    let n = shape.len();
    let w = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid sigma");
    let b = Normal::new(0.0, 0.1).expect("valid sigma");
    let weights = (0..num_classes * n).map(|_| w.sample(rng)).collect();
    let biases = (0..num_classes).map(|_| b.sample(rng)).collect();
    LinearSoftmaxModel::new(shape, num_classes, weights, biases).expect("consistent dimensions")
}

/// Image with pixels uniform in `[-0.45, 0.45]`, inside the default range.
pub fn random_image<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> InputTensor {
    let data = (0..shape.len()).map(|_| rng.random_range(-0.45..=0.45)).collect();
    InputTensor::new(shape, data, DEFAULT_LOWER, DEFAULT_UPPER).expect("pixels in range")
}
