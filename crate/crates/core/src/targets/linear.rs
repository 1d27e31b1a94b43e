use crate::error::{Error, Result};
use crate::problem::Shape;

use super::{check_input, Classifier};

/// `logits(x) = W x + b` with `W` stored row-major, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxModel {
    shape: Shape,
    num_classes: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl LinearSoftmaxModel {
    pub fn new(shape: Shape, num_classes: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        let n = shape.len();
        if num_classes < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {num_classes}")));
        }
        if weights.len() != num_classes * n {
            return Err(Error::Shape(format!(
                "weights must be {num_classes}x{n}, got {} values",
                weights.len()
            )));
        }
        if biases.len() != num_classes {
            return Err(Error::Shape(format!(
                "expected {num_classes} biases, got {}",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Contract("model parameters must be finite".into()));
        }
        Ok(Self {
            shape,
            num_classes,
            weights,
            biases,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let n = self.shape.len();
        &self.weights[class * n..(class + 1) * n]
    }

    /// Gradient of the targeted loss with respect to the input at `x`:
    /// the softmax-weighted mean of the non-target rows minus the target row.
    pub fn loss_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let max = z
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .fold(f64::NEG_INFINITY, |m, (_, v)| m.max(*v));
        let n = self.shape.len();
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        for j in (0..self.num_classes).filter(|j| *j != target) {
            let w = (z[j] - max).exp();
            total += w;
            for (g, r) in grad.iter_mut().zip(self.row(j)) {
                *g += w * r;
            }
        }
        for (g, r) in grad.iter_mut().zip(self.row(target)) {
            *g = *g / total - r;
        }
        Ok(grad)
    }
}

impl Classifier for LinearSoftmaxModel {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self.shape, x)?;
        Ok((0..self.num_classes)
            .map(|j| {
                self.row(j).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[j]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{argmax, loss};

    #[test]
    fn reads_off_weight_column() {
        let shape = Shape::new(1, 1, 3).unwrap();
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = LinearSoftmaxModel::new(shape, 3, w, vec![0.0; 3]).unwrap();
        assert_eq!(m.logits(&[0.5, 0.0, 0.0]).unwrap(), vec![0.5, 0.0, 0.0]);
        assert_eq!(m.logits(&[0.0, 0.5, 0.0]).unwrap(), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_weights_predict_bias_argmax() {
        let shape = Shape::new(2, 2, 1).unwrap();
        let m = LinearSoftmaxModel::new(shape, 2, vec![0.0; 8], vec![0.0, 1.0]).unwrap();
        for x in [[0.0; 4], [0.5, -0.5, 0.3, 0.1]] {
            assert_eq!(argmax(&m.logits(&x).unwrap()), 1);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let shape = Shape::new(1, 2, 2).unwrap();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let m = LinearSoftmaxModel::new(shape, 3, w, vec![0.1, -0.2, 0.05]).unwrap();
        let x = [0.1, -0.3, 0.2, 0.05];
        let g = m.loss_gradient(&x, 1).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut up = x;
            let mut dn = x;
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&m.logits(&up).unwrap(), 1).unwrap()
                - loss(&m.logits(&dn).unwrap(), 1).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let shape = Shape::new(1, 1, 2).unwrap();
        assert!(LinearSoftmaxModel::new(shape, 2, vec![0.0; 3], vec![0.0; 2]).is_err());
        assert!(LinearSoftmaxModel::new(shape, 2, vec![0.0; 4], vec![0.0; 3]).is_err());
        assert!(LinearSoftmaxModel::new(shape, 1, vec![0.0; 2], vec![0.0]).is_err());
    }
}
