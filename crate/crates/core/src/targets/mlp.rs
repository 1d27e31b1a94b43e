use std::str::FromStr;

use crate::error::{Error, Result};
use crate::problem::Shape;

use super::{check_input, Classifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// `out = W in + b`, `W` row-major with `outputs` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs || biases.len() != outputs {
            return Err(Error::Shape(format!(
                "layer {outputs}x{inputs} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            biases,
        })
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Small fully connected network; the activation follows every layer but
/// the last.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp {
    shape: Shape,
    activation: Activation,
    layers: Vec<DenseLayer>,
}

impl TinyMlp {
    pub fn new(shape: Shape, activation: Activation, layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Shape("network needs at least one layer".into()));
        };
        if last.outputs < 2 {
            return Err(Error::Shape("network needs at least 2 outputs".into()));
        }
        let mut width = shape.len();
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs != width {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    layer.inputs
                )));
            }
            width = layer.outputs;
        }
        Ok(Self {
            shape,
            activation,
            layers,
        })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }
}

impl Classifier for TinyMlp {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self.shape, x)?;
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h)
    }
}
