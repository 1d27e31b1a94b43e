//! Query oracles: built-in desk-scale classifiers, the pixel-mask defence
//! wrapper and a client for classifiers served by another process.

mod linear;
mod masked;
mod mlp;
mod model_file;
pub mod remote;
pub mod synthetic;

use std::sync::atomic::{AtomicU64, Ordering};

pub use linear::LinearSoftmaxModel;
pub use masked::{variance_mask, MaskedOracle};
pub use mlp::{Activation, DenseLayer, TinyMlp};
pub use model_file::{load_model, parse_model, save_model, write_model, Model};
pub use remote::{RemoteOracle, RemoteSpec};

use crate::error::{Error, Result};
use crate::problem::{InputTensor, QueryOracle, Shape};

/// A classifier evaluated in-process (or through a transport) without any
/// query accounting.
pub trait Classifier {
    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }

    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).logits(x)
    }
}

pub(crate) fn check_input(shape: Shape, x: &[f64]) -> Result<()> {
    if x.len() != shape.len() {
        return Err(Error::Shape(format!(
            "model expects {} inputs ({shape}), got {}",
            shape.len(),
            x.len()
        )));
    }
    Ok(())
}

/// Logits of `model` at `x`, after checking the shape.
pub fn predict<C: Classifier + ?Sized>(model: &C, x: &InputTensor) -> Result<Vec<f64>> {
    if x.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "model expects {}, got {}",
            model.input_shape(),
            x.shape()
        )));
    }
    model.logits(x.data())
}

/// Wraps a classifier as a query oracle with an exact counter.
#[derive(Debug)]
pub struct CountingOracle<C> {
    inner: C,
    count: AtomicU64,
}

impl<C: Classifier> CountingOracle<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: Classifier> QueryOracle for CountingOracle<C> {
    fn input_shape(&self) -> Shape {
        self.inner.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self.inner.input_shape(), x)?;
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.logits(x)
    }

    fn query_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    fn peek(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self.inner.input_shape(), x)?;
        self.inner.logits(x)
    }
}
