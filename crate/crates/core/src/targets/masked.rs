use crate::error::{Error, Result};
use crate::problem::{InputTensor, QueryOracle, Shape};
use crate::sampling::{neighborhood_variance, variance_ranking};

/// The `k` coordinates of `x` with the largest neighbourhood variance, ties
/// to the lower index, returned in increasing index order.
pub fn variance_mask(x: &InputTensor, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > x.len() {
        return Err(Error::Config(format!(
            "mask size {k} must be in 1..={}",
            x.len()
        )));
    }
    let mut top: Vec<usize> = variance_ranking(&neighborhood_variance(x))
        .into_iter()
        .take(k)
        .collect();
    top.sort_unstable();
    Ok(top)
}

/// Only lets through queries that differ from the clean image on permitted
/// coordinates. Rejected queries are not forwarded and not counted.
#[derive(Debug)]
pub struct MaskedOracle<O> {
    inner: O,
    clean: Vec<f64>,
    allowed: Vec<bool>,
    rejected: u64,
}

impl<O: QueryOracle> MaskedOracle<O> {
    pub fn new(inner: O, clean: &InputTensor, mask: &[usize]) -> Result<Self> {
        if clean.shape() != inner.input_shape() {
            return Err(Error::Shape(format!(
                "clean image {} does not match oracle input {}",
                clean.shape(),
                inner.input_shape()
            )));
        }
        let mut allowed = vec![false; clean.len()];
        for &i in mask {
            *allowed.get_mut(i).ok_or_else(|| {
                Error::Contract(format!("mask index {i} out of range"))
            })? = true;
        }
        Ok(Self {
            inner,
            clean: clean.data().to_vec(),
            allowed,
            rejected: 0,
        })
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: QueryOracle> QueryOracle for MaskedOracle<O> {
    fn input_shape(&self) -> Shape {
        self.inner.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() == self.clean.len() {
            if let Some(i) = (0..x.len()).find(|&i| !self.allowed[i] && x[i] != self.clean[i]) {
                self.rejected += 1;
                return Err(Error::Contract(format!(
                    "query perturbs coordinate {i} outside the mask"
                )));
            }
        }
        self.inner.query(x)
    }

    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }

    fn peek(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner.peek(x)
    }
}
