//! Problem definition shared by every attack.
//!
//! An attack searches for an additive perturbation `eta` with
//! `max_i |eta_i| <= epsilon` such that `X + eta` stays inside the pixel
//! range `[l, u]` and the oracle's arg-max class becomes the target. The loss
//! minimised by all attacks is
//!
//! ```text
//! L(X, eta) = log(sum_{j != t} softmax_j) - log(softmax_t)
//!           = logsumexp_{j != t}(z_j) - z_t
//! ```
//!
//! where `z` are the oracle's logits. The second form is what we evaluate;
//! the softmax normaliser cancels and the logit-space version never takes
//! `log(0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default pixel range: images normalised to (-1/2, 1/2).
pub const DEFAULT_LOWER: f64 = -0.5;
pub const DEFAULT_UPPER: f64 = 0.5;

/// Slack allowed when checking feasibility of a queried point.
pub const FEASIBILITY_TOL: f64 = 1e-12;

/// `(height, width, channels)` of an image-like tensor. Data is stored
/// row-major with channels innermost: `index = (y * width + x) * channels + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    /// Inverse of [`Shape::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let c = index % self.channels;
        let pixel = index / self.channels;
        (pixel / self.width, pixel % self.width, c)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An image-like point of `[l, u]^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTensor {
    shape: Shape,
    data: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl InputTensor {
    pub fn new(shape: Shape, data: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Contract(format!(
                "lower bound {lower} must be below upper bound {upper}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !(v.is_finite() && *v >= lower && *v <= upper))
        {
            return Err(Error::Contract(format!(
                "element {i} = {} outside [{lower}, {upper}]",
                data[i]
            )));
        }
        Ok(Self {
            shape,
            data,
            lower,
            upper,
        })
    }

    /// Image in the default normalised range.
    pub fn normalized(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DEFAULT_LOWER, DEFAULT_UPPER)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `X + eta`, clamped to the pixel range to absorb rounding.
    pub fn perturbed(&self, eta: &[f64]) -> Result<InputTensor> {
        if eta.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "perturbation of length {} for image of length {}",
                eta.len(),
                self.data.len()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(eta)
            .map(|(x, e)| (x + e).clamp(self.lower, self.upper))
            .collect();
        Ok(InputTensor {
            shape: self.shape,
            data,
            lower: self.lower,
            upper: self.upper,
        })
    }
}

/// Additive perturbation with an l-infinity budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn zeros(n: usize, epsilon: f64) -> Self {
        Self {
            values: vec![0.0; n],
            epsilon,
        }
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Both constraints of the perturbation problem, with slack `tol`.
    pub fn is_feasible_for(&self, image: &InputTensor, tol: f64) -> bool {
        self.values.len() == image.len()
            && self.values.iter().zip(image.data()).all(|(e, x)| {
                e.abs() <= self.epsilon + tol
                    && x + e >= image.lower() - tol
                    && x + e <= image.upper() + tol
            })
    }

    /// Indices with a nonzero entry.
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Targeted-attack goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackObjective {
    pub target: usize,
    pub original: usize,
    pub num_classes: usize,
}

impl AttackObjective {
    pub fn new(target: usize, original: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidObjective(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if target >= num_classes || original >= num_classes {
            return Err(Error::InvalidObjective(format!(
                "classes ({target}, {original}) out of range for {num_classes} classes"
            )));
        }
        if target == original {
            return Err(Error::InvalidObjective(format!(
                "target {target} equals the original class"
            )));
        }
        Ok(Self {
            target,
            original,
            num_classes,
        })
    }
}

/// Black-box classifier access. Every call to [`QueryOracle::query`] is one
/// counted query; [`QueryOracle::peek`] is for bookkeeping only and never
/// touches the counter.
pub trait QueryOracle {
    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    /// Logits for a flat input laid out as described by [`Shape`].
    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>>;

    fn query_count(&self) -> u64;

    fn peek(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<O: QueryOracle + ?Sized> QueryOracle for Box<O> {
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }

    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).query(x)
    }

    fn query_count(&self) -> u64 {
        (**self).query_count()
    }

    fn peek(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).peek(x)
    }
}

/// Targeted loss in logit space.
pub fn loss(logits: &[f64], target: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidObjective(format!(
            "need at least two logits, got {}",
            logits.len()
        )));
    }
    if target >= logits.len() {
        return Err(Error::InvalidObjective(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    if let Some(class) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite { class });
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .fold(f64::NEG_INFINITY, |m, (_, z)| m.max(*z));
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, z)| (z - max).exp())
        .sum();
    Ok(max + sum.ln() - logits[target])
}

/// Index of the largest logit, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn is_success(predicted: usize, target: usize) -> bool {
    predicted == target
}

/// One counted query: returns the loss and the predicted class at `X + eta`.
pub fn evaluate_loss(
    oracle: &mut dyn QueryOracle,
    image: &InputTensor,
    eta: &Perturbation,
    target: usize,
) -> Result<(f64, usize)> {
    if !eta.is_feasible_for(image, FEASIBILITY_TOL) {
        return Err(Error::Contract("queried point is infeasible".into()));
    }
    let x = image.perturbed(&eta.values)?;
    let logits = oracle.query(x.data())?;
    let value = loss(&logits, target)?;
    Ok((value, argmax(&logits)))
}

/// Per-coordinate bounds `[a, b]` on an increment `delta` such that
/// `eta + delta` keeps both the budget and the image constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FeasibleBox {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, delta: &[f64]) -> bool {
        delta.len() == self.len()
            && delta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(d, (a, b))| *d >= *a && *d <= *b)
    }
}

/// Increment bounds for one coordinate.
#[inline]
pub fn coordinate_bounds(x: f64, eta: f64, epsilon: f64, lower: f64, upper: f64) -> (f64, f64) {
    let a = (-epsilon - eta).max(lower - x - eta).min(0.0);
    let b = (epsilon - eta).min(upper - x - eta).max(0.0);
    (a, b)
}

pub fn feasible_box(image: &InputTensor, eta: &Perturbation) -> Result<FeasibleBox> {
    if !eta.is_feasible_for(image, FEASIBILITY_TOL) {
        return Err(Error::Contract(
            "current perturbation violates the budget or image bounds".into(),
        ));
    }
    let (lower, upper) = image
        .data()
        .iter()
        .zip(&eta.values)
        .map(|(x, e)| coordinate_bounds(*x, *e, eta.epsilon, image.lower(), image.upper()))
        .unzip();
    Ok(FeasibleBox { lower, upper })
}

/// Clamp every coordinate of `eta` into the feasible set for `image`.
pub fn project(eta: &mut [f64], image: &InputTensor, epsilon: f64) {
    for (e, x) in eta.iter_mut().zip(image.data()) {
        let lo = (-epsilon).max(image.lower() - x);
        let hi = epsilon.min(image.upper() - x);
        *e = e.clamp(lo, hi);
    }
}

/// Inputs common to every attack.
#[derive(Debug, Clone)]
pub struct AttackProblem {
    pub image: InputTensor,
    pub target: usize,
    pub epsilon: f64,
    pub max_queries: u64,
    /// Coordinates the attack may perturb; `None` means all of them.
    pub support: Option<Vec<usize>>,
}

impl AttackProblem {
    pub fn new(image: InputTensor, target: usize, epsilon: f64, max_queries: u64) -> Self {
        Self {
            image,
            target,
            epsilon,
            max_queries,
            support: None,
        }
    }

    pub fn with_support(mut self, support: Vec<usize>) -> Self {
        self.support = Some(support);
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.target >= num_classes {
            return Err(Error::InvalidObjective(format!(
                "target {} out of range for {num_classes} classes",
                self.target
            )));
        }
        if let Some(support) = &self.support {
            if let Some(i) = support.iter().find(|i| **i >= self.image.len()) {
                return Err(Error::Contract(format!("support index {i} out of range")));
            }
        }
        Ok(())
    }

    /// Coordinates the attack works on, in increasing order.
    pub fn active_coordinates(&self) -> Vec<usize> {
        match &self.support {
            Some(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s
            }
            None => (0..self.image.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Success,
    BudgetExhausted,
    /// The search reached a state from which it makes no further progress.
    Converged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub queries: u64,
    pub perturbation: Perturbation,
    pub final_loss: f64,
    pub final_class: Option<usize>,
    pub level_reached: Option<usize>,
    pub stop: StopReason,
}

/// Attack aborted by an error; `queries` is the count consumed before it.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {queries} queries)")]
pub struct AttackError {
    pub error: Error,
    pub queries: u64,
}

/// Non-local exits from inside an attack loop.
#[derive(Debug)]
pub(crate) enum Halt {
    Success,
    Budget,
    Converged,
    Failed(Error),
}

impl From<Error> for Halt {
    fn from(e: Error) -> Self {
        Halt::Failed(e)
    }
}

/// Query accounting, feasibility checks and success tracking for one run.
pub(crate) struct Session<'a> {
    oracle: &'a mut dyn QueryOracle,
    problem: &'a AttackProblem,
    allowed: Option<Vec<bool>>,
    used: u64,
    point: Vec<f64>,
    best: Option<(f64, usize, Vec<f64>)>,
    success: Option<(f64, usize, Vec<f64>)>,
    pub level: Option<usize>,
}

impl<'a> Session<'a> {
    pub fn new(oracle: &'a mut dyn QueryOracle, problem: &'a AttackProblem) -> Self {
        let allowed = problem.support.as_ref().map(|s| {
            let mut mask = vec![false; problem.image.len()];
            for &i in s {
                mask[i] = true;
            }
            mask
        });
        Self {
            oracle,
            problem,
            allowed,
            used: 0,
            point: vec![0.0; problem.image.len()],
            best: None,
            success: None,
            level: None,
        }
    }

    pub fn problem(&self) -> &'a AttackProblem {
        self.problem
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> u64 {
        self.problem.max_queries.saturating_sub(self.used)
    }

    fn check(&self, eta: &[f64]) -> Result<()> {
        let image = &self.problem.image;
        if eta.len() != image.len() {
            return Err(Error::Shape(format!(
                "perturbation of length {} for image of length {}",
                eta.len(),
                image.len()
            )));
        }
        let eps = self.problem.epsilon + FEASIBILITY_TOL;
        for (i, (e, x)) in eta.iter().zip(image.data()).enumerate() {
            if !(e.abs() <= eps
                && x + e >= image.lower() - FEASIBILITY_TOL
                && x + e <= image.upper() + FEASIBILITY_TOL)
            {
                return Err(Error::Contract(format!(
                    "coordinate {i}: perturbation {e} infeasible"
                )));
            }
            if let Some(allowed) = &self.allowed {
                if *e != 0.0 && !allowed[i] {
                    return Err(Error::Contract(format!(
                        "coordinate {i} is outside the permitted support"
                    )));
                }
            }
        }
        Ok(())
    }

    /// One counted query at `X + eta`. Returns the loss, or halts on success,
    /// budget exhaustion or oracle failure.
    pub fn evaluate(&mut self, eta: &[f64]) -> Result<f64, Halt> {
        if self.used >= self.problem.max_queries {
            return Err(Halt::Budget);
        }
        self.check(eta)?;
        let image = &self.problem.image;
        for ((p, x), e) in self.point.iter_mut().zip(image.data()).zip(eta) {
            *p = (x + e).clamp(image.lower(), image.upper());
        }
        let logits = self.oracle.query(&self.point);
        self.used += 1;
        let logits = logits?;
        if logits.len() != self.oracle.num_classes() {
            return Err(Halt::Failed(Error::Oracle(format!(
                "expected {} logits, got {}",
                self.oracle.num_classes(),
                logits.len()
            ))));
        }
        let value = loss(&logits, self.problem.target)?;
        let class = argmax(&logits);
        if self.best.as_ref().is_none_or(|(b, _, _)| value < *b) {
            self.best = Some((value, class, eta.to_vec()));
        }
        if is_success(class, self.problem.target) {
            self.success = Some((value, class, eta.to_vec()));
            return Err(Halt::Success);
        }
        Ok(value)
    }

    /// Converts the outcome of an attack body into its public result.
    pub fn finish(self, outcome: Halt) -> Result<AttackResult, AttackError> {
        let n = self.problem.image.len();
        let epsilon = self.problem.epsilon;
        let stop = match outcome {
            Halt::Success => StopReason::Success,
            Halt::Budget => StopReason::BudgetExhausted,
            Halt::Converged => StopReason::Converged,
            Halt::Failed(error) => {
                return Err(AttackError {
                    error,
                    queries: self.used,
                })
            }
        };
        let chosen = if stop == StopReason::Success {
            self.success
        } else {
            self.best
        };
        let (final_loss, final_class, values) = match chosen {
            Some((l, c, v)) => (l, Some(c), v),
            None => (f64::NAN, None, vec![0.0; n]),
        };
        Ok(AttackResult {
            success: stop == StopReason::Success,
            queries: self.used,
            perturbation: Perturbation { values, epsilon },
            final_loss,
            final_class,
            level_reached: self.level,
            stop,
        })
    }
}

/// Runs an attack body inside a session and packages the outcome. The body
/// only returns normally when it has nothing left to try.
pub(crate) fn run_session<F>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    body: F,
) -> Result<AttackResult, AttackError>
where
    F: FnOnce(&mut Session<'_>) -> Result<(), Halt>,
{
    if let Err(error) = problem.validate(oracle.num_classes()) {
        return Err(AttackError { error, queries: 0 });
    }
    let mut session = Session::new(oracle, problem);
    let outcome = match body(&mut session) {
        Ok(()) => Halt::Converged,
        Err(h) => h,
    };
    session.finish(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(loss(&[2.0, 0.0], 1).unwrap(), 2.0);
        let v = loss(&[1.0, 1.0, 1.0], 2).unwrap();
        // logsumexp({1, 1}) - 1 = ln(2e) - 1
        let expected = (2.0 * 1f64.exp()).ln() - 1.0;
        assert!(close(v, expected, 1e-15));
        assert!(close(v, 0.693147, 1e-6));
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(loss(&[1.0], 0), Err(Error::InvalidObjective(_))));
        assert!(matches!(
            loss(&[1.0, f64::NAN], 0),
            Err(Error::NonFinite { class: 1 })
        ));
        assert!(loss(&[1e300, -1e300, 5.0], 1).unwrap().is_finite());
    }

    #[test]
    fn feasible_box_examples() {
        let b = |x: f64, e: f64| coordinate_bounds(x, e, 0.1, -0.5, 0.5);
        let (a, u) = b(0.0, 0.0);
        assert!(close(a, -0.1, 1e-15) && close(u, 0.1, 1e-15));
        let (a, u) = b(0.45, 0.0);
        assert!(close(a, -0.1, 1e-15) && close(u, 0.05, 1e-12));
        let (a, u) = b(0.0, 0.1);
        assert!(close(a, -0.2, 1e-15) && close(u, 0.0, 1e-15));
    }

    #[test]
    fn feasible_box_rejects_infeasible_point() {
        let shape = Shape::new(1, 1, 1).unwrap();
        let image = InputTensor::normalized(shape, vec![0.45]).unwrap();
        let eta = Perturbation {
            values: vec![0.08],
            epsilon: 0.1,
        };
        assert!(matches!(feasible_box(&image, &eta), Err(Error::Contract(_))));
    }

    #[test]
    fn input_tensor_invariants() {
        let shape = Shape::new(1, 2, 1).unwrap();
        assert!(InputTensor::normalized(shape, vec![0.0]).is_err());
        assert!(InputTensor::normalized(shape, vec![0.0, 0.7]).is_err());
        assert!(InputTensor::new(shape, vec![0.0, 0.0], 0.5, 0.5).is_err());
        assert!(Shape::new(0, 1, 1).is_err());
    }

    #[test]
    fn objective_requires_distinct_classes() {
        assert!(AttackObjective::new(1, 1, 3).is_err());
        assert!(AttackObjective::new(3, 1, 3).is_err());
        assert!(AttackObjective::new(0, 1, 1).is_err());
        assert!(AttackObjective::new(0, 1, 2).is_ok());
    }

    #[test]
    fn success_predicate() {
        assert!(is_success(3, 3));
        assert!(!is_success(3, 4));
    }

    #[test]
    fn shape_index_roundtrip() {
        let s = Shape::new(3, 4, 2).unwrap();
        for i in 0..s.len() {
            let (y, x, c) = s.coords(i);
            assert_eq!(s.index(y, x, c), i);
        }
    }
}
