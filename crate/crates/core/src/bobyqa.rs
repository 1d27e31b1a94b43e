//! Model-based DFO attack.
//!
//! Each batch optimises the loss over `b` coarse coordinates chosen by the
//! sampling module, with every coarse coordinate lifted to a block of pixels.
//! Inside a batch we keep `b + 1` samples, fit a linear model
//! `m(p) = a + c . p` through them by interpolation, minimise the model over
//! the intersection of the feasible box and an l-infinity trust region around
//! the best sample, query the minimiser, and swap it into the sample set in
//! place of the sample farthest from the best one. A batch costs exactly
//! `kappa` queries: `b` for the initial model (the centre loss is carried
//! over from the previous batch) and `kappa - b` trust-region iterations.
//!
//! The driver sweeps batches over a level, folds each batch's best step into
//! the perturbation, then moves to a 4x finer block grid, until the target is
//! hit or the query budget runs out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lifting::{block_variance_order, generate_lifting, HierarchySchedule};
use crate::problem::{
    coordinate_bounds, project, AttackError, AttackProblem, AttackResult, FeasibleBox, Halt,
    QueryOracle, Session, StopReason,
};
use crate::sampling::{neighborhood_variance, SamplingPlan, SamplingStrategy, Sweep};

/// `m(p) = intercept + gradient . p`. The quadratic term is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub intercept: f64,
    pub gradient: Vec<f64>,
    /// Set when the interpolation system was rank deficient and the
    /// minimum-norm least-squares fit was used instead.
    pub degenerate: bool,
}

impl LinearSurrogate {
    pub fn value(&self, p: &[f64]) -> f64 {
        self.intercept + self.gradient.iter().zip(p).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn is_flat(&self) -> bool {
        self.gradient.iter().all(|c| *c == 0.0)
    }
}

/// Sample locations in the batch sub-space and their losses.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSet {
    pub points: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

impl InterpolationSet {
    /// Index of the smallest loss, earliest on ties.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.losses.iter().enumerate() {
            if *l < self.losses[best] {
                best = i;
            }
        }
        best
    }

    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_index()]
    }

    pub fn fit(&self) -> LinearSurrogate {
        fit_linear_model(&self.points, &self.losses)
    }

    /// Adds a sample and, if that overflows `capacity`, drops the sample
    /// farthest from the (new) best one.
    fn push_bounded(&mut self, point: Vec<f64>, loss: f64, capacity: usize) {
        self.points.push(point);
        self.losses.push(loss);
        if self.points.len() <= capacity {
            return;
        }
        let best = self.best_index();
        let center = self.points[best].clone();
        let mut far = None;
        let mut far_dist = f64::NEG_INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            if i == best {
                continue;
            }
            let d: f64 = p.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
            if d > far_dist {
                far_dist = d;
                far = Some(i);
            }
        }
        if let Some(i) = far {
            self.points.remove(i);
            self.losses.remove(i);
        }
    }
}

/// Interpolating linear model through `points` (each of length `b`).
///
/// Solves `[1 P] [a; c] = losses` through an SVD of the column-equilibrated
/// system. Rank deficiency (or too few points) yields the minimum-norm
/// least-squares solution with `degenerate` set.
pub fn fit_linear_model(points: &[Vec<f64>], losses: &[f64]) -> LinearSurrogate {
    let m = points.len();
    let dim = points.first().map_or(0, Vec::len);
    if m == 0 {
        return LinearSurrogate {
            intercept: 0.0,
            gradient: vec![0.0; dim],
            degenerate: true,
        };
    }
    let cols = dim + 1;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    columns.push(vec![1.0; m]);
    for k in 0..dim {
        columns.push(points.iter().map(|p| p[k]).collect());
    }
    let mut scale = vec![1.0; cols];
    for (col, s) in columns.iter_mut().zip(scale.iter_mut()) {
        let norm = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > 0.0 {
            *s = norm;
            col.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let (sigma, v) = jacobi_svd(&mut columns);
    let max_sv = sigma.iter().cloned().fold(0.0, f64::max);
    let tol = max_sv * 1e-12 * (m.max(cols) as f64);
    let mut coef = vec![0.0; cols];
    let mut rank = 0;
    for (k, s) in sigma.iter().enumerate() {
        if *s > tol {
            rank += 1;
            // columns[k] = sigma_k * u_k
            let w = dot(&columns[k], losses) / (s * s);
            for (c, vk) in coef.iter_mut().zip(&v[k]) {
                *c += w * vk;
            }
        }
    }
    let finite = |c: f64| if c.is_finite() { c } else { 0.0 };
    LinearSurrogate {
        intercept: finite(coef[0] / scale[0]),
        gradient: (1..cols).map(|k| finite(coef[k] / scale[k])).collect(),
        degenerate: rank < cols,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi SVD of the matrix whose columns are `columns`.
///
/// On return `columns[k] = sigma_k * u_k` and the result holds the
/// singular values and the right singular vectors `v_k`.
fn jacobi_svd(columns: &mut [Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    const MAX_SWEEPS: usize = 80;
    let n = columns.len();
    let m = columns.first().map_or(0, Vec::len);
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|k| (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * m.max(1) as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&columns[p], &columns[p]);
                let beta = dot(&columns[q], &columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut *columns, &mut v[..]] {
                    let (head, tail) = vecs.split_at_mut(q);
                    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = columns.iter().map(|c| dot(c, c).sqrt()).collect();
    (sigma, v)
}

/// Exact minimiser of `c . p` over `max(a_i, -radius) <= p_i <= min(b_i, radius)`.
pub fn solve_trust_region_step(model: &LinearSurrogate, bounds: &FeasibleBox, radius: f64) -> Vec<f64> {
    model
        .gradient
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(c, (a, b))| {
            if *c > 0.0 {
                a.max(-radius)
            } else if *c < 0.0 {
                b.min(radius)
            } else {
                0.0
            }
        })
        .collect()
}

/// Trust-region constants; radii are fractions of epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionConfig {
    pub initial_fraction: f64,
    pub shrink: f64,
    pub expand: f64,
    /// Reduction ratio below which a step counts as a failure.
    pub accept_ratio: f64,
    /// Reduction ratio above which the radius grows.
    pub expand_ratio: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            initial_fraction: 0.5,
            shrink: 0.5,
            expand: 2.0,
            accept_ratio: 0.1,
            expand_ratio: 0.7,
        }
    }
}

/// Current radius plus the update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionState {
    pub radius: f64,
    pub max_radius: f64,
    pub config: TrustRegionConfig,
}

impl TrustRegionState {
    pub fn new(config: TrustRegionConfig, epsilon: f64) -> Self {
        Self {
            radius: (config.initial_fraction * epsilon).min(epsilon),
            max_radius: epsilon,
            config,
        }
    }

    pub fn update(&mut self, rho: f64) {
        if rho < self.config.accept_ratio {
            self.radius *= self.config.shrink;
        } else if rho > self.config.expand_ratio {
            self.radius = (self.radius * self.config.expand).min(self.max_radius);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BobyqaConfig {
    pub batch_size: usize,
    /// Queries per batch.
    pub kappa: usize,
    pub initial_level: usize,
    pub level_growth: usize,
    pub strategy: SamplingStrategy,
    /// Coarse-to-fine block liftings; off means optimising pixels directly.
    pub hierarchical: bool,
    pub trust_region: TrustRegionConfig,
}

impl Default for BobyqaConfig {
    fn default() -> Self {
        Self {
            batch_size: 25,
            kappa: 50,
            initial_level: 12,
            level_growth: 4,
            strategy: SamplingStrategy::Variance,
            hierarchical: true,
            trust_region: TrustRegionConfig::default(),
        }
    }
}

impl BobyqaConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.kappa < self.batch_size + 1 {
            return Err(Error::Config(format!(
                "kappa = {} must be at least batch size + 1 = {}",
                self.kappa,
                self.batch_size + 1
            )));
        }
        if self.level_growth < 2 || self.initial_level == 0 {
            return Err(Error::Config("level schedule needs n_1 > 0 and growth >= 2".into()));
        }
        let tr = &self.trust_region;
        if !(tr.shrink > 0.0 && tr.shrink < 1.0 && tr.expand > 1.0)
            || !(tr.accept_ratio > 0.0 && tr.accept_ratio < 1.0)
            || !(tr.initial_fraction > 0.0 && tr.initial_fraction <= 1.0)
        {
            return Err(Error::Config(format!("trust-region constants out of range: {tr:?}")));
        }
        Ok(())
    }
}

/// Result of one batch: the best step in the batch sub-space, its loss and
/// the queries spent. `stop` is set when the batch ended the attack.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub step: Vec<f64>,
    pub loss: f64,
    pub queries: u64,
    pub stop: Option<StopReason>,
}

/// Sub-space of one batch: coordinate `i` moves every pixel of `groups[i]`.
struct Subspace<'g> {
    groups: Vec<&'g [usize]>,
    bounds: FeasibleBox,
}

impl<'g> Subspace<'g> {
    fn new(problem: &AttackProblem, eta: &[f64], groups: Vec<&'g [usize]>) -> Self {
        let image = &problem.image;
        let x = image.data();
        let (lower, upper) = groups
            .iter()
            .map(|g| {
                g.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), &r| {
                    let (a, b) =
                        coordinate_bounds(x[r], eta[r], problem.epsilon, image.lower(), image.upper());
                    (lo.max(a), hi.min(b))
                })
            })
            .unzip();
        Self {
            groups,
            bounds: FeasibleBox { lower, upper },
        }
    }

    /// Drops coordinates whose feasible interval has collapsed to a point.
    fn without_frozen(self, epsilon: f64) -> Self {
        let keep: Vec<usize> = (0..self.groups.len())
            .filter(|&i| self.bounds.upper[i] - self.bounds.lower[i] > f64::EPSILON * epsilon)
            .collect();
        Self {
            groups: keep.iter().map(|&i| self.groups[i]).collect(),
            bounds: FeasibleBox {
                lower: keep.iter().map(|&i| self.bounds.lower[i]).collect(),
                upper: keep.iter().map(|&i| self.bounds.upper[i]).collect(),
            },
        }
    }

    fn dim(&self) -> usize {
        self.groups.len()
    }

    fn lift_into(&self, eta: &[f64], p: &[f64], problem: &AttackProblem, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(eta);
        for (g, v) in self.groups.iter().zip(p) {
            for &r in g.iter() {
                out[r] += v;
            }
        }
        project(out, &problem.image, problem.epsilon);
    }
}

struct BatchTracker {
    best_point: Vec<f64>,
    best_loss: f64,
    last_point: Vec<f64>,
    queries: u64,
}

fn initial_step(lower: f64, upper: f64) -> f64 {
    let (down, up) = (-lower, upper);
    let short = down.min(up);
    let side = if short > 0.0 { short } else { down.max(up) };
    if up >= down {
        0.25 * side
    } else {
        -0.25 * side
    }
}

fn evaluate_in(
    session: &mut Session<'_>,
    space: &Subspace<'_>,
    eta: &[f64],
    p: &[f64],
    scratch: &mut Vec<f64>,
    tracker: &mut BatchTracker,
) -> Result<f64, Halt> {
    space.lift_into(eta, p, session.problem(), scratch);
    tracker.last_point.clear();
    tracker.last_point.extend_from_slice(p);
    let loss = session.evaluate(scratch)?;
    tracker.queries += 1;
    if loss < tracker.best_loss {
        tracker.best_loss = loss;
        tracker.best_point = p.to_vec();
    }
    Ok(loss)
}

fn run_batch(
    session: &mut Session<'_>,
    eta: &[f64],
    space: &Subspace<'_>,
    kappa: usize,
    trust_region: TrustRegionConfig,
    center_loss: f64,
    tracker: &mut BatchTracker,
) -> Result<(), Halt> {
    let b = space.dim();
    let problem = session.problem();
    let mut scratch = Vec::with_capacity(eta.len());
    if b == 0 {
        return Ok(());
    }
    let kappa = kappa.min(session.remaining() as usize);
    if kappa == 0 {
        return Err(Halt::Budget);
    }
    let lower = &space.bounds.lower;
    let upper = &space.bounds.upper;
    if kappa < b + 1 {
        // not enough budget for a model: the negative corner, then single
        // coordinate probes until the budget is gone
        evaluate_in(session, space, eta, lower, &mut scratch, tracker)?;
        for i in 0..kappa - 1 {
            let mut p = vec![0.0; b];
            p[i] = initial_step(lower[i], upper[i]);
            evaluate_in(session, space, eta, &p, &mut scratch, tracker)?;
        }
        return Ok(());
    }

    let mut samples = InterpolationSet {
        points: vec![vec![0.0; b]],
        losses: vec![center_loss],
    };
    for i in 0..b {
        let mut p = vec![0.0; b];
        p[i] = initial_step(lower[i], upper[i]);
        let l = evaluate_in(session, space, eta, &p, &mut scratch, tracker)?;
        samples.points.push(p);
        samples.losses.push(l);
    }

    let mut tr = TrustRegionState::new(trust_region, problem.epsilon);
    for _ in 0..(kappa - b) {
        let best = samples.best_index();
        let center = samples.points[best].clone();
        let center_value = samples.losses[best];
        let model = samples.fit();
        let local = FeasibleBox {
            lower: lower.iter().zip(&center).map(|(a, x)| a - x).collect(),
            upper: upper.iter().zip(&center).map(|(u, x)| u - x).collect(),
        };
        let mut step = solve_trust_region_step(&model, &local, tr.radius);
        let mut predicted = -model.gradient.iter().zip(&step).map(|(c, s)| c * s).sum::<f64>();
        if !(predicted > 0.0) {
            // flat or degenerate model: negative corner of the trust region
            step = local.lower.iter().map(|a| a.max(-tr.radius)).collect();
            if step.iter().all(|s| *s == 0.0) {
                step = local.upper.iter().map(|u| u.min(tr.radius)).collect();
            }
            predicted = 0.0;
        }
        let candidate: Vec<f64> = center.iter().zip(&step).map(|(x, s)| x + s).collect();
        let value = evaluate_in(session, space, eta, &candidate, &mut scratch, tracker)?;
        let actual = center_value - value;
        let rho = if predicted > 0.0 {
            actual / predicted
        } else if actual > 0.0 {
            1.0
        } else {
            0.0
        };
        tr.update(rho);
        samples.push_bounded(candidate, value, b + 1);
    }
    Ok(())
}

/// One batch against `oracle`, starting from perturbation `eta` whose loss
/// is `center_loss`. Coordinate `i` of the batch moves the pixels of
/// `groups[i]`. Queries count against `problem.max_queries`.
pub fn bobyqa_batch(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    eta: &[f64],
    groups: &[Vec<usize>],
    kappa: usize,
    trust_region: TrustRegionConfig,
    center_loss: f64,
) -> Result<BatchOutcome, AttackError> {
    if let Err(error) = problem.validate(oracle.num_classes()) {
        return Err(AttackError { error, queries: 0 });
    }
    let mut session = Session::new(oracle, problem);
    let space = Subspace::new(problem, eta, groups.iter().map(Vec::as_slice).collect());
    let dim = space.dim();
    let mut tracker = BatchTracker {
        best_point: vec![0.0; dim],
        best_loss: center_loss,
        last_point: vec![0.0; dim],
        queries: 0,
    };
    let halt = run_batch(&mut session, eta, &space, kappa, trust_region, center_loss, &mut tracker);
    let stop = match halt {
        Ok(()) => None,
        Err(Halt::Success) => Some(StopReason::Success),
        Err(Halt::Budget) => Some(StopReason::BudgetExhausted),
        Err(Halt::Converged) => Some(StopReason::Converged),
        Err(Halt::Failed(error)) => {
            return Err(AttackError {
                error,
                queries: tracker.queries,
            })
        }
    };
    let step = if stop == Some(StopReason::Success) {
        tracker.last_point
    } else {
        tracker.best_point
    };
    Ok(BatchOutcome {
        step,
        loss: tracker.best_loss,
        queries: tracker.queries,
        stop,
    })
}

/// Coarse coordinates for the current level plus the variance scores used
/// to order them.
fn level_domain(
    problem: &AttackProblem,
    eta: &[f64],
    config: &BobyqaConfig,
    level: usize,
    schedule: Option<&HierarchySchedule>,
) -> Result<(Vec<Vec<usize>>, Option<Vec<f64>>, bool)> {
    let current = problem.image.perturbed(eta)?;
    let want_scores = config.strategy == SamplingStrategy::Variance;
    match schedule {
        Some(schedule) => {
            let lifting = generate_lifting(schedule.size(level), problem.image.shape())?;
            let scores = if want_scores {
                Some(block_variance_order(&current, &lifting)?)
            } else {
                None
            };
            Ok((lifting.groups(), scores, lifting.is_identity()))
        }
        None => {
            let coords = problem.active_coordinates();
            let scores = if want_scores {
                let v = neighborhood_variance(&current);
                Some(coords.iter().map(|&c| v[c]).collect())
            } else {
                None
            };
            Ok((coords.into_iter().map(|c| vec![c]).collect(), scores, true))
        }
    }
}

fn attack_body<R: Rng + ?Sized>(
    session: &mut Session<'_>,
    config: &BobyqaConfig,
    rng: &mut R,
) -> Result<(), Halt> {
    config.validate()?;
    let problem = session.problem();
    let n = problem.image.len();
    let mut eta = vec![0.0; n];
    let mut center = session.evaluate(&eta)?;

    let schedule = if config.hierarchical && problem.support.is_none() {
        Some(HierarchySchedule::new(config.initial_level, config.level_growth, n)?)
    } else {
        None
    };

    let mut level = 0;
    loop {
        session.level = Some(level + 1);
        let (groups, scores, finest) = level_domain(problem, &eta, config, level, schedule.as_ref())?;
        if groups.is_empty() {
            return Err(Halt::Converged);
        }
        let plan = SamplingPlan::new(config.strategy, config.batch_size.min(groups.len()), groups.len())?;
        let sweep = Sweep::start(plan, scores.as_deref(), rng)?;
        let mut spent = 0;
        for j in 0..sweep.num_batches() {
            let selection = sweep.batch(j, rng)?;
            let space = Subspace::new(
                problem,
                &eta,
                selection.indices.iter().map(|&i| groups[i].as_slice()).collect(),
            )
            .without_frozen(problem.epsilon);
            let dim = space.dim();
            let mut tracker = BatchTracker {
                best_point: vec![0.0; dim],
                best_loss: center,
                last_point: vec![0.0; dim],
                queries: 0,
            };
            run_batch(
                session,
                &eta,
                &space,
                config.kappa,
                config.trust_region,
                center,
                &mut tracker,
            )?;
            spent += tracker.queries;
            if tracker.best_loss < center {
                let mut next = Vec::with_capacity(n);
                space.lift_into(&eta, &tracker.best_point, problem, &mut next);
                eta = next;
                center = tracker.best_loss;
            }
            if session.remaining() == 0 {
                return Err(Halt::Budget);
            }
        }
        if finest && spent == 0 {
            // every coordinate is pinned; nothing left to move
            return Err(Halt::Converged);
        }
        if !finest {
            level += 1;
        }
    }
}

/// Full attack: hierarchical levels, variance-ordered batches, linear
/// trust-region models. With `problem.support` set the attack optimises the
/// listed pixels directly (identity lifting).
pub fn bobyqa_attack<R: Rng + ?Sized>(
    oracle: &mut dyn QueryOracle,
    problem: &AttackProblem,
    config: &BobyqaConfig,
    rng: &mut R,
) -> Result<AttackResult, AttackError> {
    crate::problem::run_session(oracle, problem, |s| attack_body(s, config, rng))
}
