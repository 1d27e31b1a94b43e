mod common;

use dfo_attack::baselines::{
    frank_wolfe_attack, parsimonious_attack, square_attack, DirectionKind, FrankWolfeConfig, ParsimoniousConfig,
    SquareConfig, StepSize,
};
use dfo_attack::bobyqa::{bobyqa_batch, TrustRegionConfig};
use dfo_attack::problem::{loss, AttackProblem, InputTensor, Shape, StopReason};
use dfo_attack::targets::{load_model, Classifier, CountingOracle, LinearSoftmaxModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 0.1;

/// Two classes, so the targeted loss `z_1 - z_0` is exactly affine with
/// gradient `slope`. The target bias makes success impossible inside the
/// budget, which forces every attack to its stopping rule.
fn affine_target(slope: &[f64]) -> LinearSoftmaxModel {
    let d = slope.len();
    let shape = Shape::new(1, 1, d).unwrap();
    let mut weights = vec![0.0; d];
    weights.extend_from_slice(slope);
    LinearSoftmaxModel::new(shape, 2, weights, vec![-100.0, 0.0]).unwrap()
}

fn interior_image(d: usize) -> InputTensor {
    let data = (0..d).map(|i| -0.2 + 0.4 * i as f64 / d as f64).collect();
    InputTensor::normalized(Shape::new(1, 1, d).unwrap(), data).unwrap()
}

fn sign_vertex(slope: &[f64]) -> Vec<f64> {
    slope.iter().map(|g| -EPS * g.signum()).collect()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "coordinate {i}: {g} vs {w}");
    }
}

#[test]
fn mlp_fixture_matches_hand_computed_logits() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let model = load_model(format!("{dir}/mlp_2_2_2.model")).unwrap();
    let vectors = std::fs::read_to_string(format!("{dir}/mlp_2_2_2.vectors")).unwrap();
    let mut checked = 0;
    for line in vectors.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty()) {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let z = model.logits(&v[..2]).unwrap();
        assert_close(&z, &v[2..], 1e-12);
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn batch_on_affine_loss_ends_at_sign_vertex() {
    let slope = [0.7, -1.3, 0.2, -0.05];
    let model = affine_target(&slope);
    let image = interior_image(slope.len());
    let problem = AttackProblem::new(image.clone(), 0, EPS, 1_000);
    let mut oracle = CountingOracle::new(&model);
    let clean = loss(&model.logits(image.data()).unwrap(), 0).unwrap();
    let groups: Vec<Vec<usize>> = (0..slope.len()).map(|i| vec![i]).collect();
    // b + 1 interpolation points, then enough steps for the radius to reach eps.
    let kappa = slope.len() + 1 + 4;
    let eta = vec![0.0; slope.len()];
    let out = bobyqa_batch(&mut oracle, &problem, &eta, &groups, kappa, TrustRegionConfig::default(), clean)
        .unwrap();
    assert_eq!(out.queries, kappa as u64);
    assert_close(&out.step, &sign_vertex(&slope), 1e-12);
    let best = clean - EPS * slope.iter().map(|g| g.abs()).sum::<f64>();
    assert!((out.loss - best).abs() <= 1e-9, "{} vs {best}", out.loss);
}

#[test]
fn parsimonious_on_two_pixels_stops_at_best_vertex() {
    for slope in [[0.4, -0.9], [-0.3, -0.2], [1.0, 0.5]] {
        let model = affine_target(&slope);
        let image = interior_image(2);
        let problem = AttackProblem::new(image.clone(), 0, EPS, 1_000);
        // Brute force over the four vertices.
        let mut best = (f64::INFINITY, vec![]);
        for a in [-EPS, EPS] {
            for b in [-EPS, EPS] {
                let x: Vec<f64> = image.data().iter().zip([a, b]).map(|(x, e)| x + e).collect();
                let l = loss(&model.logits(&x).unwrap(), 0).unwrap();
                if l < best.0 {
                    best = (l, vec![a, b]);
                }
            }
        }
        let mut oracle = CountingOracle::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = parsimonious_attack(&mut oracle, &problem, &ParsimoniousConfig::default(), &mut rng).unwrap();
        assert_eq!(r.stop, StopReason::Converged);
        assert_close(&r.perturbation.values, &best.1, 1e-15);
        assert!(r.queries < 20);
    }
}

#[test]
fn frank_wolfe_coordinate_step_reaches_vertex_in_one_iteration() {
    let slope = [0.3, -0.6, 0.9];
    let model = affine_target(&slope);
    let image = interior_image(slope.len());
    let d = slope.len();
    // clean query, 2d probes, one iterate
    let budget = 1 + 2 * d as u64 + 1;
    let problem = AttackProblem::new(image, 0, EPS, budget);
    let config = FrankWolfeConfig {
        momentum: 0.0,
        directions: d,
        direction_kind: DirectionKind::Coordinate,
        step_size: StepSize::Constant(1.0),
        ..FrankWolfeConfig::default()
    };
    let mut oracle = CountingOracle::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = frank_wolfe_attack(&mut oracle, &problem, &config, &mut rng).unwrap();
    assert_eq!(r.stop, StopReason::BudgetExhausted);
    assert_eq!(r.queries, budget);
    assert_close(&r.perturbation.values, &sign_vertex(&slope), 1e-15);
}

#[test]
fn square_queries_stay_on_box_vertices() {
    let inst = common::instance(Shape::new(6, 6, 3).unwrap(), 10, 41);
    let eps = 0.05;
    let problem = AttackProblem::new(inst.image.clone(), inst.target, eps, 300);
    let mut oracle = common::Auditor::new(CountingOracle::new(&inst.model), &inst.image, eps);
    oracle.keep = true;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    square_attack(&mut oracle, &problem, &SquareConfig::default(), &mut rng).unwrap();
    let (lo, hi) = (inst.image.lower(), inst.image.upper());
    for q in &oracle.queries[1..] {
        for (v, x) in q.iter().zip(inst.image.data()) {
            let corners = [(x - eps).max(lo), (x + eps).min(hi)];
            assert!(corners.iter().any(|c| (v - c).abs() <= 1e-12), "{v} is not a vertex coordinate around {x}");
        }
    }
    assert!(oracle.queries.len() > 1);
}
