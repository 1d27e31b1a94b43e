//! Reference versions of the compared attacks: random square search on
//! vertices, greedy block flipping on vertices, a genetic search and
//! zeroth-order Frank-Wolfe with momentum.
//!
//! Every constant lives in the corresponding config.

mod frank_wolfe;
mod genattack;
mod parsimonious;
mod square;

pub use frank_wolfe::{frank_wolfe_attack, DirectionKind, FrankWolfeConfig, StepSize};
pub use genattack::{gen_attack, GenAttackConfig};
pub use parsimonious::{parsimonious_attack, ParsimoniousConfig};
pub use square::{square_attack, SquareConfig};

use crate::problem::InputTensor;

/// Perturbation value at the `sign` vertex of the budget box, clipped so the
/// pixel stays in range.
#[inline]
pub(crate) fn vertex_value(image: &InputTensor, i: usize, sign: f64, epsilon: f64) -> f64 {
    let x = image.data()[i];
    (sign * epsilon).clamp(image.lower() - x, image.upper() - x)
}

/// Feasible interval for the total perturbation of coordinate `i`.
#[inline]
pub(crate) fn perturbation_range(image: &InputTensor, i: usize, epsilon: f64) -> (f64, f64) {
    let x = image.data()[i];
    ((-epsilon).max(image.lower() - x), epsilon.min(image.upper() - x))
}
