//! Convergence-time arithmetic for distributed dithered SGD.

use serde::{Deserialize, Serialize};

use super::problems::{Batch, Problem};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonInputs {
    /// `sup ||w - w0||` over the feasible set.
    pub r: f64,
    pub epsilon: f64,
    pub sigma_sq: f64,
    pub workers: u32,
    pub ell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub rounds: u64,
    pub eta: f64,
    /// Set when `epsilon` is not small relative to `sigma^2 / (P ell)`.
    pub warning: Option<String>,
}

/// `sigma^2 = V (1 + n delta^2/12) + n B delta^2/12`, where `B` bounds
/// `||grad L||^2`.
pub fn sigma_sq(v: f64, b: f64, n: usize, delta: f64) -> f64 {
    let q = n as f64 * delta * delta / 12.0;
    v * (1.0 + q) + b * q
}

/// Rounds `ceil(2.5 R^2 sigma^2 / (P eps^2))` and step `eps / (eps ell + 1.1 sigma^2 / P)`.
pub fn training_horizon(h: &HorizonInputs) -> Result<Horizon> {
    if !(h.r > 0.0 && h.epsilon > 0.0 && h.sigma_sq > 0.0 && h.workers > 0 && h.ell > 0.0) {
        return Err(invalid!("horizon inputs must all be positive: {h:?}"));
    }
    let per_worker = h.sigma_sq / h.workers as f64;
    let rounds = (2.5 * h.r * h.r * per_worker / (h.epsilon * h.epsilon)).ceil() as u64;
    let eta = h.epsilon / (h.epsilon * h.ell + 1.1 * per_worker);
    let limit = 0.2 * per_worker / h.ell;
    let warning = (h.epsilon >= limit).then(|| {
        format!(
            "epsilon {} is not below 0.2 sigma^2/(P ell) = {limit}; the horizon may be optimistic",
            h.epsilon
        )
    });
    Ok(Horizon { rounds, eta, warning })
}

/// Relative training-time increase `n delta^2/12 (1 + B/V)`.
pub fn excess_time_ratio(n: usize, delta: f64, b_over_v: f64) -> f64 {
    n as f64 * delta * delta / 12.0 * (1.0 + b_over_v)
}

/// `((1 + n delta^2/12) A, (1 + n delta^2/12) B)`.
pub fn bounded_sg_constants(a: f64, b: f64, n: usize, delta: f64) -> (f64, f64) {
    let f = 1.0 + n as f64 * delta * delta / 12.0;
    (f * a, f * b)
}

/// Empirical `V = E ||g - grad L||^2` and `B = ||grad L||^2` at `w`.
pub fn measure_sg_constants(problem: &dyn Problem, w: &[f64], batch: usize, calls: u64, seed: u64) -> (f64, f64) {
    let exact = problem.exact_grad(w);
    let v = (0..calls)
        .map(|c| {
            let g = problem.sg(w, &Batch::sampled(batch, seed.wrapping_add(c)));
            g.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / calls as f64;
    (v, exact.iter().map(|x| x * x).sum())
}
