//! Closed-form optimal duals of the two regularized Lagrangians and the
//! coverage bound on the value-learning dual.
//!
//! For value learning the dual is
//! `w*_f = (I − γP̃^π)⁻¹(ν ∘ f'(q^π)) ⊘ d^D`; for weight learning it is
//! `q*_f = (I − γP^π)⁻¹(f'(w^π) ∘ η ⊘ d^D)`.

use crate::error::{Error, Result};
use crate::mdp::{occupancy_with, ratio, BellmanSystem, SAFunction, StateActionDist};
use crate::numerics::{norm_inf, sub};

/// A closed-form dual together with its diagnostics.
#[derive(Debug, Clone)]
pub struct SaddleReport {
    pub dual: SAFunction,
    /// ∞-norm of the Lagrangian gradient at `dual`, in the `d^D`-weighted form.
    pub stationarity_residual: f64,
    pub sup_norm: f64,
    /// Coverage bound on `‖w*_f‖_∞`; only set for the value-learning dual.
    pub coverage_bound: Option<f64>,
}

fn check_len(n: usize, parts: &[(&str, usize)]) -> Result<()> {
    for (name, len) in parts {
        if *len != n {
            return Err(Error::DimensionMismatch(format!("{name} has length {len}, expected {n}")));
        }
    }
    Ok(())
}

/// Value-learning dual `w*_f`.
pub fn w_star(
    sys: &BellmanSystem,
    nu: &StateActionDist,
    fprime_at_qpi: &SAFunction,
    d_d: &StateActionDist,
) -> Result<SaddleReport> {
    let n = sys.transition().rows();
    check_len(n, &[("nu", nu.len()), ("f'(q^pi)", fprime_at_qpi.len()), ("d_D", d_d.len())])?;
    let source: Vec<f64> = nu
        .weights()
        .iter()
        .zip(fprime_at_qpi.values())
        .map(|(a, b)| a * b)
        .collect();
    let dual = ratio(&sys.solve_adjoint(&source), d_d)?;

    let d_w: Vec<f64> = dual.iter().zip(d_d.weights()).map(|(w, d)| w * d).collect();
    let stationarity_residual = norm_inf(&sub(&sys.apply_adjoint(&d_w), &source));
    let bound = w_star_bound(sys, nu, fprime_at_qpi, d_d)?;
    Ok(SaddleReport {
        sup_norm: norm_inf(&dual),
        dual: SAFunction(dual),
        stationarity_residual,
        coverage_bound: Some(bound),
    })
}

/// Weight-learning dual `q*_f`.
pub fn q_star(
    sys: &BellmanSystem,
    eta: &StateActionDist,
    fprime_at_wpi: &SAFunction,
    d_d: &StateActionDist,
) -> Result<SaddleReport> {
    let n = sys.transition().rows();
    check_len(n, &[("eta", eta.len()), ("f'(w^pi)", fprime_at_wpi.len()), ("d_D", d_d.len())])?;
    let weighted: Vec<f64> = eta
        .weights()
        .iter()
        .zip(fprime_at_wpi.values())
        .map(|(a, b)| a * b)
        .collect();
    let proxy_reward = ratio(&weighted, d_d)?;
    let dual = sys.solve_forward(&proxy_reward);
    // Lagrangian gradient in w: d^D ∘ (I − γP^π) q − η ∘ f'(w^π).
    let td: Vec<f64> = sys.apply_forward(&dual).iter().zip(d_d.weights()).map(|(v, d)| v * d).collect();
    let stationarity_residual = norm_inf(&sub(&td, &weighted));
    Ok(SaddleReport {
        sup_norm: norm_inf(&dual),
        dual: SAFunction(dual),
        stationarity_residual,
        coverage_bound: None,
    })
}

/// `(1/(1−γ)) · ‖d^π_ν / d^D‖_∞ · ‖f'(q^π)‖_∞`, where `d^π_ν` is the
/// discounted occupancy of the policy started from `ν`.
pub fn w_star_bound(
    sys: &BellmanSystem,
    nu: &StateActionDist,
    fprime_at_qpi: &SAFunction,
    d_d: &StateActionDist,
) -> Result<f64> {
    let d_nu = occupancy_with(sys, nu)?;
    let coverage = norm_inf(&ratio(d_nu.weights(), d_d)?);
    Ok(coverage * fprime_at_qpi.sup_norm() / (1.0 - sys.gamma()))
}
