//! Quadratic per-pair regularizers `f_{s,a}(x) = ½(x − anchor(s,a))²` and
//! the model-based anchors used in the experiments.

use crate::error::{Error, Result};
use crate::mdp::{SAFunction, StateActionDist};

/// A strongly convex per-pair regularizer family.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    anchor: SAFunction,
    strong_convexity: f64,
}

impl Regularizer {
    /// `f_{s,a}(x) = ½(x − anchor(s,a))²`, which is 1-strongly convex.
    pub fn quadratic(anchor: SAFunction) -> Result<Self> {
        if anchor.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regularizer anchor".into()));
        }
        Ok(Self {
            anchor,
            strong_convexity: 1.0,
        })
    }

    /// `f(x) = ½x²` on `n` pairs.
    pub fn squared_norm(n: usize) -> Self {
        Self {
            anchor: SAFunction::zeros(n),
            strong_convexity: 1.0,
        }
    }

    pub fn anchor(&self) -> &SAFunction {
        &self.anchor
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    /// Elementwise `f_{s,a}(point(s,a))`.
    pub fn value_at(&self, point: &SAFunction) -> SAFunction {
        SAFunction(
            point
                .values()
                .iter()
                .zip(self.anchor.values())
                .map(|(x, c)| 0.5 * (x - c) * (x - c))
                .collect(),
        )
    }

    /// `E_ν[f_{s,a}(point(s,a))]`.
    pub fn expected(&self, nu: &StateActionDist, point: &SAFunction) -> f64 {
        nu.expect(self.value_at(point).values())
    }

    /// Elementwise `f'_{s,a}(point(s,a)) = point − anchor`.
    pub fn derivative_at(&self, point: &SAFunction) -> SAFunction {
        SAFunction(
            point
                .values()
                .iter()
                .zip(self.anchor.values())
                .map(|(x, c)| x - c)
                .collect(),
        )
    }
}

/// How the constant part `q̄` of the uniform model is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMean {
    /// `q̄ = (1/|S×A|) Σ q^π 𝕀{p > 0}`.
    #[default]
    AllPairs,
    /// Average of `q^π` over the support of `p`.
    Support,
}

/// `q̄` for the uniform model.
pub fn model_mean(q_pi: &SAFunction, p: &StateActionDist, mean: ModelMean) -> f64 {
    let on_support: Vec<f64> = p.support().map(|i| q_pi.values()[i]).collect();
    let total: f64 = on_support.iter().sum();
    match mean {
        ModelMean::AllPairs => total / q_pi.len() as f64,
        ModelMean::Support if on_support.is_empty() => 0.0,
        ModelMean::Support => total / on_support.len() as f64,
    }
}

/// Uniform model `q̃ = m q^π + (1 − m) q̄`, optionally zeroed outside `supp(p)`.
pub fn uniform_model(q_pi: &SAFunction, m: f64, p: &StateActionDist, masked: bool, mean: ModelMean) -> Result<SAFunction> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("model quality m = {m} is outside [0, 1]")));
    }
    if p.len() != q_pi.len() {
        return Err(Error::DimensionMismatch("p and q_pi differ in length".into()));
    }
    let q_bar = model_mean(q_pi, p, mean);
    Ok(SAFunction(
        q_pi.values()
            .iter()
            .zip(p.weights())
            .map(|(q, w)| {
                if masked && *w <= 0.0 {
                    0.0
                } else {
                    m * q + (1.0 - m) * q_bar
                }
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_values() {
        let reg = Regularizer::squared_norm(3);
        assert_eq!(reg.value_at(&SAFunction::constant(3, 3.0)).0, vec![4.5; 3]);
        let reg = Regularizer::quadratic(SAFunction::constant(2, 2.0)).unwrap();
        let x = SAFunction::constant(2, 5.0);
        assert_eq!(reg.value_at(&x).0, vec![4.5; 2]);
        assert_eq!(reg.derivative_at(&x).0, vec![3.0; 2]);
        assert_eq!(reg.strong_convexity(), 1.0);
    }

    #[test]
    fn anchor_at_truth_vanishes() {
        let q = SAFunction(vec![0.5, 1.5, -2.0]);
        let reg = Regularizer::quadratic(q.clone()).unwrap();
        assert_eq!(reg.value_at(&q).0, vec![0.0; 3]);
        assert_eq!(reg.derivative_at(&q).0, vec![0.0; 3]);
        assert_eq!(Regularizer::squared_norm(3).derivative_at(&q), q);
    }

    #[test]
    fn rejects_non_finite_anchor() {
        assert!(Regularizer::quadratic(SAFunction(vec![f64::NAN])).is_err());
    }

    #[test]
    fn uniform_model_extremes() {
        let q = SAFunction(vec![1.0, 2.0, 3.0, 6.0]);
        let p = StateActionDist::new(vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let exact = uniform_model(&q, 1.0, &p, false, ModelMean::AllPairs).unwrap();
        assert_eq!(exact, q);
        let flat = uniform_model(&q, 0.0, &p, false, ModelMean::AllPairs).unwrap();
        assert_eq!(flat.0, vec![1.25; 4]);
        let support = uniform_model(&q, 0.0, &p, false, ModelMean::Support).unwrap();
        assert_eq!(support.0, vec![2.5; 4]);
        let masked = uniform_model(&q, 0.5, &p, true, ModelMean::AllPairs).unwrap();
        assert_eq!(masked.0, vec![0.0, 1.625, 2.125, 0.0]);
        assert!(uniform_model(&q, 1.5, &p, false, ModelMean::AllPairs).is_err());
    }
}
