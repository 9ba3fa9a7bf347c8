//! Return estimators built from a value estimate, a weight estimate, or both.
//!
//! The sample-average forms take datasets directly; the `*_with` forms take
//! any [`Expectations`] provider so the same code evaluates population
//! identities exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Expectations;
use crate::mdp::{Policy, SAFunction};
use crate::numerics::DenseMatrix;
use crate::sampling::{Dataset, InitDataset};

/// Which bootstrap term the doubly robust correction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrVariant {
    /// `w (r + γ q(s',π) − q(s,a))`, exact whenever either nuisance is exact.
    #[default]
    Discounted,
    /// `w (r + q(s',π) − q(s,a))`, the undiscounted display form.
    Literal,
}

impl DrVariant {
    fn bootstrap(self, gamma: f64) -> f64 {
        match self {
            DrVariant::Discounted => gamma,
            DrVariant::Literal => 1.0,
        }
    }
}

/// Three return estimates and, when the truth is known, their absolute errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub j_q: f64,
    pub j_w: f64,
    pub j_dr: f64,
    pub j_true: Option<f64>,
    pub error_q: Option<f64>,
    pub error_w: Option<f64>,
    pub error_dr: Option<f64>,
}

impl OpeReport {
    pub fn new(j_q: f64, j_w: f64, j_dr: f64, j_true: Option<f64>) -> Self {
        let err = |j: f64| j_true.map(|t| (j - t).abs());
        Self {
            error_q: err(j_q),
            error_w: err(j_w),
            error_dr: err(j_dr),
            j_q,
            j_w,
            j_dr,
            j_true,
        }
    }
}

fn check_len(f: &SAFunction, n: usize, what: &str) -> Result<()> {
    if f.len() != n {
        return Err(Error::DimensionMismatch(format!("{what} has length {}, expected {n}", f.len())));
    }
    Ok(())
}

/// `(1−γ) (1/n0) Σ q̂(s0, π)`.
pub fn j_q(q_hat: &SAFunction, init: &InitDataset, pol: &Policy, gamma: f64) -> Result<f64> {
    if init.is_empty() {
        return Err(Error::Config("initial-state dataset is empty".into()));
    }
    check_len(q_hat, pol.n_states() * pol.n_actions(), "q_hat")?;
    let v = pol.state_average(q_hat.values());
    let mut total = 0.0;
    for s in &init.s0 {
        total += *v.get(*s).ok_or_else(|| Error::Config(format!("initial state {s} out of range")))?;
    }
    Ok((1.0 - gamma) * total / init.len() as f64)
}

/// `(1/n) Σ ŵ(s,a) r`.
pub fn j_w(w_hat: &SAFunction, data: &Dataset, n_actions: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let sa = data.s[i] * n_actions + data.a[i];
        total += w_hat.values().get(sa).ok_or_else(|| Error::Config(format!("pair {sa} out of range")))? * data.r[i];
    }
    Ok(total / data.len() as f64)
}

/// `j_q + (1/n) Σ ŵ(s,a) (r + γ q̂(s',π) − q̂(s,a))`.
pub fn j_dr(
    q_hat: &SAFunction,
    w_hat: &SAFunction,
    data: &Dataset,
    init: &InitDataset,
    pol: &Policy,
    gamma: f64,
    variant: DrVariant,
) -> Result<f64> {
    let base = j_q(q_hat, init, pol, gamma)?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    check_len(w_hat, q_hat.len(), "w_hat")?;
    let na = pol.n_actions();
    let v = pol.state_average(q_hat.values());
    let g = variant.bootstrap(gamma);
    let mut total = 0.0;
    for i in 0..data.len() {
        let sa = data.s[i] * na + data.a[i];
        if sa >= q_hat.len() || data.s_next[i] >= v.len() {
            return Err(Error::Config(format!("transition {i} out of range")));
        }
        total += w_hat.0[sa] * (data.r[i] + g * v[data.s_next[i]] - q_hat.0[sa]);
    }
    Ok(base + total / data.len() as f64)
}

fn column(f: &SAFunction) -> DenseMatrix {
    DenseMatrix::from_columns(f.len(), std::slice::from_ref(&f.0)).expect("single column")
}

/// [`j_q`] under an arbitrary expectation provider.
pub fn j_q_with(exp: &dyn Expectations, q_hat: &SAFunction, pol: &Policy, gamma: f64) -> Result<f64> {
    check_len(q_hat, exp.n_pairs(), "q_hat")?;
    Ok((1.0 - gamma) * exp.initial_moment(&column(q_hat), pol)?[0])
}

/// [`j_w`] under an arbitrary expectation provider.
pub fn j_w_with(exp: &dyn Expectations, w_hat: &SAFunction) -> Result<f64> {
    check_len(w_hat, exp.n_pairs(), "w_hat")?;
    Ok(exp.reward_moment(&column(w_hat))[0])
}

/// [`j_dr`] under an arbitrary expectation provider.
pub fn j_dr_with(
    exp: &dyn Expectations,
    q_hat: &SAFunction,
    w_hat: &SAFunction,
    pol: &Policy,
    gamma: f64,
    variant: DrVariant,
) -> Result<f64> {
    let base = j_q_with(exp, q_hat, pol, gamma)?;
    let reward = j_w_with(exp, w_hat)?;
    // E[w (q − g q')]
    let td = exp.td_moment(&column(w_hat), &column(q_hat), pol, variant.bootstrap(gamma));
    Ok(base + reward - td.get(0, 0))
}
