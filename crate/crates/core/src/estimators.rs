//! Regularized MIS estimators for linear classes with quadratic regularizers.
//!
//! With `q = Φα` and `w = Ψβ`, the inner maximization over `β` is unbounded
//! unless the empirical Bellman residual is orthogonal to every column of
//! `Ψ`, so the saddle-point problem collapses to an equality-constrained
//! least-squares problem
//!
//! ```text
//!     minimize   ½ ‖Φα − anchor‖²_{2,ν}
//!     subject to E[ψ(s,a) (φ(s,a) − γ φ(s',π))ᵀ] α = E[ψ(s,a) r]
//! ```
//!
//! which is solved in one shot by [`solve_equality_lsq`]. The weight
//! estimator is the mirror image with the initial-state term on the right.
//! Expectations come from an [`Expectations`] provider: either empirical
//! averages over a dataset or exact sums under `d^D` and `μ0`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LinearClass;
use crate::mdp::{apply_transition, Policy, SAFunction, StateActionDist, TabularMdp};
use crate::numerics::{dot, least_squares_min_norm, norm2, solve_equality_lsq, sub, DenseMatrix, Svd};
use crate::regularizers::Regularizer;
use crate::sampling::{Dataset, InitDataset};

/// Source of the expectations that appear in the constraint system.
pub trait Expectations {
    fn n_pairs(&self) -> usize;

    /// `E_{d^D}[left(s,a) (right(s,a) − γ right(s',π))ᵀ]`, shape `left.cols × right.cols`.
    fn td_moment(&self, left: &DenseMatrix, right: &DenseMatrix, pol: &Policy, gamma: f64) -> DenseMatrix;

    /// `E_{d^D}[left(s,a) r]`.
    fn reward_moment(&self, left: &DenseMatrix) -> Vec<f64>;

    /// `E_{s0~μ0}[feat(s0, π)]`.
    fn initial_moment(&self, feat: &DenseMatrix, pol: &Policy) -> Result<Vec<f64>>;
}

/// `feat(s, π)` for every state, shape `n_states × feat.cols`.
fn policy_average(feat: &DenseMatrix, pol: &Policy) -> DenseMatrix {
    let na = pol.n_actions();
    let mut out = DenseMatrix::zeros(pol.n_states(), feat.cols());
    for s in 0..pol.n_states() {
        for (a, p) in pol.action_probs(s).iter().enumerate() {
            if *p != 0.0 {
                let row = feat.row(s * na + a).to_vec();
                crate::numerics::axpy(*p, &row, out.row_mut(s));
            }
        }
    }
    out
}

/// Empirical averages over an offline dataset (and optionally an initial-state sample).
#[derive(Debug, Clone)]
pub struct Empirical<'a> {
    data: &'a Dataset,
    init: Option<&'a InitDataset>,
    n_actions: usize,
    n_pairs: usize,
}

impl<'a> Empirical<'a> {
    pub fn new(mdp: &TabularMdp, data: &'a Dataset, init: Option<&'a InitDataset>) -> Result<Self> {
        data.validate(mdp)?;
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if let Some(i) = init {
            if i.is_empty() {
                return Err(Error::Config("initial-state dataset is empty".into()));
            }
            if i.s0.iter().any(|s| *s >= mdp.n_states()) {
                return Err(Error::Config("initial state out of range".into()));
            }
        }
        Ok(Self {
            data,
            init,
            n_actions: mdp.n_actions(),
            n_pairs: mdp.n_pairs(),
        })
    }

    /// Counts of each distinct `(pair, next state)` in sorted order.
    fn transition_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for i in 0..self.data.len() {
            let sa = self.data.s[i] * self.n_actions + self.data.a[i];
            *counts.entry((sa, self.data.s_next[i])).or_insert(0) += 1;
        }
        counts
    }
}

impl Expectations for Empirical<'_> {
    fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    fn td_moment(&self, left: &DenseMatrix, right: &DenseMatrix, pol: &Policy, gamma: f64) -> DenseMatrix {
        let next = policy_average(right, pol);
        let n = self.data.len() as f64;
        let mut out = DenseMatrix::zeros(left.cols(), right.cols());
        for ((sa, s_next), count) in self.transition_counts() {
            let weight = count as f64 / n;
            let td: Vec<f64> = right
                .row(sa)
                .iter()
                .zip(next.row(s_next))
                .map(|(cur, nxt)| weight * (cur - gamma * nxt))
                .collect();
            for (i, l) in left.row(sa).iter().enumerate() {
                if *l != 0.0 {
                    crate::numerics::axpy(*l, &td, out.row_mut(i));
                }
            }
        }
        out
    }

    fn reward_moment(&self, left: &DenseMatrix) -> Vec<f64> {
        let mut reward_sum = BTreeMap::new();
        for i in 0..self.data.len() {
            let sa = self.data.s[i] * self.n_actions + self.data.a[i];
            *reward_sum.entry(sa).or_insert(0.0) += self.data.r[i];
        }
        let n = self.data.len() as f64;
        let mut out = vec![0.0; left.cols()];
        for (sa, total) in reward_sum {
            crate::numerics::axpy(total / n, left.row(sa), &mut out);
        }
        out
    }

    fn initial_moment(&self, feat: &DenseMatrix, pol: &Policy) -> Result<Vec<f64>> {
        let init = self
            .init
            .ok_or_else(|| Error::Config("an initial-state dataset is required".into()))?;
        let avg = policy_average(feat, pol);
        let mut counts = BTreeMap::new();
        for s in &init.s0 {
            *counts.entry(*s).or_insert(0usize) += 1;
        }
        let n0 = init.len() as f64;
        let mut out = vec![0.0; feat.cols()];
        for (s, c) in counts {
            crate::numerics::axpy(c as f64 / n0, avg.row(s), &mut out);
        }
        Ok(out)
    }
}

/// Exact expectations under `d^D` and `μ0`: the infinite-data limit of [`Empirical`].
#[derive(Debug, Clone)]
pub struct Population<'a> {
    mdp: &'a TabularMdp,
    d_d: &'a StateActionDist,
}

/// Exact-expectation provider for the given MDP and data distribution.
pub fn population_mode<'a>(mdp: &'a TabularMdp, d_d: &'a StateActionDist) -> Result<Population<'a>> {
    if d_d.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch("d_D does not match the MDP".into()));
    }
    Ok(Population { mdp, d_d })
}

impl Expectations for Population<'_> {
    fn n_pairs(&self) -> usize {
        self.mdp.n_pairs()
    }

    fn td_moment(&self, left: &DenseMatrix, right: &DenseMatrix, pol: &Policy, gamma: f64) -> DenseMatrix {
        let next = policy_average(right, pol);
        let mut out = DenseMatrix::zeros(left.cols(), right.cols());
        for sa in 0..self.mdp.n_pairs() {
            let weight = self.d_d.weights()[sa];
            if weight == 0.0 {
                continue;
            }
            let mut expected_next = vec![0.0; right.cols()];
            for (s2, p) in self.mdp.next_state_probs(sa).iter().enumerate() {
                if *p != 0.0 {
                    crate::numerics::axpy(*p, next.row(s2), &mut expected_next);
                }
            }
            let td: Vec<f64> = right
                .row(sa)
                .iter()
                .zip(&expected_next)
                .map(|(cur, nxt)| weight * (cur - gamma * nxt))
                .collect();
            for (i, l) in left.row(sa).iter().enumerate() {
                if *l != 0.0 {
                    crate::numerics::axpy(*l, &td, out.row_mut(i));
                }
            }
        }
        out
    }

    fn reward_moment(&self, left: &DenseMatrix) -> Vec<f64> {
        let weighted: Vec<f64> = self
            .d_d
            .weights()
            .iter()
            .zip(self.mdp.mean_reward())
            .map(|(d, r)| d * r)
            .collect();
        left.tr_matvec(&weighted)
    }

    fn initial_moment(&self, feat: &DenseMatrix, pol: &Policy) -> Result<Vec<f64>> {
        Ok(policy_average(feat, pol).tr_matvec(self.mdp.mu0()))
    }
}

/// Solver diagnostics attached to every estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateDiagnostics {
    pub n_constraints: usize,
    pub constraint_rank: usize,
    pub width: usize,
    /// `‖values‖_∞`, the post-hoc class-norm constant.
    pub sup_norm: f64,
}

/// A fitted member `F c` of a linear class.
#[derive(Debug, Clone)]
pub struct LinearEstimate {
    pub coefficients: Vec<f64>,
    pub values: SAFunction,
    /// `‖G c − h‖₂` of the constraint system actually solved.
    pub constraint_residual: f64,
    pub diagnostics: EstimateDiagnostics,
}

pub type QEstimate = LinearEstimate;
pub type WEstimate = LinearEstimate;

/// Regularizer and the distribution it is averaged under; `None` means no regularization.
#[derive(Debug, Clone, Copy)]
pub struct Weighting<'a> {
    pub reg: &'a Regularizer,
    pub dist: &'a StateActionDist,
}

fn check_class(cls: &LinearClass, n_pairs: usize, role: &str) -> Result<()> {
    if cls.n_pairs() != n_pairs {
        return Err(Error::DimensionMismatch(format!(
            "{role} class has {} rows, expected {n_pairs}",
            cls.n_pairs()
        )));
    }
    Ok(())
}

/// Solves `min ½‖F c − anchor‖²_{2,dist}  s.t.  G c = h`, or the
/// minimum-norm solution of `G c = h` when unregularized.
fn fit_constrained(primal: &LinearClass, g: DenseMatrix, h: Vec<f64>, weighting: Option<Weighting<'_>>) -> Result<LinearEstimate> {
    let n_constraints = g.rows();
    let (coefficients, constraint_residual, constraint_rank) = match weighting {
        Some(Weighting { reg, dist }) => {
            if dist.len() != primal.n_pairs() || reg.anchor().len() != primal.n_pairs() {
                return Err(Error::DimensionMismatch("regularizer does not match the class".into()));
            }
            let sqrt_w: Vec<f64> = dist.weights().iter().map(|w| w.sqrt()).collect();
            let b = primal.features().scale_rows(&sqrt_w);
            let t: Vec<f64> = reg.anchor().values().iter().zip(&sqrt_w).map(|(a, s)| a * s).collect();
            let sol = solve_equality_lsq(&b, &t, &g, &h)?;
            (sol.primal, sol.constraint_residual, sol.constraint_rank)
        }
        None => {
            let svd = Svd::new(&g);
            let c = svd.pseudo_solve(&h);
            let res = norm2(&sub(&g.matvec(&c), &h));
            (c, res, svd.rank())
        }
    };
    let values = primal.evaluate(&coefficients);
    Ok(LinearEstimate {
        diagnostics: EstimateDiagnostics {
            n_constraints,
            constraint_rank,
            width: primal.width(),
            sup_norm: values.sup_norm(),
        },
        coefficients,
        values,
        constraint_residual,
    })
}

/// Value-function estimate `q̂ = Φα` with discriminator class `Ψ`.
pub fn estimate_q(
    exp: &dyn Expectations,
    primal: &LinearClass,
    disc: &LinearClass,
    weighting: Option<Weighting<'_>>,
    pol: &Policy,
    gamma: f64,
) -> Result<QEstimate> {
    check_class(primal, exp.n_pairs(), "primal")?;
    check_class(disc, exp.n_pairs(), "discriminator")?;
    let g = exp.td_moment(disc.features(), primal.features(), pol, gamma);
    let h = exp.reward_moment(disc.features());
    fit_constrained(primal, g, h, weighting)
}

/// Weight-function estimate `ŵ = Ψ_w β` with value-side dual class `Φ_q`.
pub fn estimate_w(
    exp: &dyn Expectations,
    primal: &LinearClass,
    disc: &LinearClass,
    weighting: Option<Weighting<'_>>,
    pol: &Policy,
    gamma: f64,
) -> Result<WEstimate> {
    check_class(primal, exp.n_pairs(), "primal")?;
    check_class(disc, exp.n_pairs(), "discriminator")?;
    let g = exp.td_moment(primal.features(), disc.features(), pol, gamma).transpose();
    let h: Vec<f64> = exp
        .initial_moment(disc.features(), pol)?
        .into_iter()
        .map(|v| (1.0 - gamma) * v)
        .collect();
    fit_constrained(primal, g, h, weighting)
}

/// Minimum-norm solution of an arbitrary constraint system, used by tests and diagnostics.
pub fn min_norm_feasible(g: &DenseMatrix, h: &[f64]) -> Vec<f64> {
    least_squares_min_norm(g, h)
}

/// `L^q(q, w) = E_ν[f(q)] + E_{d^D}[w (r̄ + γ (P^π q) − q)]`.
pub fn population_lagrangian_q(
    q: &SAFunction,
    w: &SAFunction,
    mdp: &TabularMdp,
    pol: &Policy,
    d_d: &StateActionDist,
    reg: &Regularizer,
    nu: &StateActionDist,
) -> f64 {
    let pq = apply_transition(mdp, pol, q.values());
    let residual_term: f64 = (0..mdp.n_pairs())
        .map(|sa| d_d.weights()[sa] * w.0[sa] * (mdp.mean_reward()[sa] + mdp.gamma() * pq[sa] - q.0[sa]))
        .sum();
    reg.expected(nu, q) + residual_term
}

/// `L^w(w, q) = E_η[f(w)] + (1−γ) E_{μ0}[q(s,π)] + E_{d^D}[w (γ (P^π q) − q)]`.
pub fn population_lagrangian_w(
    w: &SAFunction,
    q: &SAFunction,
    mdp: &TabularMdp,
    pol: &Policy,
    d_d: &StateActionDist,
    reg: &Regularizer,
    eta: &StateActionDist,
) -> f64 {
    let pq = apply_transition(mdp, pol, q.values());
    let initial = dot(mdp.mu0(), &pol.state_average(q.values()));
    let flow_term: f64 = (0..mdp.n_pairs())
        .map(|sa| d_d.weights()[sa] * w.0[sa] * (mdp.gamma() * pq[sa] - q.0[sa]))
        .sum();
    reg.expected(eta, w) + (1.0 - mdp.gamma()) * initial + flow_term
}

/// `‖est − truth‖_{2,dist} = sqrt(Σ dist (est − truth)²)`.
pub fn weighted_l2_error(est: &SAFunction, truth: &SAFunction, dist: &StateActionDist) -> f64 {
    est.values()
        .iter()
        .zip(truth.values())
        .zip(dist.weights())
        .map(|((e, t), w)| w * (e - t) * (e - t))
        .sum::<f64>()
        .sqrt()
}

/// Inputs of the finite-class error bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `max_{w ∈ W} ‖w‖_∞`
    pub c_w: f64,
    /// `max_{q ∈ Q} ‖q‖_∞`
    pub c_q: f64,
    pub log_card_w: f64,
    pub log_card_q: f64,
    pub n: usize,
    pub n0: usize,
    pub delta: f64,
    pub strong_convexity: f64,
    /// `max_{w ∈ W} ‖f(w)‖_∞`, used by the weight bound only.
    pub c_f: f64,
    pub gamma: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.c_w, self.c_q, self.strong_convexity];
        if positive.iter().any(|v| !(*v > 0.0)) || self.c_f < 0.0 {
            return Err(Error::Config("bound constants must be positive".into()));
        }
        if self.log_card_w < 0.0 || self.log_card_q < 0.0 {
            return Err(Error::Config("log-cardinalities must be non-negative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta = {} is outside (0, 1)", self.delta)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} is outside [0, 1)", self.gamma)));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        Ok(())
    }
}

/// Value-estimation bound `2 sqrt(ε_stat / M)` with
/// `ε_stat = (C_W + (1+γ) C_W C_Q) sqrt(2 log(2|W||Q|/δ) / n)`.
pub fn theorem1_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let log_term = 2f64.ln() + inp.log_card_w + inp.log_card_q - inp.delta.ln();
    let eps = (inp.c_w + (1.0 + inp.gamma) * inp.c_w * inp.c_q) * (2.0 * log_term / inp.n as f64).sqrt();
    Ok(2.0 * (eps / inp.strong_convexity).sqrt())
}

/// Weight-estimation bound `2 sqrt(ε_stat / M)` with
/// `ε_stat = (C_f + (1+γ) C_W C_Q) sqrt(2 log(4|Q||W|/δ) / n) + (1−γ) C_Q sqrt(2 log(4|Q|/δ) / n0)`.
///
/// `n0 = 0` stands for an exactly known initial distribution and drops the second term.
pub fn theorem2_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    let four = 4f64.ln();
    let main_log = four + inp.log_card_q + inp.log_card_w - inp.delta.ln();
    let mut eps = (inp.c_f + (1.0 + inp.gamma) * inp.c_w * inp.c_q) * (2.0 * main_log / inp.n as f64).sqrt();
    if inp.n0 > 0 {
        let init_log = four + inp.log_card_q - inp.delta.ln();
        eps += (1.0 - inp.gamma) * inp.c_q * (2.0 * init_log / inp.n0 as f64).sqrt();
    }
    Ok(2.0 * (eps / inp.strong_convexity).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::single_state;
    use crate::sampling::{sample_initial, sample_transitions, SeedSpec};

    fn one() -> LinearClass {
        LinearClass::new("one", DenseMatrix::identity(1)).unwrap()
    }

    #[test]
    fn single_state_value_estimate() {
        let (mdp, pol) = single_state();
        let delta = StateActionDist::uniform(1);
        let data = sample_transitions(&mdp, &delta, 5, SeedSpec::new(1, 0)).unwrap();
        let emp = Empirical::new(&mdp, &data, None).unwrap();
        let reg = Regularizer::squared_norm(1);
        let w = Weighting { reg: &reg, dist: &delta };
        let est = estimate_q(&emp, &one(), &one(), Some(w), &pol, mdp.gamma()).unwrap();
        assert!((est.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((est.values.0[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_state_weight_estimate() {
        let (mdp, pol) = single_state();
        let delta = StateActionDist::uniform(1);
        let data = sample_transitions(&mdp, &delta, 5, SeedSpec::new(1, 0)).unwrap();
        let init = sample_initial(&mdp, 3, SeedSpec::new(1, 0));
        let emp = Empirical::new(&mdp, &data, Some(&init)).unwrap();
        let reg = Regularizer::squared_norm(1);
        let w = Weighting { reg: &reg, dist: &delta };
        let est = estimate_w(&emp, &one(), &one(), Some(w), &pol, mdp.gamma()).unwrap();
        assert!((est.coefficients[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn population_equals_sampled_on_degenerate_support() {
        let (mdp, pol) = single_state();
        let delta = StateActionDist::uniform(1);
        let data = sample_transitions(&mdp, &delta, 17, SeedSpec::new(4, 2)).unwrap();
        let emp = Empirical::new(&mdp, &data, None).unwrap();
        let pop = population_mode(&mdp, &delta).unwrap();
        let f = DenseMatrix::identity(1);
        assert_eq!(emp.td_moment(&f, &f, &pol, 0.5), pop.td_moment(&f, &f, &pol, 0.5));
        assert_eq!(emp.reward_moment(&f), pop.reward_moment(&f));
    }

    #[test]
    fn empirical_requires_init_for_initial_moment() {
        let (mdp, pol) = single_state();
        let data = sample_transitions(&mdp, &StateActionDist::uniform(1), 2, SeedSpec::new(0, 0)).unwrap();
        let emp = Empirical::new(&mdp, &data, None).unwrap();
        assert!(emp.initial_moment(&DenseMatrix::identity(1), &pol).is_err());
        assert!(Empirical::new(&mdp, &Dataset::default(), None).is_err());
    }

    #[test]
    fn l2_error_basics() {
        let d = StateActionDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        let t = SAFunction(vec![1.0, 2.0, 3.0]);
        assert_eq!(weighted_l2_error(&t, &t, &d), 0.0);
        let shifted = SAFunction(vec![-1.5, -0.5, 0.5]);
        assert!((weighted_l2_error(&shifted, &t, &d) - 2.5).abs() < 1e-14);
    }

    fn pinned() -> BoundInputs {
        BoundInputs {
            c_w: 1.0,
            c_q: 1.0,
            log_card_w: 1.0,
            log_card_q: 1.0,
            n: 8,
            n0: 8,
            delta: 2.0 / std::f64::consts::E,
            strong_convexity: 1.0,
            c_f: 1.0,
            gamma: 0.0,
        }
    }

    #[test]
    fn theorem1_pinned_value() {
        // log(2 e²/(2/e)) = 3, so ε = 2·sqrt(6/8) = √3 and the bound is 2·3^{1/4}.
        let b = theorem1_bound(&pinned()).unwrap();
        assert!((b - 2.0 * 3f64.powf(0.25)).abs() < 1e-12, "{b}");
    }

    #[test]
    fn theorem1_scaling() {
        let base = theorem1_bound(&pinned()).unwrap();
        let more = theorem1_bound(&BoundInputs { n: 32, ..pinned() }).unwrap();
        assert!((more / base - 0.5f64.sqrt()).abs() < 1e-12);
        let stiffer = theorem1_bound(&BoundInputs {
            strong_convexity: 2.0,
            ..pinned()
        })
        .unwrap();
        assert!((stiffer / base - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn theorem2_pinned_value_and_limits() {
        // main: (1 + 1)·sqrt(2·log(4e³/e^{…})) with log(4|Q||W|/δ) = ln 4 + 2 − ln(2/e) = ln 2 + 3,
        // init: 1·sqrt(2·(ln 2 + 2)/8).
        let main = 2.0 * (2.0 * (2f64.ln() + 3.0) / 8.0).sqrt();
        let init = (2.0 * (2f64.ln() + 2.0) / 8.0).sqrt();
        let expected = 2.0 * (main + init).sqrt();
        let b = theorem2_bound(&pinned()).unwrap();
        assert!((b - expected).abs() < 1e-12);
        let no_init = theorem2_bound(&BoundInputs { n0: 0, ..pinned() }).unwrap();
        assert!((no_init - 2.0 * main.sqrt()).abs() < 1e-12);
        assert!(theorem2_bound(&BoundInputs { gamma: 1.0, ..pinned() }).is_err());
        assert!(theorem1_bound(&BoundInputs { delta: 1.0, ..pinned() }).is_err());
    }
}
