//! Tabular MDPs, policies and exact policy-evaluation quantities.
//!
//! State-action pairs are flattened as `s * n_actions + a` everywhere in the
//! crate. Rewards enter every exact computation through their means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm_inf, sub, DenseMatrix, LuFactorization};

const ROW_SUM_TOL: f64 = 1e-12;
const DIST_SUM_TOL: f64 = 1e-10;

/// A finite discounted MDP described by its transition tensor and mean rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`
    transition: Vec<f64>,
    mean_reward: Vec<f64>,
    gamma: f64,
    mu0: Vec<f64>,
}

/// On-disk layout of [`TabularMdp`]; validated on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mu0: Vec<f64>,
    transition: Vec<f64>,
    mean_reward: Vec<f64>,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;
    fn try_from(f: MdpFile) -> Result<Self> {
        TabularMdp::new(f.n_states, f.n_actions, f.transition, f.mean_reward, f.gamma, f.mu0)
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        MdpFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            mu0: m.mu0,
            transition: m.transition,
            mean_reward: m.mean_reward,
        }
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        mean_reward: Vec<f64>,
        gamma: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("state and action spaces must be non-empty".into()));
        }
        let n_sa = n_states * n_actions;
        if transition.len() != n_sa * n_states {
            return Err(Error::InvalidMdp(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_sa * n_states
            )));
        }
        if mean_reward.len() != n_sa || mu0.len() != n_states {
            return Err(Error::InvalidMdp("reward or initial distribution has the wrong length".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma = {gamma} is outside [0, 1)")));
        }
        for (sa, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::InvalidMdp(format!("negative transition probability at pair {sa}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidMdp(format!("transition row {sa} sums to {total}")));
            }
        }
        if mean_reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidMdp("mean rewards must lie in [0, 1]".into()));
        }
        check_simplex(&mu0, ROW_SUM_TOL).map_err(|e| Error::InvalidMdp(format!("mu0: {e}")))?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            mean_reward,
            gamma,
            mu0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn mean_reward(&self) -> &[f64] {
        &self.mean_reward
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// Next-state distribution `P(· | s, a)` for the flattened pair index.
    #[inline]
    pub fn next_state_probs(&self, sa: usize) -> &[f64] {
        &self.transition[sa * self.n_states..(sa + 1) * self.n_states]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_simplex(v: &[f64], tol: f64) -> std::result::Result<(), String> {
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err("entries must be finite and non-negative".into());
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// Stochastic policy `π(a | s)` stored row-major by state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidPolicy(format!(
                "expected {} probabilities, got {}",
                n_states * n_actions,
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_simplex(row, ROW_SUM_TOL).map_err(|e| Error::InvalidPolicy(format!("state {s}: {e}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    #[inline]
    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn check_matches(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }

    /// `f(s, π) = Σ_a π(a|s) f(s, a)` for every state.
    pub fn state_average(&self, f: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| dot(self.action_probs(s), &f[s * self.n_actions..(s + 1) * self.n_actions]))
            .collect()
    }
}

/// Probability vector over flattened state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist(Vec<f64>);

impl StateActionDist {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, DIST_SUM_TOL).map_err(Error::InvalidDistribution)?;
        Ok(Self(weights))
    }

    /// Normalizes non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidDistribution("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptySupport("all weights are zero".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point_mass(n: usize, index: usize) -> Self {
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Self(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `E[f]` under this distribution.
    pub fn expect(&self, f: &[f64]) -> f64 {
        dot(&self.0, f)
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(i, _)| i)
    }
}

/// Real-valued function over flattened state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SAFunction(pub Vec<f64>);

impl SAFunction {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self(vec![c; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        norm_inf(&self.0)
    }
}

impl From<Vec<f64>> for SAFunction {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// State-action transition operator `P^π`, entry `((s,a),(s',a')) = P(s'|s,a) π(a'|s')`.
pub fn transition_matrix(mdp: &TabularMdp, pol: &Policy) -> Result<DenseMatrix> {
    pol.check_matches(mdp)?;
    let n_sa = mdp.n_pairs();
    let na = mdp.n_actions;
    let mut p = DenseMatrix::zeros(n_sa, n_sa);
    for sa in 0..n_sa {
        for (s2, &prob) in mdp.next_state_probs(sa).iter().enumerate() {
            if prob == 0.0 {
                continue;
            }
            for (a2, &pi) in pol.action_probs(s2).iter().enumerate() {
                if pi != 0.0 {
                    p.add_to(sa, s2 * na + a2, prob * pi);
                }
            }
        }
    }
    Ok(p)
}

/// `(P^π f)(s,a) = E_{s'~P(·|s,a)}[f(s', π)]`, computed without forming `P^π`.
pub fn apply_transition(mdp: &TabularMdp, pol: &Policy, f: &[f64]) -> Vec<f64> {
    let v = pol.state_average(f);
    (0..mdp.n_pairs()).map(|sa| dot(mdp.next_state_probs(sa), &v)).collect()
}

/// Factorized Bellman systems `I − γP^π` and its transpose `I − γP̃^π` for one policy.
///
/// Every exact quantity in the crate (q^π, occupancies, closed-form duals,
/// discriminator features) is a solve against one of these two systems, so
/// they are factorized once and reused.
#[derive(Debug, Clone)]
pub struct BellmanSystem {
    gamma: f64,
    p_pi: DenseMatrix,
    lu: LuFactorization,
}

impl BellmanSystem {
    pub fn new(mdp: &TabularMdp, pol: &Policy) -> Result<Self> {
        let p_pi = transition_matrix(mdp, pol)?;
        let n = p_pi.rows();
        let mut a = DenseMatrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                let v = p_pi.get(i, j);
                if v != 0.0 {
                    a.add_to(i, j, -mdp.gamma * v);
                }
            }
        }
        let lu = LuFactorization::new(&a)?;
        Ok(Self {
            gamma: mdp.gamma,
            p_pi,
            lu,
        })
    }

    pub fn transition(&self) -> &DenseMatrix {
        &self.p_pi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `(I − γP^π)⁻¹ v`, with one step of iterative refinement.
    pub fn solve_forward(&self, v: &[f64]) -> Vec<f64> {
        let mut x = self.lu.solve(v);
        let correction = self.lu.solve(&sub(v, &self.apply_forward(&x)));
        x.iter_mut().zip(correction).for_each(|(a, c)| *a += c);
        x
    }

    /// `(I − γP̃^π)⁻¹ v` with `P̃^π = (P^π)ᵀ`, with one step of iterative refinement.
    pub fn solve_adjoint(&self, v: &[f64]) -> Vec<f64> {
        let mut x = self.lu.solve_transpose(v);
        let correction = self.lu.solve_transpose(&sub(v, &self.apply_adjoint(&x)));
        x.iter_mut().zip(correction).for_each(|(a, c)| *a += c);
        x
    }

    /// `(I − γP^π) v`
    pub fn apply_forward(&self, v: &[f64]) -> Vec<f64> {
        let pv = self.p_pi.matvec(v);
        v.iter().zip(pv).map(|(x, y)| x - self.gamma * y).collect()
    }

    /// `(I − γP̃^π) v`
    pub fn apply_adjoint(&self, v: &[f64]) -> Vec<f64> {
        let pv = self.p_pi.tr_matvec(v);
        v.iter().zip(pv).map(|(x, y)| x - self.gamma * y).collect()
    }
}

/// `q^π = (I − γP^π)⁻¹ r̄`.
pub fn exact_q(mdp: &TabularMdp, pol: &Policy) -> Result<SAFunction> {
    Ok(SAFunction(BellmanSystem::new(mdp, pol)?.solve_forward(&mdp.mean_reward)))
}

/// `T^π q = r̄ + γ P^π q`.
pub fn bellman_backup(mdp: &TabularMdp, pol: &Policy, q: &SAFunction) -> SAFunction {
    let pq = apply_transition(mdp, pol, &q.0);
    SAFunction(
        mdp.mean_reward
            .iter()
            .zip(pq)
            .map(|(r, v)| r + mdp.gamma * v)
            .collect(),
    )
}

/// Discounted occupancy of `pol` started from `init`: `(1−γ)(I − γP̃^π)⁻¹ init`.
pub fn occupancy(mdp: &TabularMdp, pol: &Policy, init: &StateActionDist) -> Result<StateActionDist> {
    let sys = BellmanSystem::new(mdp, pol)?;
    occupancy_with(&sys, init)
}

pub fn occupancy_with(sys: &BellmanSystem, init: &StateActionDist) -> Result<StateActionDist> {
    let scaled: Vec<f64> = init.weights().iter().map(|w| (1.0 - sys.gamma) * w).collect();
    // Unreachable pairs have occupancy exactly 0; snap round-off of either sign to it.
    let raw = sys.solve_adjoint(&scaled);
    let floor = raw.len() as f64 * f64::EPSILON * norm_inf(&raw);
    let d: Vec<f64> = raw.into_iter().map(|x| if x <= floor { 0.0 } else { x }).collect();
    StateActionDist::normalized(d)
}

/// `μ0^π(s,a) = μ0(s) π(a|s)`.
pub fn initial_sa_dist(mdp: &TabularMdp, pol: &Policy) -> Result<StateActionDist> {
    pol.check_matches(mdp)?;
    let w = (0..mdp.n_pairs())
        .map(|sa| {
            let (s, a) = (sa / mdp.n_actions, sa % mdp.n_actions);
            mdp.mu0[s] * pol.prob(s, a)
        })
        .collect();
    StateActionDist::new(w)
}

/// `w = d_π / d_D`, requiring `d_D > 0` everywhere.
pub fn weight_function(d_pi: &StateActionDist, d_d: &StateActionDist) -> Result<SAFunction> {
    if d_pi.len() != d_d.len() {
        return Err(Error::DimensionMismatch("distributions differ in length".into()));
    }
    ratio(d_pi.weights(), d_d).map(SAFunction)
}

/// Elementwise `num ⊘ d_D`.
pub(crate) fn ratio(num: &[f64], d_d: &StateActionDist) -> Result<Vec<f64>> {
    num.iter()
        .zip(d_d.weights())
        .enumerate()
        .map(|(i, (n, d))| {
            if *d <= 0.0 {
                Err(Error::ZeroDenominator { index: i, value: *d })
            } else {
                Ok(n / d)
            }
        })
        .collect()
}

/// Normalized return `(1−γ) E_{s0~μ0}[q^π(s0, π)]`, in `[0, 1]` for rewards in `[0, 1]`.
pub fn return_of(mdp: &TabularMdp, pol: &Policy) -> Result<f64> {
    let q = exact_q(mdp, pol)?;
    let mu0_pi = initial_sa_dist(mdp, pol)?;
    Ok((1.0 - mdp.gamma) * mu0_pi.expect(&q.0))
}

/// The same return computed as `⟨d^π, r̄⟩`.
pub fn return_via_occupancy(mdp: &TabularMdp, pol: &Policy) -> Result<f64> {
    let mu0_pi = initial_sa_dist(mdp, pol)?;
    let d_pi = occupancy(mdp, pol, &mu0_pi)?;
    Ok(d_pi.expect(&mdp.mean_reward))
}

/// Unnormalized return `E[Σ_t γᵗ r_t]`.
pub fn discounted_return(mdp: &TabularMdp, pol: &Policy) -> Result<f64> {
    Ok(return_of(mdp, pol)? / (1.0 - mdp.gamma))
}
