//! The Gridwalk benchmark: a `width × height` grid with four compass moves,
//! a goal in the lower-right corner, a right-then-down target policy and a
//! behavior policy that mostly drifts down and left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    initial_sa_dist, occupancy_with, transition_matrix, weight_function, BellmanSystem, Policy, SAFunction,
    StateActionDist, TabularMdp,
};

pub const RIGHT: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const UP: usize = 3;
pub const N_ACTIONS: usize = 4;

const TARGET_INTERIOR: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
const TARGET_WALL: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
const BEHAVIOR_INTERIOR: [f64; 4] = [0.1, 0.4, 0.5, 0.0];
const BEHAVIOR_WALL: [f64; 4] = [0.0, 0.5, 0.5, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardShape {
    /// `r(s) = 1 / (1 + manhattan(s, goal))`, independent of the action.
    #[default]
    InverseManhattan,
}

/// How the data distribution `d^D` is derived from the behavior policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataDistribution {
    /// Discounted occupancy of the behavior policy from `μ0`.
    #[default]
    Exact,
    /// Expected state-action frequency of `rollout_horizon`-step behavior trajectories.
    Rollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridwalkConfig {
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub reward_shape: RewardShape,
    /// `p ∝ d^π ∘ 𝕀[w^π > p_threshold]`.
    pub p_threshold: f64,
    /// Weight of the uniform floor mixed into `d^D`.
    pub mix_eps: f64,
    pub data_distribution: DataDistribution,
    pub rollout_horizon: usize,
}

impl Default for GridwalkConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            gamma: 0.95,
            reward_shape: RewardShape::InverseManhattan,
            p_threshold: 50.0,
            mix_eps: 1e-4,
            data_distribution: DataDistribution::Exact,
            rollout_horizon: 100,
        }
    }
}

impl GridwalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} is outside [0, 1)", self.gamma)));
        }
        if !(self.p_threshold > 0.0) {
            return Err(Error::Config("p_threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_eps) {
            return Err(Error::Config("mix_eps must lie in [0, 1]".into()));
        }
        if self.data_distribution == DataDistribution::Rollout && self.rollout_horizon == 0 {
            return Err(Error::Config("rollout_horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, s: usize) -> (usize, usize) {
        (s / self.width, s % self.width)
    }

    pub fn goal(&self) -> usize {
        self.state(self.height - 1, self.width - 1)
    }

    fn at_right_wall(&self, s: usize) -> bool {
        self.coords(s).1 == self.width - 1
    }

    fn step(&self, s: usize, a: usize) -> usize {
        let (r, c) = self.coords(s);
        let (r, c) = match a {
            RIGHT => (r, (c + 1).min(self.width - 1)),
            DOWN => ((r + 1).min(self.height - 1), c),
            LEFT => (r, c.saturating_sub(1)),
            UP => (r.saturating_sub(1), c),
            _ => unreachable!("gridwalk has four actions"),
        };
        self.state(r, c)
    }

    fn distance_to_goal(&self, s: usize) -> usize {
        let (r, c) = self.coords(s);
        (self.height - 1 - r) + (self.width - 1 - c)
    }
}

/// The MDP with its target and behavior policies.
#[derive(Debug, Clone)]
pub struct Gridwalk {
    pub config: GridwalkConfig,
    pub mdp: TabularMdp,
    pub target: Policy,
    pub behavior: Policy,
}

pub fn build_gridwalk(cfg: &GridwalkConfig) -> Result<Gridwalk> {
    cfg.validate()?;
    let n_s = cfg.n_states();
    let mut transition = vec![0.0; n_s * N_ACTIONS * n_s];
    let mut reward = vec![0.0; n_s * N_ACTIONS];
    for s in 0..n_s {
        let r = match cfg.reward_shape {
            RewardShape::InverseManhattan => 1.0 / (1.0 + cfg.distance_to_goal(s) as f64),
        };
        for a in 0..N_ACTIONS {
            let sa = s * N_ACTIONS + a;
            transition[sa * n_s + cfg.step(s, a)] = 1.0;
            reward[sa] = r;
        }
    }
    let upper = cfg.height / 2;
    let mut mu0 = vec![0.0; n_s];
    for row in 0..upper {
        for col in 0..cfg.width {
            mu0[cfg.state(row, col)] = 1.0 / (upper * cfg.width) as f64;
        }
    }
    let mdp = TabularMdp::new(n_s, N_ACTIONS, transition, reward, cfg.gamma, mu0)?;

    let policy = |interior: [f64; 4], wall: [f64; 4]| {
        let probs = (0..n_s)
            .flat_map(|s| if cfg.at_right_wall(s) { wall } else { interior })
            .collect();
        Policy::new(n_s, N_ACTIONS, probs)
    };
    Ok(Gridwalk {
        config: cfg.clone(),
        target: policy(TARGET_INTERIOR, TARGET_WALL)?,
        behavior: policy(BEHAVIOR_INTERIOR, BEHAVIOR_WALL)?,
        mdp,
    })
}

/// Named members of the distribution family used for regularization and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistName {
    #[serde(rename = "d_D")]
    DataDist,
    #[serde(rename = "mu0_pi")]
    InitialPi,
    #[serde(rename = "d_pi")]
    OccupancyPi,
    #[serde(rename = "U")]
    Uniform,
    #[serde(rename = "p")]
    LeastCovered,
}

impl DistName {
    pub const ALL: [DistName; 5] = [
        DistName::DataDist,
        DistName::InitialPi,
        DistName::OccupancyPi,
        DistName::Uniform,
        DistName::LeastCovered,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DistName::DataDist => "d_D",
            DistName::InitialPi => "mu0_pi",
            DistName::OccupancyPi => "d_pi",
            DistName::Uniform => "U",
            DistName::LeastCovered => "p",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.label() == s)
    }
}

impl std::fmt::Display for DistName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// `{d^D, μ0^π, d^π, U, p}` together with `w^π`.
#[derive(Debug, Clone)]
pub struct DistributionFamily {
    pub d_d: StateActionDist,
    pub mu0_pi: StateActionDist,
    pub d_pi: StateActionDist,
    pub uniform: StateActionDist,
    pub p: StateActionDist,
    pub w_pi: SAFunction,
}

impl DistributionFamily {
    pub fn get(&self, name: DistName) -> &StateActionDist {
        match name {
            DistName::DataDist => &self.d_d,
            DistName::InitialPi => &self.mu0_pi,
            DistName::OccupancyPi => &self.d_pi,
            DistName::Uniform => &self.uniform,
            DistName::LeastCovered => &self.p,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (DistName, &StateActionDist)> {
        DistName::ALL.into_iter().map(move |n| (n, self.get(n)))
    }
}

/// Behavior data distribution before the uniform floor is mixed in.
fn raw_data_distribution(env: &Gridwalk) -> Result<StateActionDist> {
    let cfg = &env.config;
    let mu0_b = initial_sa_dist(&env.mdp, &env.behavior)?;
    match cfg.data_distribution {
        DataDistribution::Exact => occupancy_with(&BellmanSystem::new(&env.mdp, &env.behavior)?, &mu0_b),
        DataDistribution::Rollout => {
            let p_b = transition_matrix(&env.mdp, &env.behavior)?;
            let mut marginal = mu0_b.weights().to_vec();
            let mut total = vec![0.0; marginal.len()];
            for _ in 0..cfg.rollout_horizon {
                total.iter_mut().zip(&marginal).for_each(|(t, m)| *t += m);
                marginal = p_b.tr_matvec(&marginal);
            }
            StateActionDist::normalized(total)
        }
    }
}

pub fn distribution_family(env: &Gridwalk) -> Result<DistributionFamily> {
    let cfg = &env.config;
    let n_sa = env.mdp.n_pairs();
    let uniform = StateActionDist::uniform(n_sa);
    let raw = raw_data_distribution(env)?;
    let d_d = StateActionDist::normalized(
        raw.weights()
            .iter()
            .zip(uniform.weights())
            .map(|(d, u)| (1.0 - cfg.mix_eps) * d + cfg.mix_eps * u)
            .collect(),
    )?;
    let target_sys = BellmanSystem::new(&env.mdp, &env.target)?;
    let mu0_pi = initial_sa_dist(&env.mdp, &env.target)?;
    let d_pi = occupancy_with(&target_sys, &mu0_pi)?;
    let w_pi = weight_function(&d_pi, &d_d)?;
    let p = least_covered(&d_pi, &w_pi, cfg.p_threshold)?;
    Ok(DistributionFamily {
        d_d,
        mu0_pi,
        d_pi,
        uniform,
        p,
        w_pi,
    })
}

/// `p ∝ d^π ∘ 𝕀[w^π > threshold]`.
pub fn least_covered(d_pi: &StateActionDist, w_pi: &SAFunction, threshold: f64) -> Result<StateActionDist> {
    let masked: Vec<f64> = d_pi
        .weights()
        .iter()
        .zip(w_pi.values())
        .map(|(d, w)| if *w > threshold { *d } else { 0.0 })
        .collect();
    StateActionDist::normalized(masked).map_err(|_| {
        Error::EmptySupport(format!("no state-action pair reached by the target policy has w > {threshold}"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions() {
        let env = build_gridwalk(&GridwalkConfig::default()).unwrap();
        assert_eq!(env.mdp.n_pairs(), 400);
        let support = env.mdp.mu0().iter().filter(|p| **p > 0.0).count();
        assert_eq!(support, 50);
    }

    #[test]
    fn policies_follow_the_wall_rule() {
        let cfg = GridwalkConfig::default();
        let env = build_gridwalk(&cfg).unwrap();
        let interior = cfg.state(3, 4);
        let wall = cfg.state(3, 9);
        assert_eq!(env.behavior.action_probs(interior), &[0.1, 0.4, 0.5, 0.0]);
        assert_eq!(env.behavior.action_probs(wall), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(env.target.action_probs(interior), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(env.target.action_probs(wall), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn goal_reward_and_walls() {
        let cfg = GridwalkConfig::default();
        let env = build_gridwalk(&cfg).unwrap();
        let goal = cfg.goal();
        for a in 0..N_ACTIONS {
            assert_eq!(env.mdp.mean_reward()[goal * N_ACTIONS + a], 1.0);
        }
        // Moving up from the top row stays in place.
        assert_eq!(env.mdp.next_state_probs(cfg.state(0, 3) * N_ACTIONS + UP)[cfg.state(0, 3)], 1.0);
        assert_eq!(env.mdp.mean_reward()[0], 1.0 / 19.0);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        let cfg = GridwalkConfig {
            width: 1,
            ..GridwalkConfig::default()
        };
        assert!(matches!(build_gridwalk(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn family_is_valid() {
        let env = build_gridwalk(&GridwalkConfig::default()).unwrap();
        let fam = distribution_family(&env).unwrap();
        for (name, d) in fam.iter() {
            let total: f64 = d.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "{name}");
        }
        assert!(fam.uniform.weights().iter().all(|w| *w == 1.0 / 400.0));
        assert!(fam.d_d.weights().iter().all(|w| *w > 0.0));
        for i in fam.p.support() {
            assert!(fam.d_pi.weights()[i] > 0.0);
            assert!(fam.w_pi.values()[i] > 50.0);
        }
    }

    #[test]
    fn p_sits_in_poorly_covered_region() {
        let env = build_gridwalk(&GridwalkConfig::default()).unwrap();
        let fam = distribution_family(&env).unwrap();
        let max_dd_on_p = fam.p.support().map(|i| fam.d_d.weights()[i]).fold(0.0, f64::max);
        let mut on_dpi: Vec<f64> = fam.d_pi.support().map(|i| fam.d_d.weights()[i]).collect();
        on_dpi.sort_by(f64::total_cmp);
        let median = on_dpi[on_dpi.len() / 2];
        assert!(fam.p.support().count() > 0);
        assert!(max_dd_on_p <= median, "{max_dd_on_p} > {median}");
    }

    #[test]
    fn threshold_monotonicity() {
        let env = build_gridwalk(&GridwalkConfig::default()).unwrap();
        let fam = distribution_family(&env).unwrap();
        let mut prev = usize::MAX;
        for t in [1.0, 10.0, 50.0, 100.0, 500.0] {
            let size = least_covered(&fam.d_pi, &fam.w_pi, t).map_or(0, |p| p.support().count());
            assert!(size <= prev);
            prev = size;
        }
        assert!(matches!(least_covered(&fam.d_pi, &fam.w_pi, 1e12), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn rollout_data_distribution_is_valid() {
        let cfg = GridwalkConfig {
            data_distribution: DataDistribution::Rollout,
            ..GridwalkConfig::default()
        };
        let env = build_gridwalk(&cfg).unwrap();
        let fam = distribution_family(&env).unwrap();
        assert!(fam.d_d.weights().iter().all(|w| *w > 0.0));
        assert!((fam.d_d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
