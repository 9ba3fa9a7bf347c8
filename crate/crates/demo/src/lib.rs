//! Browser front end: Gridwalk heatmaps, a single regularized value
//! estimate, and a model-quality sweep. Every export takes and returns JSON
//! so the page needs no bindings beyond strings; the same functions are
//! callable natively for testing.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use regmis::estimators::weighted_l2_error;
use regmis::experiments::{
    median, run_condition, run_experiment, Condition, DataSource, ExperimentConfig, ExperimentKind, ExperimentSetup,
    RegChoice,
};
use regmis::gridwalk::{DistName, GridwalkConfig};
use regmis::mdp::{Policy, SAFunction, StateActionDist};
use regmis::ope::j_q;
use regmis::sampling::{sample_initial, sample_transitions, SeedSpec};

/// One per-state field over the grid, row-major by state index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heatmaps {
    pub width: usize,
    pub height: usize,
    pub goal: usize,
    pub j_true: f64,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateRequest {
    pub gridwalk: GridwalkConfig,
    /// Regularizing distribution label, or `none`.
    pub reg: String,
    pub n: usize,
    pub seed: u64,
    pub replicate: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResponse {
    pub width: usize,
    pub height: usize,
    /// `Σ_a π(a|s) q̂(s,a)`.
    pub estimate: Vec<f64>,
    /// `Σ_a π(a|s) q^π(s,a)`.
    pub truth: Vec<f64>,
    /// Weighted L2 error under each named distribution.
    pub errors: Vec<(String, f64)>,
    pub j_q: f64,
    pub j_true: f64,
    pub constraint_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRequest {
    pub gridwalk: GridwalkConfig,
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub m_grid: Vec<f64>,
    pub masked: bool,
}

impl Default for SweepRequest {
    fn default() -> Self {
        Self {
            gridwalk: GridwalkConfig::default(),
            n: 500,
            runs: 10,
            seed: 0,
            m_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            masked: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResponse {
    pub m: Vec<f64>,
    /// Median estimator error under `U` at each `m`.
    pub estimator: Vec<f64>,
    /// Error of the anchor model itself at each `m`.
    pub model: Vec<f64>,
}

fn parse<T: for<'de> Deserialize<'de> + Default>(json: &str) -> Result<T, String> {
    if json.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(json).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn setup_for(gridwalk: &GridwalkConfig) -> Result<(ExperimentConfig, ExperimentSetup), String> {
    let cfg = ExperimentConfig {
        gridwalk: gridwalk.clone(),
        ..ExperimentConfig::default()
    };
    let setup = ExperimentSetup::new(&cfg).map_err(|e| e.to_string())?;
    Ok((cfg, setup))
}

fn state_marginal(dist: &StateActionDist, n_actions: usize) -> Vec<f64> {
    dist.weights().chunks(n_actions).map(|c| c.iter().sum()).collect()
}

fn state_values(pol: &Policy, q: &SAFunction) -> Vec<f64> {
    pol.state_average(q.values())
}

/// Per-state value, occupancies, weight ratio and least-covered mass.
pub fn heatmaps(gridwalk_json: &str) -> Result<String, String> {
    let gridwalk: GridwalkConfig = parse(gridwalk_json)?;
    let (_, setup) = setup_for(&gridwalk)?;
    let na = setup.env.mdp.n_actions();
    let fam = &setup.family;
    let d_pi = state_marginal(&fam.d_pi, na);
    let d_d = state_marginal(&fam.d_d, na);
    let ratio = d_pi.iter().zip(&d_d).map(|(p, d)| p / d).collect();
    let layer = |name: &str, values: Vec<f64>| Layer {
        name: name.to_string(),
        values,
    };
    to_json(&Heatmaps {
        width: gridwalk.width,
        height: gridwalk.height,
        goal: gridwalk.goal(),
        j_true: setup.j_true,
        layers: vec![
            layer("value", state_values(&setup.env.target, &setup.q_pi)),
            layer("target occupancy", d_pi),
            layer("data occupancy", d_d),
            layer("weight", ratio),
            layer("least covered", state_marginal(&fam.p, na)),
        ],
    })
}

/// One sampled value estimate under the requested regularizer.
pub fn estimate(request_json: &str) -> Result<String, String> {
    let req: EstimateRequest = parse(request_json)?;
    let reg = if req.reg.is_empty() { "U" } else { req.reg.as_str() };
    let reg = RegChoice::try_from(reg.to_string()).map_err(|e| e.to_string())?;
    let n = if req.n == 0 { 500 } else { req.n };
    let (cfg, setup) = setup_for(&req.gridwalk)?;
    let mdp = &setup.env.mdp;
    let pol = &setup.env.target;
    let seed = SeedSpec::new(req.seed, req.replicate);
    let data = sample_transitions(mdp, &setup.family.d_d, n, seed).map_err(|e| e.to_string())?;
    let init = sample_initial(mdp, n, seed);
    let cond = Condition {
        reg,
        m: None,
        masked: false,
        with_weights: false,
    };
    let res = run_condition(&setup, &cfg, &DataSource::Sampled { data: &data, init: &init }, &cond)
        .map_err(|e| e.to_string())?;
    let errors = setup
        .family
        .iter()
        .map(|(name, d)| (name.label().to_string(), weighted_l2_error(&res.q_hat, &setup.q_pi, d)))
        .collect();
    to_json(&EstimateResponse {
        width: req.gridwalk.width,
        height: req.gridwalk.height,
        estimate: state_values(pol, &res.q_hat),
        truth: state_values(pol, &setup.q_pi),
        errors,
        j_q: j_q(&res.q_hat, &init, pol, mdp.gamma()).map_err(|e| e.to_string())?,
        j_true: setup.j_true,
        constraint_residual: res.constraint_residual,
    })
}

/// Median estimator error and model error across model qualities, `ν = ν' = U`.
pub fn model_sweep(request_json: &str) -> Result<String, String> {
    let req: SweepRequest = parse(request_json)?;
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Fig2,
        sample_sizes: vec![req.n],
        n_runs: req.runs,
        master_seed: req.seed,
        reg_distributions: vec![RegChoice::Dist(DistName::Uniform)],
        eval_distributions: vec![DistName::Uniform],
        m_grid: req.m_grid.clone(),
        masked: req.masked,
        gridwalk: req.gridwalk.clone(),
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let mut estimator = Vec::with_capacity(req.m_grid.len());
    let mut model = Vec::with_capacity(req.m_grid.len());
    for &m in &req.m_grid {
        let at_m = |label: &str| -> Vec<f64> {
            out.rows
                .iter()
                .filter(|r| r.reg_dist == label && r.m == Some(m))
                .filter_map(|r| r.error)
                .collect()
        };
        let est = at_m(DistName::Uniform.label());
        let base = at_m("model");
        if est.is_empty() || base.is_empty() {
            return Err(format!("no successful estimates at m = {m}"));
        }
        estimator.push(median(&est));
        model.push(base[0]);
    }
    to_json(&SweepResponse {
        m: req.m_grid,
        estimator,
        model,
    })
}

#[wasm_bindgen(js_name = heatmaps)]
pub fn heatmaps_js(gridwalk_json: &str) -> Result<String, JsError> {
    heatmaps(gridwalk_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = estimate)]
pub fn estimate_js(request_json: &str) -> Result<String, JsError> {
    estimate(request_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = modelSweep)]
pub fn model_sweep_js(request_json: &str) -> Result<String, JsError> {
    model_sweep(request_json).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_requests_parse_to_defaults() {
        let req: SweepRequest = parse("  ").unwrap();
        assert_eq!(req.m_grid.len(), 10);
        assert!(parse::<SweepRequest>(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn state_marginal_sums_actions() {
        let d = StateActionDist::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = state_marginal(&d, 2);
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.7).abs() < 1e-15);
    }
}
