//! Replicate harness for the Gridwalk experiments.
//!
//! Every condition is evaluated by [`run_condition`], which is also the
//! standalone entry point for reproducing a single row. Replicates are
//! independent tasks keyed by [`SeedSpec`]; rows are sorted by their sweep
//! key before they are written, so the output never depends on scheduling.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate_q, estimate_w, population_mode, Empirical, Expectations, LinearEstimate, Weighting};
use crate::features::{aggregate_by_value, discriminator_features_fig1, discriminator_features_fig2, model_mask, LinearClass};
use crate::gridwalk::{build_gridwalk, distribution_family, DistName, DistributionFamily, Gridwalk, GridwalkConfig};
use crate::mdp::{exact_q, return_of, BellmanSystem, SAFunction};
use crate::ope::{j_dr, j_dr_with, j_q, j_q_with, j_w, j_w_with, DrVariant};
use crate::regularizers::{uniform_model, ModelMean, Regularizer};
use crate::saddle::q_star;
use crate::sampling::{sample_initial, sample_transitions, Dataset, InitDataset, SeedSpec, RNG_ALGORITHM};

/// Column order of the result CSV.
pub const CSV_COLUMNS: [&str; 14] = [
    "experiment",
    "replicate",
    "n",
    "n0",
    "reg_dist",
    "eval_dist",
    "m",
    "masked",
    "error",
    "return_error_q",
    "return_error_w",
    "return_error_dr",
    "constraint_residual",
    "seed",
];

/// Written as the last line of a CSV whose sweep was interrupted.
pub const TRUNCATION_MARKER: &str = "# TRUNCATED";

const BOOTSTRAP_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Regularizing distribution against evaluation distribution.
    #[default]
    Fig1,
    /// Model-anchored regularizer against model quality.
    Fig2,
    /// Return estimators from separately fitted value and weight estimates.
    OpeCompare,
    /// Value error against sample size.
    Rate,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Fig2 => "fig2",
            ExperimentKind::OpeCompare => "ope_compare",
            ExperimentKind::Rate => "rate",
        }
    }
}

/// A regularizing condition: one of the named distributions or none at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RegChoice {
    Dist(DistName),
    /// Minimum-norm solution of the constraints alone.
    None,
}

impl RegChoice {
    pub fn label(self) -> &'static str {
        match self {
            RegChoice::Dist(d) => d.label(),
            RegChoice::None => "none",
        }
    }

    pub fn all() -> Vec<RegChoice> {
        DistName::ALL.into_iter().map(RegChoice::Dist).chain([RegChoice::None]).collect()
    }
}

impl TryFrom<String> for RegChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s == "none" {
            return Ok(RegChoice::None);
        }
        DistName::parse(&s)
            .map(RegChoice::Dist)
            .ok_or_else(|| Error::Config(format!("unknown regularizing distribution `{s}`")))
    }
}

impl From<RegChoice> for String {
    fn from(r: RegChoice) -> String {
        r.label().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Decimals used to aggregate pairs by their true value.
    pub decimals: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { decimals: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Ascending; datasets for smaller sizes are prefixes of larger ones.
    pub sample_sizes: Vec<usize>,
    pub n_runs: usize,
    pub master_seed: u64,
    /// Initial-state sample size; defaults to `n`.
    pub n0: Option<usize>,
    pub reg_distributions: Vec<RegChoice>,
    pub eval_distributions: Vec<DistName>,
    pub m_grid: Vec<f64>,
    pub masked: bool,
    pub model_mean: ModelMean,
    pub dr_variant: DrVariant,
    /// Replace every empirical average by its exact expectation.
    pub population: bool,
    pub bootstrap_resamples: usize,
    pub gridwalk: GridwalkConfig,
    pub features: FeatureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Fig1,
            sample_sizes: vec![125, 250, 500, 1000, 2000, 4000, 8000],
            n_runs: 200,
            master_seed: 0,
            n0: None,
            reg_distributions: RegChoice::all(),
            eval_distributions: DistName::ALL.to_vec(),
            m_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            masked: false,
            model_mean: ModelMean::AllPairs,
            dr_variant: DrVariant::Discounted,
            population: false,
            bootstrap_resamples: 1000,
            gridwalk: GridwalkConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if !self.population {
            if self.sample_sizes.is_empty() || self.sample_sizes[0] == 0 {
                return Err(Error::Config("sample_sizes must be non-empty and positive".into()));
            }
            if self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("sample_sizes must be strictly ascending".into()));
            }
            if self.experiment == ExperimentKind::Rate && self.sample_sizes.len() < 4 {
                return Err(Error::Config("the rate experiment needs at least 4 sample sizes".into()));
            }
        }
        if self.n0 == Some(0) {
            return Err(Error::Config("n0 must be positive".into()));
        }
        if self.reg_distributions.is_empty() || self.eval_distributions.is_empty() {
            return Err(Error::Config("distribution lists must be non-empty".into()));
        }
        if self.experiment == ExperimentKind::Fig2 {
            if self.m_grid.is_empty() {
                return Err(Error::Config("m_grid must be non-empty".into()));
            }
            if let Some(m) = self.m_grid.iter().find(|m| !(0.0..=1.0).contains(*m)) {
                return Err(Error::Config(format!("model quality {m} is outside [0, 1]")));
            }
        }
        self.gridwalk.validate()
    }

    /// Sample sizes actually swept; population mode uses the single size 0.
    pub fn swept_sizes(&self) -> Vec<usize> {
        if self.population {
            vec![0]
        } else {
            self.sample_sizes.clone()
        }
    }

    fn runs(&self) -> usize {
        if self.population {
            1
        } else {
            self.n_runs
        }
    }

    fn n0_for(&self, n: usize) -> usize {
        self.n0.unwrap_or(n)
    }
}

/// Everything that is computed once per configuration.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub env: Gridwalk,
    pub family: DistributionFamily,
    pub q_pi: SAFunction,
    pub j_true: f64,
    /// Value-aggregation primal class.
    pub value_class: LinearClass,
    pub fig1_disc: LinearClass,
    pub fig2_disc: LinearClass,
    /// Indicators of `supp(d^π)`, which realize `w^π`.
    pub weight_class: LinearClass,
    /// `{q^π} ∪ {q*_f(η) : η ∈ 𝒱}` for `f = ½x²`, used without regularization.
    pub weight_disc: LinearClass,
    /// `{q^π, q*_f(η)}` per regularizing `η`; the smallest class that realizes
    /// the dual, which keeps the sampled constraints well conditioned.
    pub weight_disc_by_dist: BTreeMap<DistName, LinearClass>,
}

impl ExperimentSetup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let env = build_gridwalk(&cfg.gridwalk)?;
        let family = distribution_family(&env)?;
        let sys = BellmanSystem::new(&env.mdp, &env.target)?;
        let q_pi = exact_q(&env.mdp, &env.target)?;
        let j_true = return_of(&env.mdp, &env.target)?;
        let value_class = aggregate_by_value(&q_pi, cfg.features.decimals)?;
        let fig1_disc = discriminator_features_fig1(&sys, &family, &q_pi, &family.d_d)?;
        let mask = model_mask(&family.p, cfg.masked);
        let fig2_disc = discriminator_features_fig2(&sys, &family, &q_pi, &family.d_d, &mask)?;
        let n_pairs = env.mdp.n_pairs();
        let support: Vec<usize> = family.d_pi.support().collect();
        let weight_class = LinearClass::indicators("occupancy-support", n_pairs, &support)?;
        let mut cols = vec![q_pi.0.clone()];
        let mut weight_disc_by_dist = BTreeMap::new();
        for (name, eta) in family.iter() {
            let dual = q_star(&sys, eta, &family.w_pi, &family.d_d)?.dual.0;
            let pair = vec![q_pi.0.clone(), dual.clone()];
            weight_disc_by_dist.insert(name, LinearClass::from_scaled_columns("weight-discriminator", n_pairs, pair)?);
            cols.push(dual);
        }
        let weight_disc = LinearClass::from_scaled_columns("weight-discriminator", n_pairs, cols)?;
        Ok(Self {
            env,
            family,
            q_pi,
            j_true,
            value_class,
            fig1_disc,
            fig2_disc,
            weight_class,
            weight_disc,
            weight_disc_by_dist,
        })
    }

    fn gamma(&self) -> f64 {
        self.env.mdp.gamma()
    }
}

/// One row of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: ExperimentKind,
    pub replicate: usize,
    pub n: usize,
    pub n0: usize,
    /// A [`RegChoice`] label, or `model` for the model-prediction baseline.
    pub reg_dist: String,
    pub eval_dist: Option<DistName>,
    pub m: Option<f64>,
    pub masked: Option<bool>,
    pub error: Option<f64>,
    pub return_error_q: Option<f64>,
    pub return_error_w: Option<f64>,
    pub return_error_dr: Option<f64>,
    pub constraint_residual: Option<f64>,
    pub seed: Option<u64>,
    /// Estimator failure for this condition, if any.
    pub failure: Option<String>,
    #[serde(skip)]
    key: RowKey,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    replicate: usize,
    n: usize,
    reg: usize,
    m: usize,
    eval: usize,
}

/// What one estimator call produced for a single (seed, n, condition).
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub q_hat: SAFunction,
    pub w_hat: Option<SAFunction>,
    pub constraint_residual: f64,
    pub return_error_q: f64,
    pub return_error_w: Option<f64>,
    pub return_error_dr: Option<f64>,
}

/// A single regularization condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub reg: RegChoice,
    /// Model quality of a model-anchored regularizer; `None` anchors at zero.
    pub m: Option<f64>,
    pub masked: bool,
    /// Also fit the weight estimate and the weight-based returns.
    pub with_weights: bool,
}

/// Data for one replicate at one sample size.
pub enum DataSource<'a> {
    Sampled { data: &'a Dataset, init: &'a InitDataset },
    Population,
}

/// Fits the condition on the given data and scores its return estimates.
pub fn run_condition(
    setup: &ExperimentSetup,
    cfg: &ExperimentConfig,
    source: &DataSource<'_>,
    cond: &Condition,
) -> Result<ConditionResult> {
    let mdp = &setup.env.mdp;
    let pol = &setup.env.target;
    let gamma = setup.gamma();
    let n_pairs = mdp.n_pairs();
    let exp: Box<dyn Expectations + '_> = match source {
        DataSource::Sampled { data, init } => Box::new(Empirical::new(mdp, data, Some(init))?),
        DataSource::Population => Box::new(population_mode(mdp, &setup.family.d_d)?),
    };

    let value_reg = match cond.m {
        Some(m) => Regularizer::quadratic(uniform_model(&setup.q_pi, m, &setup.family.p, cond.masked, cfg.model_mean)?)?,
        None => Regularizer::squared_norm(n_pairs),
    };
    let disc = if cond.m.is_some() { &setup.fig2_disc } else { &setup.fig1_disc };
    let value_weighting = match cond.reg {
        RegChoice::Dist(d) => Some(Weighting {
            reg: &value_reg,
            dist: setup.family.get(d),
        }),
        RegChoice::None => None,
    };
    let q_est: LinearEstimate = estimate_q(exp.as_ref(), &setup.value_class, disc, value_weighting, pol, gamma)?;
    let jq = match source {
        DataSource::Sampled { init, .. } => j_q(&q_est.values, init, pol, gamma)?,
        DataSource::Population => j_q_with(exp.as_ref(), &q_est.values, pol, gamma)?,
    };

    let mut out = ConditionResult {
        return_error_q: (jq - setup.j_true).abs(),
        constraint_residual: q_est.constraint_residual,
        q_hat: q_est.values,
        w_hat: None,
        return_error_w: None,
        return_error_dr: None,
    };
    if cond.with_weights {
        let weight_reg = Regularizer::squared_norm(n_pairs);
        let (weight_weighting, weight_disc) = match cond.reg {
            RegChoice::Dist(d) => (
                Some(Weighting {
                    reg: &weight_reg,
                    dist: setup.family.get(d),
                }),
                &setup.weight_disc_by_dist[&d],
            ),
            RegChoice::None => (None, &setup.weight_disc),
        };
        let w_est = estimate_w(exp.as_ref(), &setup.weight_class, weight_disc, weight_weighting, pol, gamma)?;
        let (jw, jdr) = match source {
            DataSource::Sampled { data, init } => (
                j_w(&w_est.values, data, mdp.n_actions())?,
                j_dr(&out.q_hat, &w_est.values, data, init, pol, gamma, cfg.dr_variant)?,
            ),
            DataSource::Population => (
                j_w_with(exp.as_ref(), &w_est.values)?,
                j_dr_with(exp.as_ref(), &out.q_hat, &w_est.values, pol, gamma, cfg.dr_variant)?,
            ),
        };
        out.return_error_w = Some((jw - setup.j_true).abs());
        out.return_error_dr = Some((jdr - setup.j_true).abs());
        out.w_hat = Some(w_est.values);
    }
    Ok(out)
}

/// Result table plus whether the sweep was cut short.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub truncated: bool,
    pub failed_rows: usize,
}

/// Runs the configured experiment to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, None)
}

pub fn run_fig1(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_as(cfg, ExperimentKind::Fig1)
}

pub fn run_fig2(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_as(cfg, ExperimentKind::Fig2)
}

pub fn run_ope_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_as(cfg, ExperimentKind::OpeCompare)
}

/// Rate sweep and the log-log fit of its median errors.
pub fn run_rate(cfg: &ExperimentConfig) -> Result<(ExperimentOutput, RateFit)> {
    let out = run_as(cfg, ExperimentKind::Rate)?;
    let reg = cfg.reg_distributions[0];
    let eval = cfg.eval_distributions[0];
    let fit = rate_fit(&out.rows, |r| {
        (r.reg_dist == reg.label() && r.eval_dist == Some(eval)).then_some(r.error).flatten()
    })?;
    Ok((out, fit))
}

fn run_as(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentOutput> {
    let mut cfg = cfg.clone();
    cfg.experiment = kind;
    run_experiment(&cfg)
}

/// Runs the configured experiment; replicates not yet started when `cancel`
/// is raised are skipped and the output is marked truncated.
pub fn run_experiment_with(cfg: &ExperimentConfig, cancel: Option<&AtomicBool>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let setup = ExperimentSetup::new(cfg)?;
    let replicates: Vec<usize> = (0..cfg.runs()).collect();
    let task = |r: usize| -> Option<Vec<ResultRow>> {
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            return None;
        }
        Some(replicate_rows(&setup, cfg, r))
    };
    #[cfg(feature = "parallel")]
    let chunks: Vec<Option<Vec<ResultRow>>> = {
        use rayon::prelude::*;
        replicates.into_par_iter().map(task).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chunks: Vec<Option<Vec<ResultRow>>> = replicates.into_iter().map(task).collect();

    let truncated = chunks.iter().any(Option::is_none);
    let mut rows: Vec<ResultRow> = chunks.into_iter().flatten().flatten().collect();
    if cfg.experiment == ExperimentKind::Fig2 && !truncated {
        rows.extend(model_rows(&setup, cfg));
    }
    rows.sort_by_key(|r| r.key);
    let failed_rows = rows.iter().filter(|r| r.failure.is_some()).count();
    Ok(ExperimentOutput {
        rows,
        truncated,
        failed_rows,
    })
}

fn replicate_rows(setup: &ExperimentSetup, cfg: &ExperimentConfig, replicate: usize) -> Vec<ResultRow> {
    let mdp = &setup.env.mdp;
    let sizes = cfg.swept_sizes();
    let seed = SeedSpec::new(cfg.master_seed, replicate as u64);
    let sampled = if cfg.population {
        None
    } else {
        let n_max = *sizes.last().expect("validated non-empty");
        let n0_max = sizes.iter().map(|&n| cfg.n0_for(n)).max().expect("non-empty");
        match sample_transitions(mdp, &setup.family.d_d, n_max, seed) {
            Ok(data) => Some(Ok((data, sample_initial(mdp, n0_max, seed)))),
            Err(e) => Some(Err(e.to_string())),
        }
    };

    let m_values: Vec<Option<f64>> = match cfg.experiment {
        ExperimentKind::Fig2 => cfg.m_grid.iter().map(|m| Some(*m)).collect(),
        _ => vec![None],
    };
    let with_weights = cfg.experiment == ExperimentKind::OpeCompare;
    let mut rows = Vec::new();
    for &n in &sizes {
        let n0 = if cfg.population { 0 } else { cfg.n0_for(n) };
        let prefixes = match &sampled {
            Some(Ok((data, init))) => Some(Ok((data.prefix(n), init.prefix(n0)))),
            Some(Err(e)) => Some(Err(e.clone())),
            None => None,
        };
        for (ri, &reg) in cfg.reg_distributions.iter().enumerate() {
            // The unregularized estimate does not depend on the model.
            let mut unregularized: Option<std::result::Result<ConditionResult, String>> = None;
            for (mi, &m) in m_values.iter().enumerate() {
                let cond = Condition {
                    reg,
                    m: if reg == RegChoice::None { None } else { m },
                    masked: cfg.masked,
                    with_weights,
                };
                let compute = || match &prefixes {
                    None => run_condition(setup, cfg, &DataSource::Population, &cond).map_err(|e| e.to_string()),
                    Some(Ok((data, init))) => {
                        run_condition(setup, cfg, &DataSource::Sampled { data, init }, &cond).map_err(|e| e.to_string())
                    }
                    Some(Err(e)) => Err(e.clone()),
                };
                let result = if reg == RegChoice::None {
                    unregularized.get_or_insert_with(compute).clone()
                } else {
                    compute()
                };
                for (ei, &eval) in cfg.eval_distributions.iter().enumerate() {
                    let dist = setup.family.get(eval);
                    let mut row = ResultRow {
                        experiment: cfg.experiment,
                        replicate,
                        n,
                        n0,
                        reg_dist: reg.label().to_string(),
                        eval_dist: Some(eval),
                        m,
                        masked: m.map(|_| cfg.masked),
                        error: None,
                        return_error_q: None,
                        return_error_w: None,
                        return_error_dr: None,
                        constraint_residual: None,
                        seed: (!cfg.population).then(|| seed.fingerprint()),
                        failure: None,
                        key: RowKey {
                            replicate,
                            n,
                            reg: ri,
                            m: mi,
                            eval: ei,
                        },
                    };
                    match &result {
                        Ok(res) => {
                            row.error = Some(crate::estimators::weighted_l2_error(&res.q_hat, &setup.q_pi, dist));
                            row.return_error_q = Some(res.return_error_q);
                            row.return_error_w = res.return_error_w;
                            row.return_error_dr = res.return_error_dr;
                            row.constraint_residual = Some(res.constraint_residual);
                        }
                        Err(e) => row.failure = Some(e.clone()),
                    }
                    rows.push(row);
                }
            }
        }
    }
    rows
}

/// Rows for the model prediction `q̂ = q̃` itself; it uses no data.
fn model_rows(setup: &ExperimentSetup, cfg: &ExperimentConfig) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for n in cfg.swept_sizes() {
        for (mi, &m) in cfg.m_grid.iter().enumerate() {
            let model = uniform_model(&setup.q_pi, m, &setup.family.p, cfg.masked, cfg.model_mean);
            for (ei, &eval) in cfg.eval_distributions.iter().enumerate() {
                let (error, failure) = match &model {
                    Ok(q) => (Some(crate::estimators::weighted_l2_error(q, &setup.q_pi, setup.family.get(eval))), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                rows.push(ResultRow {
                    experiment: cfg.experiment,
                    replicate: 0,
                    n,
                    n0: if cfg.population { 0 } else { cfg.n0_for(n) },
                    reg_dist: "model".into(),
                    eval_dist: Some(eval),
                    m: Some(m),
                    masked: Some(cfg.masked),
                    error,
                    return_error_q: None,
                    return_error_w: None,
                    return_error_dr: None,
                    constraint_residual: None,
                    seed: None,
                    failure,
                    key: RowKey {
                        replicate: 0,
                        n,
                        reg: cfg.reg_distributions.len(),
                        m: mi,
                        eval: ei,
                    },
                });
            }
        }
    }
    rows
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows in [`CSV_COLUMNS`] order, then the truncation marker if needed.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], truncated: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.experiment.label().to_string(),
            r.replicate.to_string(),
            r.n.to_string(),
            r.n0.to_string(),
            r.reg_dist.clone(),
            opt(r.eval_dist.map(DistName::label)),
            opt(r.m),
            opt(r.masked),
            opt(r.error),
            opt(r.return_error_q),
            opt(r.return_error_w),
            opt(r.return_error_dr),
            opt(r.constraint_residual),
            opt(r.seed),
        ])?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    if truncated {
        writeln!(inner, "{TRUNCATION_MARKER}")?;
    }
    inner.flush()?;
    Ok(())
}

/// Reproducibility sidecar for a result table.
pub fn metadata_json(cfg: &ExperimentConfig, setup: &ExperimentSetup, out: &ExperimentOutput) -> Result<String> {
    let meta = serde_json::json!({
        "config": cfg,
        "rng": RNG_ALGORITHM,
        "version": env!("CARGO_PKG_VERSION"),
        "columns": CSV_COLUMNS,
        "rows": out.rows.len(),
        "failed_rows": out.failed_rows,
        "truncated": out.truncated,
        "j_true": setup.j_true,
        "value_class_width": setup.value_class.width(),
        "discriminator_width": if cfg.experiment == ExperimentKind::Fig2 { setup.fig2_disc.width() } else { setup.fig1_disc.width() },
        "weight_class_width": setup.weight_class.width(),
        "confidence_intervals": "percentile bootstrap (2.5, 97.5) of the median over replicates",
    });
    Ok(serde_json::to_string_pretty(&meta)?)
}

/// Median, averaging the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Percentile bootstrap 95% interval of the median.
pub fn bootstrap_median_ci(values: &[f64], resamples: usize, seed: SeedSpec) -> (f64, f64) {
    assert!(!values.is_empty() && resamples > 0);
    let mut rng = seed.rng(BOOTSTRAP_STREAM);
    let mut medians: Vec<f64> = (0..resamples)
        .map(|_| {
            let draw: Vec<f64> = (0..values.len()).map(|_| values[rng.gen_range(0..values.len())]).collect();
            median(&draw)
        })
        .collect();
    medians.sort_by(f64::total_cmp);
    let at = |q: f64| medians[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    pearson(&ranks(x), &ranks(y))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("slope fit needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::NonFinite("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit needs distinct sample sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Number of increases in a sequence and the largest relative increase.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            count += 1;
            worst = worst.max((w[1] - w[0]) / w[0]);
        }
    }
    (count, worst)
}

/// Per-size medians of a selected quantity and their log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub sample_sizes: Vec<usize>,
    pub medians: Vec<f64>,
    pub slope: f64,
}

impl RateFit {
    /// Non-increasing medians, allowing one increase of at most `tolerance`.
    pub fn is_monotone(&self, tolerance: f64) -> bool {
        let (count, worst) = inversions(&self.medians);
        count == 0 || (count == 1 && worst <= tolerance)
    }
}

/// Fits the medians of `select(row)` over the sizes present in `rows`.
pub fn rate_fit(rows: &[ResultRow], select: impl Fn(&ResultRow) -> Option<f64>) -> Result<RateFit> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = select(r) {
            by_n.entry(r.n).or_default().push(v);
        }
    }
    if by_n.len() < 2 {
        return Err(Error::Config("rate fit needs rows at two or more sample sizes".into()));
    }
    let sample_sizes: Vec<usize> = by_n.keys().copied().collect();
    let medians: Vec<f64> = by_n.values().map(|v| median(v)).collect();
    let xs: Vec<f64> = sample_sizes.iter().map(|&n| n as f64).collect();
    let slope = loglog_slope(&xs, &medians)?;
    Ok(RateFit {
        sample_sizes,
        medians,
        slope,
    })
}

/// Median error with its bootstrap interval for one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub reg_dist: String,
    pub eval_dist: Option<DistName>,
    pub m: Option<f64>,
    pub count: usize,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Groups rows by `(n, reg_dist, eval_dist, m)` and summarizes their errors.
pub fn summarize(rows: &[ResultRow], resamples: usize, master_seed: u64) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, String, Option<DistName>, Option<u64>), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(e) = r.error {
            groups
                .entry((r.n, r.reg_dist.clone(), r.eval_dist, r.m.map(f64::to_bits)))
                .or_default()
                .push(e);
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, ((n, reg_dist, eval_dist, m), v))| {
            let (ci_low, ci_high) = bootstrap_median_ci(&v, resamples.max(1), SeedSpec::new(master_seed, i as u64));
            SummaryRow {
                n,
                reg_dist,
                eval_dist,
                m: m.map(f64::from_bits),
                count: v.len(),
                median: median(&v),
                ci_low,
                ci_high,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            sample_sizes: vec![50, 100, 200, 400],
            n_runs: 2,
            master_seed: 3,
            m_grid: vec![0.5, 1.0],
            bootstrap_resamples: 50,
            gridwalk: GridwalkConfig {
                width: 4,
                height: 4,
                p_threshold: 2.0,
                ..GridwalkConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn fig1_row_count_is_the_sweep_product() {
        let cfg = ExperimentConfig {
            sample_sizes: vec![50, 100, 200],
            ..tiny(ExperimentKind::Fig1)
        };
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2 * 3 * 6 * 5);
        assert!(!out.truncated);
    }

    #[test]
    fn fig2_includes_model_rows() {
        let cfg = ExperimentConfig {
            sample_sizes: vec![100],
            reg_distributions: vec![RegChoice::Dist(DistName::Uniform), RegChoice::None],
            eval_distributions: vec![DistName::Uniform],
            ..tiny(ExperimentKind::Fig2)
        };
        let out = run_experiment(&cfg).unwrap();
        let model: Vec<_> = out.rows.iter().filter(|r| r.reg_dist == "model").collect();
        assert_eq!(model.len(), 2);
        assert_eq!(out.rows.len(), 2 * 2 * 2 + 2);
        let exact = model.iter().find(|r| r.m == Some(1.0)).unwrap();
        assert_eq!(exact.error, Some(0.0));
    }

    #[test]
    fn csv_is_deterministic_and_ordered() {
        let cfg = tiny(ExperimentKind::OpeCompare);
        let write = || {
            let out = run_experiment(&cfg).unwrap();
            let mut buf = Vec::new();
            write_results_csv(&out.rows, out.truncated, &mut buf).unwrap();
            buf
        };
        let a = write();
        assert_eq!(a, write());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(&CSV_COLUMNS.join(",")));
        assert!(!text.contains(TRUNCATION_MARKER));
    }

    #[test]
    fn cancelled_run_is_truncated() {
        let flag = AtomicBool::new(true);
        let out = run_experiment_with(&tiny(ExperimentKind::Fig1), Some(&flag)).unwrap();
        assert!(out.truncated);
        assert!(out.rows.is_empty());
        let mut buf = Vec::new();
        write_results_csv(&out.rows, true, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().trim_end().ends_with(TRUNCATION_MARKER));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = |cfg: ExperimentConfig| assert!(cfg.validate().unwrap_err().is_config());
        bad(ExperimentConfig {
            n_runs: 0,
            ..Default::default()
        });
        bad(ExperimentConfig {
            sample_sizes: vec![200, 100],
            ..Default::default()
        });
        bad(ExperimentConfig {
            experiment: ExperimentKind::Rate,
            sample_sizes: vec![100, 200],
            ..Default::default()
        });
        bad(ExperimentConfig {
            experiment: ExperimentKind::Fig2,
            m_grid: vec![1.5],
            ..Default::default()
        });
        assert!(RegChoice::try_from("q".to_string()).is_err());
        assert_eq!(RegChoice::try_from("none".to_string()).unwrap(), RegChoice::None);
    }

    #[test]
    fn synthetic_slopes() {
        let n = [125.0, 250.0, 500.0, 1000.0];
        let quarter: Vec<f64> = n.iter().map(|v: &f64| 3.0 * v.powf(-0.25)).collect();
        assert!((loglog_slope(&n, &quarter).unwrap() + 0.25).abs() < 1e-12);
        assert!(loglog_slope(&n, &[2.0; 4]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rank_statistics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(inversions(&[3.0, 2.0, 2.1, 1.0]).0, 1);
        let (lo, hi) = bootstrap_median_ci(&[1.0; 10], 20, SeedSpec::new(0, 0));
        assert_eq!((lo, hi), (1.0, 1.0));
    }
}
