//! Subcommand implementations. Each writes its files under the output
//! directory together with a `metadata.json` that echoes the resolved config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde_json::{json, Value};

use regmis::estimators::{population_mode, weighted_l2_error};
use regmis::experiments::{
    metadata_json, rate_fit, run_condition, run_experiment_with, summarize, write_results_csv, Condition,
    DataSource, ExperimentKind, ExperimentSetup,
};
use regmis::gridwalk::DistName;
use regmis::mdp::{
    bellman_backup, exact_q, initial_sa_dist, occupancy_with, return_of, return_via_occupancy, weight_function,
    BellmanSystem, Policy, SAFunction, StateActionDist, TabularMdp,
};
use regmis::ope::{j_dr, j_dr_with, j_q, j_q_with, j_w, j_w_with, DrVariant, OpeReport};
use regmis::saddle::{q_star, w_star};
use regmis::sampling::{sample_initial, sample_transitions, Dataset, InitDataset, SeedSpec, RNG_ALGORITHM};
use regmis::{Error, Result};

use crate::config::CliConfig;

/// Tolerance for every exact identity reported by `exact` and `check`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Raised by the SIGINT handler; polled between replicates.
pub static INTERRUPTED: AtomicBool = AtomicBool::new(false);

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn write_metadata(dir: &Path, cfg: &CliConfig, command: &str, extra: Value) -> Result<()> {
    write_json(
        dir,
        "metadata.json",
        &json!({
            "command": command,
            "config": cfg,
            "rng": RNG_ALGORITHM,
            "version": env!("CARGO_PKG_VERSION"),
            "outputs": extra,
        }),
    )
}

/// Writes `s,a,<name>...` with one row per pair.
fn write_pair_table(dir: &Path, file: &str, n_actions: usize, columns: &[(&str, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, file)?);
    let mut header = vec!["s".to_string(), "a".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    let n_pairs = columns.first().map_or(0, |(_, v)| v.len());
    for sa in 0..n_pairs {
        let mut rec = vec![(sa / n_actions).to_string(), (sa % n_actions).to_string()];
        rec.extend(columns.iter().map(|(_, v)| v[sa].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// The environment `exact` solves: Gridwalk, or a user-supplied MDP.
struct ExactProblem {
    mdp: TabularMdp,
    pol: Policy,
    d_d: StateActionDist,
    /// Regularizing distributions to compute duals for.
    dists: Vec<(String, StateActionDist)>,
}

fn exact_problem(cfg: &CliConfig) -> Result<ExactProblem> {
    if let Some(spec) = &cfg.mdp {
        let text = fs::read_to_string(&spec.path)
            .map_err(|e| Error::Config(format!("cannot read MDP {}: {e}", spec.path.display())))?;
        let mdp = TabularMdp::from_json(&text)?;
        let pol = match &spec.policy {
            Some(p) => Policy::new(mdp.n_states(), mdp.n_actions(), p.clone())?,
            None => Policy::uniform(mdp.n_states(), mdp.n_actions()),
        };
        let d_d = match &spec.data_distribution {
            Some(d) => StateActionDist::new(d.clone())?,
            None => StateActionDist::uniform(mdp.n_pairs()),
        };
        let sys = BellmanSystem::new(&mdp, &pol)?;
        let mu0_pi = initial_sa_dist(&mdp, &pol)?;
        let d_pi = occupancy_with(&sys, &mu0_pi)?;
        let dists = vec![
            (DistName::DataDist.label().to_string(), d_d.clone()),
            (DistName::InitialPi.label().to_string(), mu0_pi),
            (DistName::OccupancyPi.label().to_string(), d_pi),
            (DistName::Uniform.label().to_string(), StateActionDist::uniform(mdp.n_pairs())),
        ];
        return Ok(ExactProblem { mdp, pol, d_d, dists });
    }
    let setup = ExperimentSetup::new(&cfg.experiment_config()?)?;
    let dists = setup
        .family
        .iter()
        .map(|(n, d)| (n.label().to_string(), d.clone()))
        .collect();
    Ok(ExactProblem {
        d_d: setup.family.d_d.clone(),
        mdp: setup.env.mdp,
        pol: setup.env.target,
        dists,
    })
}

/// Ground truth, both closed-form duals for every distribution, and residual diagnostics.
pub fn exact(cfg: &CliConfig, out: &Path) -> Result<Value> {
    let ExactProblem { mdp, pol, d_d, dists } = exact_problem(cfg)?;
    let sys = BellmanSystem::new(&mdp, &pol)?;
    let q_pi = exact_q(&mdp, &pol)?;
    let mu0_pi = initial_sa_dist(&mdp, &pol)?;
    let d_pi = occupancy_with(&sys, &mu0_pi)?;
    let w_pi = weight_function(&d_pi, &d_d)?;
    let j = return_of(&mdp, &pol)?;
    let j_occ = return_via_occupancy(&mdp, &pol)?;

    let bellman_residual = sup_diff(&bellman_backup(&mdp, &pol, &q_pi).0, &q_pi.0);
    let flow_target: Vec<f64> = mu0_pi.weights().iter().map(|m| (1.0 - mdp.gamma()) * m).collect();
    let flow_residual = sup_diff(&sys.apply_adjoint(d_pi.weights()), &flow_target);

    let mut w_cols = Vec::new();
    let mut q_cols = Vec::new();
    let mut per_dist = serde_json::Map::new();
    let mut max_residual = bellman_residual.max(flow_residual);
    for (name, nu) in &dists {
        let w = w_star(&sys, nu, &q_pi, &d_d)?;
        let q = q_star(&sys, nu, &w_pi, &d_d)?;
        max_residual = max_residual.max(w.stationarity_residual).max(q.stationarity_residual);
        per_dist.insert(
            name.clone(),
            json!({
                "w_star_sup_norm": w.sup_norm,
                "w_star_bound": w.coverage_bound,
                "w_star_residual": w.stationarity_residual,
                "q_star_sup_norm": q.sup_norm,
                "q_star_residual": q.stationarity_residual,
            }),
        );
        w_cols.push((name.as_str(), w.dual.0));
        q_cols.push((name.as_str(), q.dual.0));
    }

    let na = mdp.n_actions();
    write_pair_table(out, "q_pi.csv", na, &[("q_pi", &q_pi.0)])?;
    write_pair_table(out, "d_pi.csv", na, &[("d_pi", d_pi.weights())])?;
    write_pair_table(out, "w_pi.csv", na, &[("w_pi", &w_pi.0)])?;
    let as_refs = |cols: &[(&str, Vec<f64>)]| -> Vec<(String, Vec<f64>)> {
        cols.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
    };
    for (file, cols) in [("w_star.csv", as_refs(&w_cols)), ("q_star.csv", as_refs(&q_cols))] {
        let borrowed: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        write_pair_table(out, file, na, &borrowed)?;
    }
    let scalars = json!({
        "J": j,
        "J_via_occupancy": j_occ,
        "gamma": mdp.gamma(),
        "n_states": mdp.n_states(),
        "n_actions": na,
        "w_pi_sup_norm": w_pi.sup_norm(),
        "bellman_residual": bellman_residual,
        "flow_residual": flow_residual,
        "max_residual": max_residual,
        "residuals_within_tolerance": max_residual <= RESIDUAL_TOLERANCE,
        "duals": per_dist,
    });
    write_json(out, "scalars.json", &scalars)?;
    write_metadata(out, cfg, "exact", json!(["q_pi.csv", "d_pi.csv", "w_pi.csv", "w_star.csv", "q_star.csv", "scalars.json"]))?;
    if max_residual > RESIDUAL_TOLERANCE {
        return Err(Error::Numerical(format!("exact residual {max_residual:e} exceeds {RESIDUAL_TOLERANCE:e}")));
    }
    Ok(scalars)
}

fn require_gridwalk(cfg: &CliConfig, command: &str) -> Result<()> {
    if cfg.mdp.is_some() {
        return Err(Error::Config(format!("the `mdp` section is only used by `exact`, not `{command}`")));
    }
    Ok(())
}

fn sample_seed(cfg: &CliConfig) -> SeedSpec {
    SeedSpec::new(cfg.sample.seed, cfg.sample.replicate)
}

/// The configured dataset: read from disk when paths are given, sampled otherwise.
fn load_or_sample(cfg: &CliConfig, setup: &ExperimentSetup) -> Result<(Dataset, InitDataset)> {
    let mdp = &setup.env.mdp;
    let seed = sample_seed(cfg);
    let data = match &cfg.sample.data {
        Some(p) => Dataset::read_csv(File::open(p)?)?,
        None => sample_transitions(mdp, &setup.family.d_d, cfg.sample.n, seed)?,
    };
    data.validate(mdp)?;
    let init = match &cfg.sample.init {
        Some(p) => InitDataset::read_csv(File::open(p)?)?,
        None => sample_initial(mdp, cfg.sample.n0.unwrap_or(cfg.sample.n), seed),
    };
    if let Some(s) = init.s0.iter().find(|s| **s >= mdp.n_states()) {
        return Err(Error::Config(format!("initial state {s} out of range")));
    }
    Ok((data, init))
}

/// Draws a dataset and its initial-state sample.
pub fn sample(cfg: &CliConfig, out: &Path) -> Result<Value> {
    require_gridwalk(cfg, "sample")?;
    if cfg.sample.n == 0 {
        return Err(Error::Config("sample.n must be positive".into()));
    }
    let setup = ExperimentSetup::new(&cfg.experiment_config()?)?;
    let seed = sample_seed(cfg);
    let data = sample_transitions(&setup.env.mdp, &setup.family.d_d, cfg.sample.n, seed)?;
    let init = sample_initial(&setup.env.mdp, cfg.sample.n0.unwrap_or(cfg.sample.n), seed);
    data.write_csv(create(out, "data.csv")?)?;
    init.write_csv(create(out, "init.csv")?)?;
    let summary = json!({ "n": data.len(), "n0": init.len(), "seed_fingerprint": seed.fingerprint() });
    write_metadata(out, cfg, "sample", json!({ "files": ["data.csv", "init.csv"], "summary": summary }))?;
    Ok(summary)
}

fn condition(cfg: &CliConfig, with_weights: bool) -> Condition {
    Condition {
        reg: cfg.regularizer.dist,
        m: cfg.regularizer.m,
        masked: cfg.regularizer.masked,
        with_weights,
    }
}

/// Errors of `est` against `truth` under every evaluation distribution.
fn errors_by_dist(setup: &ExperimentSetup, est: &SAFunction, truth: &SAFunction) -> Value {
    setup
        .family
        .iter()
        .map(|(n, d)| (n.label().to_string(), json!(weighted_l2_error(est, truth, d))))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

struct SingleFit {
    setup: ExperimentSetup,
    data: Dataset,
    init: InitDataset,
    q_hat: SAFunction,
    w_hat: Option<SAFunction>,
    constraint_residual: f64,
    dr_variant: DrVariant,
}

fn single_fit(cfg: &CliConfig, command: &str, with_weights: bool) -> Result<SingleFit> {
    require_gridwalk(cfg, command)?;
    let mut exp_cfg = cfg.experiment_config()?;
    exp_cfg.model_mean = cfg.regularizer.model_mean;
    exp_cfg.masked = cfg.regularizer.masked;
    let setup = ExperimentSetup::new(&exp_cfg)?;
    let (data, init) = load_or_sample(cfg, &setup)?;
    let res = run_condition(
        &setup,
        &exp_cfg,
        &DataSource::Sampled { data: &data, init: &init },
        &condition(cfg, with_weights),
    )?;
    Ok(SingleFit {
        setup,
        data,
        init,
        q_hat: res.q_hat,
        w_hat: res.w_hat,
        constraint_residual: res.constraint_residual,
        dr_variant: exp_cfg.dr_variant,
    })
}

/// One regularized value estimate on one dataset.
pub fn estimate_q(cfg: &CliConfig, out: &Path) -> Result<Value> {
    let fit = single_fit(cfg, "estimate-q", false)?;
    let pol = &fit.setup.env.target;
    let gamma = fit.setup.env.mdp.gamma();
    let na = fit.setup.env.mdp.n_actions();
    write_pair_table(out, "q_hat.csv", na, &[("q_hat", &fit.q_hat.0), ("q_pi", &fit.setup.q_pi.0)])?;
    let jq = j_q(&fit.q_hat, &fit.init, pol, gamma)?;
    let report = json!({
        "regularizer": cfg.regularizer.dist.label(),
        "n": fit.data.len(),
        "n0": fit.init.len(),
        "constraint_residual": fit.constraint_residual,
        "errors": errors_by_dist(&fit.setup, &fit.q_hat, &fit.setup.q_pi),
        "j_q": jq,
        "j_true": fit.setup.j_true,
    });
    write_json(out, "estimate.json", &report)?;
    write_metadata(out, cfg, "estimate-q", json!(["q_hat.csv", "estimate.json"]))?;
    Ok(report)
}

/// One regularized weight estimate on one dataset.
pub fn estimate_w(cfg: &CliConfig, out: &Path) -> Result<Value> {
    let fit = single_fit(cfg, "estimate-w", true)?;
    let w_hat = fit.w_hat.as_ref().expect("weights requested");
    let na = fit.setup.env.mdp.n_actions();
    write_pair_table(out, "w_hat.csv", na, &[("w_hat", &w_hat.0), ("w_pi", &fit.setup.family.w_pi.0)])?;
    let report = json!({
        "regularizer": cfg.regularizer.dist.label(),
        "n": fit.data.len(),
        "errors": errors_by_dist(&fit.setup, w_hat, &fit.setup.family.w_pi),
        "j_w": j_w(w_hat, &fit.data, na)?,
        "j_true": fit.setup.j_true,
    });
    write_json(out, "estimate.json", &report)?;
    write_metadata(out, cfg, "estimate-w", json!(["w_hat.csv", "estimate.json"]))?;
    Ok(report)
}

/// Value-based, weight-based and doubly robust returns from one dataset.
pub fn ope(cfg: &CliConfig, out: &Path) -> Result<Value> {
    let fit = single_fit(cfg, "ope", true)?;
    let w_hat = fit.w_hat.as_ref().expect("weights requested");
    let pol = &fit.setup.env.target;
    let gamma = fit.setup.env.mdp.gamma();
    let na = fit.setup.env.mdp.n_actions();
    let report = OpeReport::new(
        j_q(&fit.q_hat, &fit.init, pol, gamma)?,
        j_w(w_hat, &fit.data, na)?,
        j_dr(&fit.q_hat, w_hat, &fit.data, &fit.init, pol, gamma, fit.dr_variant)?,
        Some(fit.setup.j_true),
    );
    let value = serde_json::to_value(&report)?;
    write_json(out, "ope.json", &value)?;
    write_metadata(out, cfg, "ope", json!(["ope.json"]))?;
    Ok(value)
}

/// Paths written by `experiment`.
pub struct ExperimentFiles {
    pub results: PathBuf,
    pub truncated: bool,
    pub rows: usize,
}

/// A full replicate sweep; stops starting replicates once [`INTERRUPTED`] is raised.
pub fn experiment(cfg: &CliConfig, out: &Path) -> Result<ExperimentFiles> {
    require_gridwalk(cfg, "experiment")?;
    let exp_cfg = cfg.experiment_config()?;
    let result = run_experiment_with(&exp_cfg, Some(&INTERRUPTED))?;
    let results = out.join("results.csv");
    write_results_csv(&result.rows, result.truncated, create(out, "results.csv")?)?;

    let setup = ExperimentSetup::new(&exp_cfg)?;
    let mut meta: Value = serde_json::from_str(&metadata_json(&exp_cfg, &setup, &result)?)?;
    meta["cli_config"] = serde_json::to_value(cfg)?;
    write_json(out, "metadata.json", &meta)?;

    let summary = summarize(&result.rows, exp_cfg.bootstrap_resamples, exp_cfg.master_seed);
    let mut w = csv::Writer::from_writer(create(out, "summary.csv")?);
    w.write_record(["n", "reg_dist", "eval_dist", "m", "count", "median", "ci_low", "ci_high"])?;
    for s in &summary {
        w.write_record([
            s.n.to_string(),
            s.reg_dist.clone(),
            s.eval_dist.map(|d| d.label().to_string()).unwrap_or_default(),
            s.m.map(|m| m.to_string()).unwrap_or_default(),
            s.count.to_string(),
            s.median.to_string(),
            s.ci_low.to_string(),
            s.ci_high.to_string(),
        ])?;
    }
    w.flush()?;

    if exp_cfg.experiment == ExperimentKind::Rate && !result.truncated {
        let reg = exp_cfg.reg_distributions[0];
        let eval = exp_cfg.eval_distributions[0];
        let fit = rate_fit(&result.rows, |r| {
            (r.reg_dist == reg.label() && r.eval_dist == Some(eval)).then_some(r.error).flatten()
        })?;
        write_json(out, "rate.json", &serde_json::to_value(&fit)?)?;
    }
    Ok(ExperimentFiles {
        results,
        truncated: result.truncated,
        rows: result.rows.len(),
    })
}

/// One named invariant and how far it is from holding.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl CheckLine {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value <= limit,
        }
    }
}

/// Deterministic perturbation in `[-1, 1)` for the doubly robust probes.
fn perturbation(n: usize, k: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = SeedSpec::new(k, 0).rng(0);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Population exactness, saddle residuals, the coverage bound and the doubly robust identities.
pub fn check(cfg: &CliConfig, out: &Path) -> Result<Vec<CheckLine>> {
    require_gridwalk(cfg, "check")?;
    let mut exp_cfg = cfg.experiment_config()?;
    exp_cfg.population = true;
    let setup = ExperimentSetup::new(&exp_cfg)?;
    let mdp = &setup.env.mdp;
    let pol = &setup.env.target;
    let fam = &setup.family;
    let sys = BellmanSystem::new(mdp, pol)?;
    let gamma = mdp.gamma();
    let mut lines = Vec::new();

    lines.push(CheckLine::at_most(
        "bellman fixed point",
        sup_diff(&bellman_backup(mdp, pol, &setup.q_pi).0, &setup.q_pi.0),
        RESIDUAL_TOLERANCE,
    ));
    let flow_target: Vec<f64> = fam.mu0_pi.weights().iter().map(|m| (1.0 - gamma) * m).collect();
    lines.push(CheckLine::at_most(
        "occupancy flow",
        sup_diff(&sys.apply_adjoint(fam.d_pi.weights()), &flow_target),
        RESIDUAL_TOLERANCE,
    ));
    lines.push(CheckLine::at_most(
        "weight normalization",
        (fam.d_d.expect(&fam.w_pi.0) - 1.0).abs(),
        RESIDUAL_TOLERANCE,
    ));
    for (name, nu) in fam.iter() {
        let w = w_star(&sys, nu, &setup.q_pi, &fam.d_d)?;
        lines.push(CheckLine::at_most(format!("value dual stationarity {name}"), w.stationarity_residual, RESIDUAL_TOLERANCE));
        let bound = w.coverage_bound.unwrap_or(f64::INFINITY);
        lines.push(CheckLine::at_most(format!("value dual within coverage bound {name}"), w.sup_norm - bound, 1e-9 * bound.max(1.0)));
        let q = q_star(&sys, nu, &fam.w_pi, &fam.d_d)?;
        lines.push(CheckLine::at_most(format!("weight dual stationarity {name}"), q.stationarity_residual, RESIDUAL_TOLERANCE));
    }

    let source = DataSource::Population;
    for (name, nu) in fam.iter() {
        let cond = Condition {
            reg: regmis::experiments::RegChoice::Dist(name),
            m: None,
            masked: false,
            with_weights: true,
        };
        let res = run_condition(&setup, &exp_cfg, &source, &cond)?;
        lines.push(CheckLine::at_most(
            format!("population value estimate {name}"),
            weighted_l2_error(&res.q_hat, &setup.q_pi, nu),
            1e-6,
        ));
        let w_hat = res.w_hat.as_ref().expect("weights requested");
        lines.push(CheckLine::at_most(
            format!("population weight estimate {name}"),
            weighted_l2_error(w_hat, &fam.w_pi, nu),
            1e-6,
        ));
    }

    let pop = population_mode(mdp, &fam.d_d)?;
    let variant = exp_cfg.dr_variant;
    let j = setup.j_true;
    let triple = [
        j_q_with(&pop, &setup.q_pi, pol, gamma)?,
        j_w_with(&pop, &fam.w_pi)?,
        j_dr_with(&pop, &setup.q_pi, &fam.w_pi, pol, gamma, variant)?,
    ];
    lines.push(CheckLine::at_most(
        "population return identity",
        triple.iter().fold(0.0, |m, x| f64::max(m, (x - j).abs())),
        1e-10,
    ));
    let n = mdp.n_pairs();
    let mut worst_q_exact = 0.0_f64;
    let mut worst_w_exact = 0.0_f64;
    for k in 0..20 {
        let noise = perturbation(n, k);
        let w_bad = SAFunction(fam.w_pi.0.iter().zip(&noise).map(|(w, e)| w + e).collect());
        let q_bad = SAFunction(setup.q_pi.0.iter().zip(&noise).map(|(q, e)| q + e).collect());
        worst_q_exact = worst_q_exact.max((j_dr_with(&pop, &setup.q_pi, &w_bad, pol, gamma, variant)? - j).abs());
        worst_w_exact = worst_w_exact.max((j_dr_with(&pop, &q_bad, &fam.w_pi, pol, gamma, variant)? - j).abs());
    }
    lines.push(CheckLine::at_most("doubly robust with exact value", worst_q_exact, 1e-8));
    lines.push(CheckLine::at_most("doubly robust with exact weights", worst_w_exact, 1e-8));

    write_json(out, "check.json", &serde_json::to_value(&lines)?)?;
    write_metadata(out, cfg, "check", json!(["check.json"]))?;
    Ok(lines)
}

/// Installs a SIGINT handler that raises [`INTERRUPTED`].
pub fn install_interrupt_handler() -> Result<()> {
    // SAFETY: the handler only performs an atomic store, which is async-signal-safe.
    unsafe { signal_hook_registry::register(libc::SIGINT, || INTERRUPTED.store(true, Ordering::SeqCst)) }
        .map(|_| ())
        .map_err(Error::Io)
}
