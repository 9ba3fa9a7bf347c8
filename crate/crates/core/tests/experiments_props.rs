//! Experiment rows recomputed by hand, thread-count independence and the
//! summary statistics.

use proptest::prelude::*;
use regmis::estimators::weighted_l2_error;
use regmis::experiments::{
    bootstrap_median_ci, loglog_slope, median, run_condition, run_experiment, spearman, Condition, DataSource,
    ExperimentConfig, ExperimentKind, ExperimentSetup, RegChoice,
};
use regmis::gridwalk::{DistName, GridwalkConfig};
use regmis::sampling::{sample_initial, sample_transitions, SeedSpec};

fn small(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: kind,
        sample_sizes: vec![60, 150],
        n_runs: 4,
        master_seed: 17,
        reg_distributions: vec![RegChoice::Dist(DistName::Uniform), RegChoice::Dist(DistName::DataDist), RegChoice::None],
        eval_distributions: vec![DistName::Uniform, DistName::LeastCovered],
        m_grid: vec![0.2, 0.9],
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
fn every_row_matches_a_fit_on_the_nested_prefix() {
    for kind in [ExperimentKind::Fig1, ExperimentKind::Fig2, ExperimentKind::OpeCompare] {
        let cfg = small(kind);
        let out = run_experiment(&cfg).unwrap();
        let setup = ExperimentSetup::new(&cfg).unwrap();
        let n_max = *cfg.sample_sizes.last().unwrap();
        for row in out.rows.iter().filter(|r| r.reg_dist != "model") {
            let seed = SeedSpec::new(cfg.master_seed, row.replicate as u64);
            assert_eq!(row.seed, Some(seed.fingerprint()));
            // Draw the largest dataset afresh and cut it down, independently of the sweep.
            let data = sample_transitions(&setup.env.mdp, &setup.family.d_d, n_max, seed).unwrap().prefix(row.n);
            let init = sample_initial(&setup.env.mdp, n_max, seed).prefix(row.n0);
            let reg = RegChoice::try_from(row.reg_dist.clone()).unwrap();
            let cond = Condition {
                reg,
                m: if reg == RegChoice::None { None } else { row.m },
                masked: cfg.masked,
                with_weights: kind == ExperimentKind::OpeCompare,
            };
            let res = run_condition(&setup, &cfg, &DataSource::Sampled { data: &data, init: &init }, &cond).unwrap();
            let eval = setup.family.get(row.eval_dist.unwrap());
            assert_eq!(row.error, Some(weighted_l2_error(&res.q_hat, &setup.q_pi, eval)), "{row:?}");
            assert_eq!(row.return_error_q, Some(res.return_error_q));
            assert_eq!(row.return_error_w, res.return_error_w);
            assert_eq!(row.return_error_dr, res.return_error_dr);
        }
        let model_rows = out.rows.iter().filter(|r| r.reg_dist == "model").count();
        let expected_models = if kind == ExperimentKind::Fig2 { 2 * 2 * 2 } else { 0 };
        assert_eq!(model_rows, expected_models);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn rows_do_not_depend_on_the_thread_count() {
    let cfg = small(ExperimentKind::Fig1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_experiment(&cfg).unwrap().rows)
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(8));
}

#[test]
fn population_mode_writes_one_exact_replicate() {
    let cfg = ExperimentConfig {
        population: true,
        ..small(ExperimentKind::Fig1)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 3 * 2);
    for row in &out.rows {
        assert_eq!((row.replicate, row.n, row.n0, row.seed), (0, 0, 0, None));
        if row.reg_dist != "none" {
            assert!(row.error.unwrap() <= 1e-6, "{row:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn median_splits_the_sample(values in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let m = median(&values);
        let below = values.iter().filter(|v| **v < m).count();
        let above = values.iter().filter(|v| **v > m).count();
        prop_assert!(below <= values.len() / 2 && above <= values.len() / 2);
    }

    #[test]
    fn power_laws_have_their_exponent_as_slope(c in 0.01f64..100.0, k in -2.0f64..2.0, n in 2usize..8) {
        let xs: Vec<f64> = (0..n).map(|i| 100.0 * 2f64.powi(i as i32)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(k)).collect();
        prop_assert!((loglog_slope(&xs, &ys).unwrap() - k).abs() <= 1e-9);
    }

    #[test]
    fn rank_correlation_sees_only_order(values in prop::collection::vec(-10f64..10.0, 3..30)) {
        let mut distinct = values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() == values.len());
        let cubed: Vec<f64> = values.iter().map(|v| v.powi(3) + 5.0).collect();
        let negated: Vec<f64> = values.iter().map(|v| -v.exp()).collect();
        prop_assert!((spearman(&values, &cubed) - 1.0).abs() <= 1e-12);
        prop_assert!((spearman(&values, &negated) + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bootstrap_interval_is_ordered_and_in_range(values in prop::collection::vec(0f64..10.0, 1..40), seed in any::<u64>()) {
        let (lo, hi) = bootstrap_median_ci(&values, 200, SeedSpec::new(seed, 0));
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
        prop_assert_eq!((lo, hi), bootstrap_median_ci(&values, 200, SeedSpec::new(seed, 0)));
    }
}
