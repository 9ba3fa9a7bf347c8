//! Estimator moments and fits checked against brute-force sums and dense KKT solves.

mod common;

use common::{function, instance, sup_diff, Instance};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use regmis::estimators::{
    estimate_q, estimate_w, population_mode, theorem1_bound, theorem2_bound, weighted_l2_error, BoundInputs,
    Empirical, Expectations, Weighting,
};
use regmis::features::LinearClass;
use regmis::mdp::{exact_q, initial_sa_dist, occupancy, transition_matrix, weight_function, SAFunction};
use regmis::numerics::DenseMatrix;
use regmis::regularizers::Regularizer;
use regmis::sampling::{sample_initial, sample_transitions, SeedSpec};

fn random_class(n_pairs: usize, width: usize) -> impl Strategy<Value = LinearClass> {
    prop::collection::vec(-1.0f64..1.0, n_pairs * width).prop_map(move |v| {
        LinearClass::new("random", DenseMatrix::from_row_major(n_pairs, width, v).unwrap()).unwrap()
    })
}

fn with_classes() -> impl Strategy<Value = (Instance, LinearClass, LinearClass, u64)> {
    instance().prop_flat_map(|inst| {
        let n = inst.mdp.n_pairs();
        (Just(inst), random_class(n, n.min(3)), random_class(n, n.min(2)), any::<u64>())
    })
}

/// `feat(s, π) = Σ_a π(a|s) feat(s,a)` by loops.
fn next_feature(inst: &Instance, feat: &DenseMatrix, s: usize, j: usize) -> f64 {
    (0..inst.mdp.n_actions()).map(|a| inst.pol.prob(s, a) * feat.get(inst.mdp.pair(s, a), j)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn empirical_moments_match_per_sample_sums((inst, phi, psi, seed) in with_classes(), n in 1usize..200) {
        let data = sample_transitions(&inst.mdp, &inst.d_d, n, SeedSpec::new(seed, 0)).unwrap();
        let init = sample_initial(&inst.mdp, n, SeedSpec::new(seed, 0));
        let emp = Empirical::new(&inst.mdp, &data, Some(&init)).unwrap();
        let gamma = inst.mdp.gamma();
        let (f, g) = (phi.features(), psi.features());

        let td = emp.td_moment(g, f, &inst.pol, gamma);
        let rm = emp.reward_moment(g);
        let im = emp.initial_moment(f, &inst.pol).unwrap();
        for i in 0..g.cols() {
            let mut r_sum = 0.0;
            for k in 0..n {
                r_sum += g.get(inst.mdp.pair(data.s[k], data.a[k]), i) * data.r[k];
            }
            prop_assert!((rm[i] - r_sum / n as f64).abs() <= 1e-12);
            for j in 0..f.cols() {
                let mut sum = 0.0;
                for k in 0..n {
                    let sa = inst.mdp.pair(data.s[k], data.a[k]);
                    sum += g.get(sa, i) * (f.get(sa, j) - gamma * next_feature(&inst, f, data.s_next[k], j));
                }
                prop_assert!((td.get(i, j) - sum / n as f64).abs() <= 1e-12);
            }
        }
        for j in 0..f.cols() {
            let direct: f64 = init.s0.iter().map(|s| next_feature(&inst, f, *s, j)).sum::<f64>() / n as f64;
            prop_assert!((im[j] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn population_moments_match_the_matrix_form((inst, phi, psi, _) in with_classes()) {
        let pop = population_mode(&inst.mdp, &inst.d_d).unwrap();
        let gamma = inst.mdp.gamma();
        let to_na = |a: &DenseMatrix| DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
        let (f, g) = (to_na(phi.features()), to_na(psi.features()));
        let p = to_na(&transition_matrix(&inst.mdp, &inst.pol).unwrap());
        let n = p.nrows();
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(inst.d_d.weights()));
        let oracle = g.transpose() * &d * (DMatrix::identity(n, n) - p * gamma) * &f;
        let ours = pop.td_moment(psi.features(), phi.features(), &inst.pol, gamma);
        prop_assert!(sup_diff(ours.as_slice(), oracle.transpose().as_slice()) <= 1e-12);
        let rewards = g.transpose() * &d * DVector::from_column_slice(inst.mdp.mean_reward());
        prop_assert!(sup_diff(&pop.reward_moment(psi.features()), rewards.as_slice()) <= 1e-12);
    }

    #[test]
    fn full_classes_recover_the_truth_under_any_regularizer(inst in instance(), anchor in function(15, 3.0)) {
        let (mdp, pol, d_d) = (&inst.mdp, &inst.pol, &inst.d_d);
        let n = mdp.n_pairs();
        let pop = population_mode(mdp, d_d).unwrap();
        let full = LinearClass::identity(n);
        let reg = Regularizer::quadratic(SAFunction(anchor[..n].to_vec())).unwrap();
        let q_pi = exact_q(mdp, pol).unwrap();
        let w_pi = weight_function(&occupancy(mdp, pol, &initial_sa_dist(mdp, pol).unwrap()).unwrap(), d_d).unwrap();
        let tol_q = 1e-9 / (1.0 - mdp.gamma());
        for weighting in [None, Some(Weighting { reg: &reg, dist: d_d })] {
            let q = estimate_q(&pop, &full, &full, weighting, pol, mdp.gamma()).unwrap();
            prop_assert!(sup_diff(q.values.values(), q_pi.values()) <= tol_q * (1.0 + q_pi.sup_norm()));
            let w = estimate_w(&pop, &full, &full, weighting, pol, mdp.gamma()).unwrap();
            prop_assert!(sup_diff(w.values.values(), w_pi.values()) <= 1e-8 * (1.0 + w_pi.sup_norm()));
        }
    }

    #[test]
    fn narrow_discriminator_fit_matches_a_dense_kkt_solve(
        (inst, phi, psi, _) in with_classes(),
        anchor in function(15, 3.0),
    ) {
        let (mdp, pol, d_d) = (&inst.mdp, &inst.pol, &inst.d_d);
        let n = mdp.n_pairs();
        let pop = population_mode(mdp, d_d).unwrap();
        let one = LinearClass::new("one", DenseMatrix::from_columns(n, &[(0..n).map(|i| psi.features().get(i, 0)).collect()]).unwrap()).unwrap();
        let reg = Regularizer::quadratic(SAFunction(anchor[..n].to_vec())).unwrap();
        let fit = estimate_q(&pop, &phi, &one, Some(Weighting { reg: &reg, dist: d_d }), pol, mdp.gamma()).unwrap();

        let f = DMatrix::from_row_slice(n, phi.width(), phi.features().as_slice());
        let g = pop.td_moment(one.features(), phi.features(), pol, mdp.gamma());
        let g = DMatrix::from_row_slice(g.rows(), g.cols(), g.as_slice());
        prop_assume!(g.norm() > 1e-3);
        let h = pop.reward_moment(one.features());
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(d_d.weights()));
        let hess = f.transpose() * &d * &f;
        prop_assume!(hess.clone().svd(false, false).singular_values.min() > 1e-6);
        let k = phi.width();
        let mut kkt = DMatrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&hess);
        kkt.view_mut((0, k), (k, 1)).copy_from(&g.transpose());
        kkt.view_mut((k, 0), (1, k)).copy_from(&g);
        let mut rhs = DVector::zeros(k + 1);
        rhs.rows_mut(0, k).copy_from(&(f.transpose() * &d * DVector::from_column_slice(reg.anchor().values())));
        rhs[k] = h[0];
        let oracle = kkt.lu().solve(&rhs).unwrap();
        let values = &f * oracle.rows(0, k);
        prop_assert!(sup_diff(fit.values.values(), values.as_slice()) <= 1e-6 * (1.0 + values.amax()));
        prop_assert!(fit.constraint_residual <= 1e-10 * (1.0 + h[0].abs()));
    }

    #[test]
    fn weighted_error_matches_a_loop(inst in instance(), a in function(15, 4.0), b in function(15, 4.0)) {
        let n = inst.mdp.n_pairs();
        let (x, y) = (SAFunction(a[..n].to_vec()), SAFunction(b[..n].to_vec()));
        let mut sum = 0.0;
        for i in 0..n {
            sum += inst.d_d.weights()[i] * (a[i] - b[i]).powi(2);
        }
        prop_assert!((weighted_l2_error(&x, &y, &inst.d_d) - sum.sqrt()).abs() <= 1e-12);
        prop_assert_eq!(weighted_l2_error(&x, &x, &inst.d_d), 0.0);
    }

    #[test]
    fn error_bounds_shrink_with_data_and_grow_with_class_size(
        c_w in 0.1f64..50.0,
        c_q in 0.1f64..50.0,
        log_card in 0.0f64..20.0,
        n in 1usize..100_000,
        delta in 0.001f64..0.5,
        gamma in 0.0f64..0.99,
    ) {
        let base = BoundInputs {
            c_w, c_q, log_card_w: log_card, log_card_q: log_card, n, n0: n, delta,
            strong_convexity: 1.0, c_f: c_w * c_w, gamma,
        };
        for bound in [theorem1_bound, theorem2_bound] {
            let b = bound(&base).unwrap();
            prop_assert!(b > 0.0 && b.is_finite());
            let at = |inp: BoundInputs| bound(&inp).unwrap();
            let more_data = at(BoundInputs { n: 4 * n, n0: 4 * n, ..base });
            let wider_q = at(BoundInputs { c_q: 2.0 * c_q, ..base });
            let larger_w = at(BoundInputs { log_card_w: log_card + 1.0, ..base });
            let stricter = at(BoundInputs { delta: delta / 2.0, ..base });
            let more_convex = at(BoundInputs { strong_convexity: 4.0, ..base });
            prop_assert!(more_data < b && wider_q > b && larger_w > b && stricter > b && more_convex < b);
        }
        let known_init = theorem2_bound(&BoundInputs { n0: 0, ..base }).unwrap();
        prop_assert!(known_init < theorem2_bound(&base).unwrap());
    }
}

#[test]
fn value_bound_matches_a_hand_evaluation() {
    let inp = BoundInputs {
        c_w: 2.0, c_q: 3.0, log_card_w: 1.0, log_card_q: 2.0, n: 800, n0: 0, delta: 0.1,
        strong_convexity: 0.5, c_f: 1.0, gamma: 0.9,
    };
    // ε = (2 + 1.9·6) · sqrt(2 (ln 2 + 3 − ln 0.1) / 800)
    let eps = 13.4 * (2.0 * (2f64.ln() + 3.0 - 0.1f64.ln()) / 800.0).sqrt();
    assert!((theorem1_bound(&inp).unwrap() - 2.0 * (eps / 0.5).sqrt()).abs() < 1e-12);
    // ε = (1 + 11.4) · sqrt(2 (ln 4 + 3 − ln 0.1) / 800), no initial-state term.
    let eps2 = 12.4 * (2.0 * (4f64.ln() + 3.0 - 0.1f64.ln()) / 800.0).sqrt();
    assert!((theorem2_bound(&inp).unwrap() - 2.0 * (eps2 / 0.5).sqrt()).abs() < 1e-12);
}

#[test]
fn invalid_bound_inputs_are_rejected() {
    let ok = BoundInputs {
        c_w: 1.0, c_q: 1.0, log_card_w: 0.0, log_card_q: 0.0, n: 10, n0: 10, delta: 0.1,
        strong_convexity: 1.0, c_f: 0.0, gamma: 0.5,
    };
    assert!(theorem1_bound(&ok).is_ok());
    for bad in [
        BoundInputs { delta: 1.0, ..ok },
        BoundInputs { gamma: 1.0, ..ok },
        BoundInputs { n: 0, ..ok },
        BoundInputs { c_w: 0.0, ..ok },
        BoundInputs { log_card_q: -1.0, ..ok },
    ] {
        assert!(theorem1_bound(&bad).is_err());
    }
}

/// Elementwise `|Ĝ − G| ≤ 5 SE` at `n = 200000`, with the SE taken from the per-sample terms.
#[test]
fn sampled_moments_concentrate_at_the_clt_rate() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let inst = instance().new_tree(&mut runner).unwrap().current();
    let (mdp, pol) = (&inst.mdp, &inst.pol);
    let n = 200_000;
    let data = sample_transitions(mdp, &inst.d_d, n, SeedSpec::new(2024, 0)).unwrap();
    let emp = Empirical::new(mdp, &data, None).unwrap();
    let pop = population_mode(mdp, &inst.d_d).unwrap();
    let full = LinearClass::identity(mdp.n_pairs());
    let g_hat = emp.td_moment(full.features(), full.features(), pol, mdp.gamma());
    let g = pop.td_moment(full.features(), full.features(), pol, mdp.gamma());
    let np = mdp.n_pairs();
    let (mut sum, mut sum_sq) = (vec![0.0; np * np], vec![0.0; np * np]);
    for k in 0..n {
        let sa = mdp.pair(data.s[k], data.a[k]);
        for j in 0..np {
            let next = if j / mdp.n_actions() == data.s_next[k] { pol.prob(data.s_next[k], j % mdp.n_actions()) } else { 0.0 };
            let term = f64::from(u8::from(j == sa)) - mdp.gamma() * next;
            sum[sa * np + j] += term;
            sum_sq[sa * np + j] += term * term;
        }
    }
    for idx in 0..np * np {
        let mean = sum[idx] / n as f64;
        let var = sum_sq[idx] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        let diff = (g_hat.as_slice()[idx] - g.as_slice()[idx]).abs();
        assert!(diff <= 5.0 * se + 1e-12, "entry {idx}: {diff} vs se {se}");
    }
}
