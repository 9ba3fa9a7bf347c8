//! Random small MDPs for property tests.
#![allow(dead_code)]

use proptest::prelude::*;
use regmis::mdp::{Policy, StateActionDist, TabularMdp};

/// A random instance with strictly positive data distribution.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub pol: Policy,
    pub d_d: StateActionDist,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    v.iter().map(|x| x / total).collect()
}

fn simplex_rows(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, rows * cols)
        .prop_map(move |raw| raw.chunks(cols).flat_map(normalize).collect())
}

pub fn instance() -> impl Strategy<Value = Instance> {
    (2usize..6, 1usize..4, 0.1f64..0.95).prop_flat_map(|(n_s, n_a, gamma)| {
        let n_sa = n_s * n_a;
        (
            simplex_rows(n_sa, n_s),
            prop::collection::vec(0.0f64..1.0, n_sa),
            simplex_rows(1, n_s),
            simplex_rows(n_s, n_a),
            simplex_rows(1, n_sa),
        )
            .prop_map(move |(p, r, mu0, pi, d)| Instance {
                mdp: TabularMdp::new(n_s, n_a, p, r, gamma, mu0).unwrap(),
                pol: Policy::new(n_s, n_a, pi).unwrap(),
                d_d: StateActionDist::new(d).unwrap(),
            })
    })
}

/// A random function on `n` pairs with entries in `[-scale, scale]`.
pub fn function(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, n)
}

/// Sup-norm distance.
pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}
