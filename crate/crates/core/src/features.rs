//! Linear function classes over state-action pairs.
//!
//! The primal class aggregates pairs whose true values agree to a fixed
//! number of decimals. The discriminator classes are built from the
//! closed-form duals so that the duals required for identification are
//! realizable by construction.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::gridwalk::{DistName, DistributionFamily};
use crate::mdp::{ratio, BellmanSystem, SAFunction, StateActionDist};
use crate::numerics::{least_squares_min_norm, norm_inf, DenseMatrix};

/// A linear class `{F c : c ∈ R^width}` with `F` of shape `|S×A| × width`.
#[derive(Debug, Clone)]
pub struct LinearClass {
    pub name: String,
    features: DenseMatrix,
    /// Factor each column was divided by when rescaled (1 when unscaled).
    pub column_scales: Vec<f64>,
}

impl LinearClass {
    pub fn new(name: impl Into<String>, features: DenseMatrix) -> Result<Self> {
        if features.cols() == 0 || features.cols() > features.rows() {
            return Err(Error::Config(format!(
                "linear class width {} must be in 1..={}",
                features.cols(),
                features.rows()
            )));
        }
        let width = features.cols();
        Ok(Self {
            name: name.into(),
            features,
            column_scales: vec![1.0; width],
        })
    }

    /// Builds a class from columns, rescaling each to unit ∞-norm.
    pub fn from_scaled_columns(name: impl Into<String>, n_pairs: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        let mut scales = Vec::with_capacity(columns.len());
        let scaled: Vec<Vec<f64>> = columns
            .into_iter()
            .map(|c| {
                let s = norm_inf(&c);
                let s = if s > 0.0 { s } else { 1.0 };
                scales.push(s);
                c.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let mut cls = Self::new(name, DenseMatrix::from_columns(n_pairs, &scaled)?)?;
        cls.column_scales = scales;
        Ok(cls)
    }

    pub fn identity(n_pairs: usize) -> Self {
        Self {
            name: "identity".into(),
            features: DenseMatrix::identity(n_pairs),
            column_scales: vec![1.0; n_pairs],
        }
    }

    /// One indicator column per listed pair.
    pub fn indicators(name: impl Into<String>, n_pairs: usize, pairs: &[usize]) -> Result<Self> {
        let mut f = DenseMatrix::zeros(n_pairs, pairs.len());
        for (j, &i) in pairs.iter().enumerate() {
            if i >= n_pairs {
                return Err(Error::DimensionMismatch(format!("pair {i} out of range")));
            }
            f.set(i, j, 1.0);
        }
        Self::new(name, f)
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn n_pairs(&self) -> usize {
        self.features.rows()
    }

    /// `F c`.
    pub fn evaluate(&self, coefficients: &[f64]) -> SAFunction {
        SAFunction(self.features.matvec(coefficients))
    }

    /// Feature matrix as CSV rows `pair,f0,f1,...` (rescaled columns).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pair".to_string()];
        header.extend((0..self.width()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.n_pairs() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rounds half away from zero at `decimals`, resolving near-ties toward zero.
fn rounding_key(x: f64, decimals: u32) -> i64 {
    let y = x * 10f64.powi(decimals as i32);
    let frac = y.abs().fract();
    if (frac - 0.5).abs() <= 1e-12 {
        y.trunc() as i64
    } else {
        y.round() as i64
    }
}

/// One indicator column per distinct value of `q` rounded to `decimals`.
pub fn aggregate_by_value(q_pi: &SAFunction, decimals: u32) -> Result<LinearClass> {
    let keys: Vec<i64> = q_pi.values().iter().map(|v| rounding_key(*v, decimals)).collect();
    let columns: BTreeMap<i64, usize> = {
        let mut uniq: Vec<i64> = keys.clone();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.into_iter().enumerate().map(|(j, k)| (k, j)).collect()
    };
    let mut f = DenseMatrix::zeros(q_pi.len(), columns.len());
    for (i, k) in keys.iter().enumerate() {
        f.set(i, columns[k], 1.0);
    }
    LinearClass::new(format!("value-aggregation({decimals})"), f)
}

/// `(I − γP̃^π)⁻¹(ν ∘ v)` for a dual-feature source `v`.
fn adjoint_feature(sys: &BellmanSystem, nu: &StateActionDist, v: &[f64]) -> Vec<f64> {
    let source: Vec<f64> = nu.weights().iter().zip(v).map(|(a, b)| a * b).collect();
    sys.solve_adjoint(&source)
}

/// Discriminator class with `{(I − γP̃^π)⁻¹(ν∘q^π) ⊘ d^D, (I − γP̃^π)⁻¹(ν∘q^π)}` for every `ν`.
pub fn discriminator_features_fig1(
    sys: &BellmanSystem,
    family: &DistributionFamily,
    q_pi: &SAFunction,
    d_d: &StateActionDist,
) -> Result<LinearClass> {
    let mut cols = Vec::with_capacity(2 * DistName::ALL.len());
    for (_, nu) in family.iter() {
        let x = adjoint_feature(sys, nu, q_pi.values());
        cols.push(ratio(&x, d_d)?);
        cols.push(x);
    }
    LinearClass::from_scaled_columns("fig1-discriminator", q_pi.len(), cols)
}

/// Discriminator class for model-anchored regularizers with anchor
/// `(m q^π + (1 − m) q̄) ∘ mask`: for every `ν`, the ratio forms of
/// `(I − γP̃^π)⁻¹(ν∘q^π)`, `(I − γP̃^π)⁻¹(ν∘q^π∘mask)` and `(I − γP̃^π)⁻¹(ν∘mask)`.
pub fn discriminator_features_fig2(
    sys: &BellmanSystem,
    family: &DistributionFamily,
    q_pi: &SAFunction,
    d_d: &StateActionDist,
    mask: &[bool],
) -> Result<LinearClass> {
    if mask.len() != q_pi.len() {
        return Err(Error::DimensionMismatch("mask length".into()));
    }
    let indicator: Vec<f64> = mask.iter().map(|m| f64::from(u8::from(*m))).collect();
    let masked_q: Vec<f64> = q_pi.values().iter().zip(&indicator).map(|(q, m)| q * m).collect();
    let mut cols = Vec::with_capacity(3 * DistName::ALL.len());
    for (_, nu) in family.iter() {
        for source in [q_pi.values(), &masked_q[..], &indicator[..]] {
            cols.push(ratio(&adjoint_feature(sys, nu, source), d_d)?);
        }
    }
    LinearClass::from_scaled_columns("fig2-discriminator", q_pi.len(), cols)
}

/// Mask `𝕀(p > 0)`, or all-true for an unmasked model.
pub fn model_mask(p: &StateActionDist, masked: bool) -> Vec<bool> {
    p.weights().iter().map(|w| !masked || *w > 0.0).collect()
}

/// `min_c ‖F c − target‖_{2,weight}`; `None` weights pairs uniformly.
pub fn realizability_check(cls: &LinearClass, target: &SAFunction, weight: Option<&StateActionDist>) -> f64 {
    let n = cls.n_pairs();
    let sqrt_w: Vec<f64> = match weight {
        Some(w) => w.weights().iter().map(|v| v.sqrt()).collect(),
        None => vec![(1.0 / n as f64).sqrt(); n],
    };
    let a = cls.features.scale_rows(&sqrt_w);
    let b: Vec<f64> = target.values().iter().zip(&sqrt_w).map(|(t, s)| t * s).collect();
    let c = least_squares_min_norm(&a, &b);
    let fit = a.matvec(&c);
    fit.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_merges_rounded_ties() {
        let cls = aggregate_by_value(&SAFunction(vec![1.2344, 1.2341, 5.0]), 3).unwrap();
        assert_eq!(cls.width(), 2);
        let f = cls.features();
        assert_eq!(f.row(0), f.row(1));
        assert_ne!(f.row(0), f.row(2));
    }

    #[test]
    fn aggregation_of_distinct_values_is_identity_sized() {
        let cls = aggregate_by_value(&SAFunction(vec![0.1, 0.2, 0.3, 0.4]), 3).unwrap();
        assert_eq!(cls.width(), 4);
        for i in 0..4 {
            assert_eq!(cls.features().row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn near_ties_round_toward_zero() {
        assert_eq!(rounding_key(1.0005, 3), 1000);
        assert_eq!(rounding_key(-1.0005, 3), -1000);
        assert_eq!(rounding_key(1.00051, 3), 1001);
        assert_eq!(rounding_key(2.5, 0), 2);
        assert_eq!(rounding_key(2.6, 0), 3);
    }

    #[test]
    fn realizability_of_own_column() {
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let cls = LinearClass::new("t", f.clone()).unwrap();
        assert!(realizability_check(&cls, &SAFunction(f.column(0)), None) < 1e-14);
        let id = LinearClass::identity(3);
        assert!(realizability_check(&id, &SAFunction(vec![3.0, -1.0, 7.0]), None) < 1e-14);
    }

    #[test]
    fn class_width_is_validated() {
        assert!(LinearClass::new("wide", DenseMatrix::zeros(2, 3)).is_err());
        assert!(LinearClass::new("empty", DenseMatrix::zeros(2, 0)).is_err());
    }
}
