//! Seeded generation of offline transition data and initial-state samples.
//!
//! Streams come from ChaCha8 keyed by `SHA-256(tag ‖ master_seed ‖ replicate)`,
//! with separate ChaCha stream ids for transitions and initial states.
//! Categorical draws use inverse-CDF over the flattened index order and
//! consume a fixed number of uniforms per tuple, so a dataset of size `n`
//! is always a prefix of the dataset of size `n' > n` with the same seed.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{StateActionDist, TabularMdp};

/// Identifier recorded in experiment metadata.
pub const RNG_ALGORITHM: &str = "chacha8/sha256-key/v1";

const TRANSITION_STREAM: u64 = 0;
const INITIAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replicate_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replicate_index: u64) -> Self {
        Self {
            master_seed,
            replicate_index,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"regmis/seed/v1");
        h.update(self.master_seed.to_le_bytes());
        h.update(self.replicate_index.to_le_bytes());
        h.finalize().into()
    }

    /// 64-bit fingerprint of the derived key, recorded next to results.
    pub fn fingerprint(&self) -> u64 {
        let key = self.key();
        u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
    }

    /// Independent ChaCha stream under this seed; ids 0 and 1 are used for data.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(stream);
        rng
    }
}

/// How realized rewards are drawn from their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardNoise {
    /// `r = r̄(s,a)`.
    #[default]
    Deterministic,
    /// `r ~ Bernoulli(r̄(s,a))`.
    Bernoulli,
}

/// Parallel arrays of `(s, a, r, s')` tuples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
    pub s_next: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// The first `n` tuples.
    pub fn prefix(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            s: self.s[..n].to_vec(),
            a: self.a[..n].to_vec(),
            r: self.r[..n].to_vec(),
            s_next: self.s_next[..n].to_vec(),
        }
    }

    pub fn validate(&self, mdp: &TabularMdp) -> Result<()> {
        let n = self.s.len();
        if self.a.len() != n || self.r.len() != n || self.s_next.len() != n {
            return Err(Error::DimensionMismatch("dataset columns differ in length".into()));
        }
        for i in 0..n {
            if self.s[i] >= mdp.n_states() || self.s_next[i] >= mdp.n_states() || self.a[i] >= mdp.n_actions() {
                return Err(Error::Config(format!("dataset row {i} has an out-of-range index")));
            }
            if !(0.0..=1.0).contains(&self.r[i]) {
                return Err(Error::Config(format!("dataset row {i} has reward outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Columnar CSV with header `s,a,r,s_next`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "a", "r", "s_next"])?;
        for i in 0..self.len() {
            w.write_record([
                self.s[i].to_string(),
                self.a[i].to_string(),
                self.r[i].to_string(),
                self.s_next[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            s: usize,
            a: usize,
            r: f64,
            s_next: usize,
        }
        let mut data = Dataset::default();
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: Row = row?;
            data.s.push(row.s);
            data.a.push(row.a);
            data.r.push(row.r);
            data.s_next.push(row.s_next);
        }
        Ok(data)
    }
}

/// Initial states sampled from `μ0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitDataset {
    pub s0: Vec<usize>,
}

impl InitDataset {
    pub fn len(&self) -> usize {
        self.s0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s0.is_empty()
    }

    pub fn prefix(&self, n: usize) -> InitDataset {
        InitDataset {
            s0: self.s0[..n.min(self.len())].to_vec(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s0"])?;
        for s in &self.s0 {
            w.write_record([s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut s0 = Vec::new();
        for rec in csv::Reader::from_reader(input).records() {
            let rec = rec?;
            let v = rec
                .get(0)
                .ok_or_else(|| Error::Config("empty row in initial-state CSV".into()))?;
            s0.push(v.trim().parse().map_err(|_| Error::Config(format!("bad state index {v:?}")))?);
        }
        Ok(Self { s0 })
    }
}

/// Cumulative distribution for inverse-CDF sampling; the last bucket absorbs rounding slack.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Trailing zero-probability buckets must never be selected.
        if let Some(last) = probs.iter().rposition(|p| *p > 0.0) {
            for c in &mut cdf[last..] {
                *c = f64::INFINITY;
            }
        }
        Self { cdf }
    }

    #[inline]
    pub fn sample_with(&self, u: f64) -> usize {
        self.cdf.partition_point(|c| *c <= u)
    }
}

/// Draws `n` i.i.d. tuples `(s,a) ~ d^D, r ~ R(·|s,a), s' ~ P(·|s,a)` with deterministic rewards.
pub fn sample_transitions(mdp: &TabularMdp, d_d: &StateActionDist, n: usize, seed: SeedSpec) -> Result<Dataset> {
    sample_transitions_with(mdp, d_d, n, seed, RewardNoise::Deterministic)
}

pub fn sample_transitions_with(
    mdp: &TabularMdp,
    d_d: &StateActionDist,
    n: usize,
    seed: SeedSpec,
    noise: RewardNoise,
) -> Result<Dataset> {
    if d_d.len() != mdp.n_pairs() {
        return Err(Error::DimensionMismatch("d_D does not match the MDP".into()));
    }
    let pairs = Categorical::new(d_d.weights());
    let next: Vec<Categorical> = (0..mdp.n_pairs())
        .map(|sa| Categorical::new(mdp.next_state_probs(sa)))
        .collect();
    let mut rng = seed.rng(TRANSITION_STREAM);
    let mut data = Dataset {
        s: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
        s_next: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let (u_pair, u_next, u_reward): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let sa = pairs.sample_with(u_pair);
        let mean = mdp.mean_reward()[sa];
        let r = match noise {
            RewardNoise::Deterministic => mean,
            RewardNoise::Bernoulli => f64::from(u8::from(u_reward < mean)),
        };
        data.s.push(sa / mdp.n_actions());
        data.a.push(sa % mdp.n_actions());
        data.r.push(r);
        data.s_next.push(next[sa].sample_with(u_next));
    }
    Ok(data)
}

/// Draws `n0` i.i.d. initial states from `μ0`.
pub fn sample_initial(mdp: &TabularMdp, n0: usize, seed: SeedSpec) -> InitDataset {
    let cat = Categorical::new(mdp.mu0());
    let mut rng = seed.rng(INITIAL_STREAM);
    InitDataset {
        s0: (0..n0).map(|_| cat.sample_with(rng.gen())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::single_state;

    #[test]
    fn deterministic_given_seed() {
        let (mdp, _) = single_state();
        let d = StateActionDist::uniform(1);
        let a = sample_transitions(&mdp, &d, 10, SeedSpec::new(7, 0)).unwrap();
        let b = sample_transitions(&mdp, &d, 10, SeedSpec::new(7, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.s.iter().all(|s| *s == 0) && a.r.iter().all(|r| *r == 1.0));
        assert!(a.s_next.iter().all(|s| *s == 0));
    }

    #[test]
    fn prefix_property() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.3, 0.7, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0],
            vec![0.2, 0.4, 0.6, 0.8],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let d = StateActionDist::uniform(4);
        let long = sample_transitions_with(&mdp, &d, 200, SeedSpec::new(3, 4), RewardNoise::Bernoulli).unwrap();
        let short = sample_transitions_with(&mdp, &d, 50, SeedSpec::new(3, 4), RewardNoise::Bernoulli).unwrap();
        assert_eq!(long.prefix(50), short);
        long.validate(&mdp).unwrap();
        assert!(long.r.iter().all(|r| *r == 0.0 || *r == 1.0));
    }

    #[test]
    fn distinct_replicates_differ() {
        let mdp = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 1.0], 0.9, vec![0.5, 0.5]).unwrap();
        let a = sample_initial(&mdp, 64, SeedSpec::new(1, 0));
        let b = sample_initial(&mdp, 64, SeedSpec::new(1, 1));
        assert_ne!(a, b);
        assert_eq!(a, sample_initial(&mdp, 64, SeedSpec::new(1, 0)));
    }

    #[test]
    fn point_mass_initial() {
        let mdp = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 1.0], 0.9, vec![1.0, 0.0]).unwrap();
        assert!(sample_initial(&mdp, 100, SeedSpec::new(9, 2)).s0.iter().all(|s| *s == 0));
    }

    #[test]
    fn categorical_edges() {
        let c = Categorical::new(&[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(c.sample_with(0.0), 1);
        assert_eq!(c.sample_with(0.4999), 1);
        assert_eq!(c.sample_with(0.5), 2);
        assert_eq!(c.sample_with(0.999_999_999_999), 2);
    }

    #[test]
    fn csv_round_trip() {
        let data = Dataset {
            s: vec![0, 3],
            a: vec![1, 2],
            r: vec![0.25, 1.0 / 3.0],
            s_next: vec![1, 3],
        };
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("s,a,r,s_next\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), data);
        let init = InitDataset { s0: vec![4, 0, 2] };
        let mut buf = Vec::new();
        init.write_csv(&mut buf).unwrap();
        assert_eq!(InitDataset::read_csv(buf.as_slice()).unwrap(), init);
    }
}
