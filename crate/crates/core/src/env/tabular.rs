//! Finite POMDP with latent rewards and risks, plus exact enumeration oracles.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_categorical, Env, EnvDescriptor, EnvStep, SpaceKind};
use crate::data::StepRecord;
use crate::error::{Error, Result};
use crate::kernel::Datum;

/// Default cap on `|S|^{W+1}·|A|^{W+1}` for value enumeration.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 24;

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPomdp {
    pub name: String,
    /// `transition[a][s][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `emission[s][o]`.
    pub emission: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    /// `risks[i][s]`.
    #[serde(default)]
    pub risks: Vec<Vec<f64>>,
    /// Distribution of the latent state before the first record; the
    /// stationary distribution of the uniform-action chain when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

fn normalize_row(row: &mut [f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    // rows already stochastic to rounding are kept as written
    if (s - 1.0).abs() > 8.0 * f64::EPSILON {
        row.iter_mut().for_each(|p| *p /= s);
    }
    Ok(())
}

impl TabularPomdp {
    /// Checks shapes, renormalizes rows that sum to one within 1e-6 and
    /// verifies undercompleteness of the emission matrix.
    pub fn validated(mut self) -> Result<Self> {
        let ns = self.emission.len();
        let na = self.transition.len();
        if ns == 0 || na == 0 {
            return Err(Error::NonPositiveDimension(0));
        }
        let no = self.emission[0].len();
        if no < ns {
            return Err(Error::InvalidDistribution(format!(
                "undercompleteness needs |O| >= |S|, got |O|={no}, |S|={ns}"
            )));
        }
        for (a, slice) in self.transition.iter_mut().enumerate() {
            if slice.len() != ns {
                return Err(Error::Shape(format!("transition[{a}] has {} rows, expected {ns}", slice.len())));
            }
            for (s, row) in slice.iter_mut().enumerate() {
                if row.len() != ns {
                    return Err(Error::Shape(format!("transition[{a}][{s}] has length {}", row.len())));
                }
                normalize_row(row, &format!("transition[{a}][{s}]"))?;
            }
        }
        for (s, row) in self.emission.iter_mut().enumerate() {
            if row.len() != no {
                return Err(Error::Shape(format!("emission[{s}] has length {}", row.len())));
            }
            normalize_row(row, &format!("emission[{s}]"))?;
        }
        if self.reward.len() != ns || self.risks.iter().any(|r| r.len() != ns) {
            return Err(Error::Shape("reward and risk vectors need one entry per state".into()));
        }
        if self.reward.iter().chain(self.risks.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward or risk".into()));
        }
        if let Some(init) = self.initial.as_mut() {
            if init.len() != ns {
                return Err(Error::Shape("initial distribution length".into()));
            }
            normalize_row(init, "initial distribution")?;
        }
        let sv = self.smallest_emission_singular_value();
        if !(sv > 1e-6) {
            return Err(Error::InvalidDistribution(format!(
                "emission matrix is rank deficient (smallest singular value {sv:.3e})"
            )));
        }
        Ok(self)
    }

    pub fn states(&self) -> usize {
        self.emission.len()
    }

    pub fn observations(&self) -> usize {
        self.emission[0].len()
    }

    pub fn actions(&self) -> usize {
        self.transition.len()
    }

    pub fn risk_channels(&self) -> usize {
        self.risks.len()
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: self.name.clone(),
            action: SpaceKind::Discrete { size: self.actions() },
            observation: SpaceKind::Discrete {
                size: self.observations(),
            },
            risk_channels: self.risk_channels(),
        }
    }

    pub fn instantiate(&self) -> TabularEnv {
        TabularEnv {
            model: Arc::new(self.clone()),
            initial: self.initial_distribution(),
            state: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn smallest_emission_singular_value(&self) -> f64 {
        let m = DMatrix::from_fn(self.states(), self.observations(), |s, o| self.emission[s][o]);
        m.singular_values().min()
    }

    /// Stationary distribution of the latent chain under uniformly random actions.
    pub fn stationary_behavior(&self) -> Vec<f64> {
        let n = self.states();
        let na = self.actions() as f64;
        // (Pᵀ - I) x = 0 with the last equation replaced by Σx = 1
        let mut m = DMatrix::from_fn(n, n, |i, j| {
            let p: f64 = self.transition.iter().map(|t| t[j][i]).sum::<f64>() / na;
            p - if i == j { 1.0 } else { 0.0 }
        });
        let mut rhs = nalgebra::DVector::zeros(n);
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        rhs[n - 1] = 1.0;
        let x = m.lu().solve(&rhs).unwrap_or_else(|| nalgebra::DVector::from_element(n, 1.0 / n as f64));
        let mut v: Vec<f64> = x.iter().map(|p| p.max(0.0)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|p| *p /= s);
        v
    }

    pub fn initial_distribution(&self) -> Vec<f64> {
        self.initial.clone().unwrap_or_else(|| self.stationary_behavior())
    }

    pub fn check_belief(&self, belief: &[f64]) -> Result<()> {
        if belief.len() != self.states() {
            return Err(Error::InvalidDistribution(format!(
                "belief has {} entries for {} states",
                belief.len(),
                self.states()
            )));
        }
        if belief.iter().any(|p| !p.is_finite() || *p < -1e-12) {
            return Err(Error::InvalidDistribution("belief has negative entries".into()));
        }
        let s: f64 = belief.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("belief sums to {s}")));
        }
        Ok(())
    }

    fn check_action(&self, a: u32) -> Result<usize> {
        if (a as usize) < self.actions() {
            Ok(a as usize)
        } else {
            Err(Error::Shape(format!("action {a} outside {} actions", self.actions())))
        }
    }

    fn check_observation(&self, o: u32) -> Result<usize> {
        if (o as usize) < self.observations() {
            Ok(o as usize)
        } else {
            Err(Error::Shape(format!("observation {o} outside {} observations", self.observations())))
        }
    }

    /// `d ↦ d·T[a]`.
    pub fn propagate(&self, d: &[f64], a: usize) -> Vec<f64> {
        let n = self.states();
        let mut out = vec![0.0; n];
        for (s, &p) in d.iter().enumerate() {
            if p != 0.0 {
                for (sp, &t) in self.transition[a][s].iter().enumerate() {
                    out[sp] += p * t;
                }
            }
        }
        out
    }

    /// Bayes filter step over the state after taking `a` and seeing `o`.
    pub fn filter(&self, belief: &[f64], a: u32, o: u32) -> Result<Vec<f64>> {
        let (a, o) = (self.check_action(a)?, self.check_observation(o)?);
        let mut d = self.propagate(belief, a);
        for (s, p) in d.iter_mut().enumerate() {
            *p *= self.emission[s][o];
        }
        let z: f64 = d.iter().sum();
        if !(z > 0.0) {
            return Err(Error::InvalidDistribution(format!("observation {o} after action {a} has zero probability")));
        }
        d.iter_mut().for_each(|p| *p /= z);
        Ok(d)
    }

    fn filter_pairs<'a>(&self, mut b: Vec<f64>, pairs: impl Iterator<Item = (&'a Datum, &'a Datum)>) -> Result<Vec<f64>> {
        for (a, o) in pairs {
            match (a, o) {
                (Datum::Sentinel, Datum::Sentinel) => continue,
                (Datum::Symbol(a), Datum::Symbol(o)) => b = self.filter(&b, *a, *o)?,
                _ => return Err(Error::Shape(format!("non-symbolic pair ({a:?}, {o:?})"))),
            }
        }
        Ok(b)
    }

    /// Belief after a history suffix, starting from the stationary
    /// distribution of the uniform-action chain. This is the exact
    /// conditional law given the suffix alone for data collected under the
    /// uniform behavior policy at stationarity.
    pub fn suffix_belief(&self, pairs: &[(Datum, Datum)]) -> Result<Vec<f64>> {
        self.filter_pairs(self.stationary_behavior(), pairs.iter().map(|(a, o)| (a, o)))
    }

    /// Exact filter from the start of an episode.
    pub fn prefix_belief(&self, steps: &[StepRecord]) -> Result<Vec<f64>> {
        self.filter_pairs(self.initial_distribution(), steps.iter().map(|s| (&s.action, &s.observation)))
    }

    /// `ℙ(o_{1:W} | belief, do(a_{1:W}))` by forward filtering.
    pub fn exact_test_probability(&self, belief: &[f64], actions: &[u32], observations: &[u32]) -> Result<f64> {
        self.check_belief(belief)?;
        if actions.len() != observations.len() {
            return Err(Error::Shape("action and observation blocks differ in length".into()));
        }
        let mut d = belief.to_vec();
        for (&a, &o) in actions.iter().zip(observations) {
            let (a, o) = (self.check_action(a)?, self.check_observation(o)?);
            d = self.propagate(&d, a);
            for (s, p) in d.iter_mut().enumerate() {
                *p *= self.emission[s][o];
            }
        }
        Ok(d.iter().sum())
    }

    /// Distribution over every observation block, indexed by its mixed-radix
    /// code (first observation most significant).
    pub fn test_distribution(&self, belief: &[f64], actions: &[u32]) -> Result<Vec<f64>> {
        self.check_belief(belief)?;
        let no = self.observations();
        let mut layer: Vec<Vec<f64>> = vec![belief.to_vec()];
        for &a in actions {
            let a = self.check_action(a)?;
            let mut next = Vec::with_capacity(layer.len() * no);
            for d in &layer {
                let pred = self.propagate(d, a);
                for o in 0..no {
                    next.push(pred.iter().enumerate().map(|(s, p)| p * self.emission[s][o]).collect());
                }
            }
            layer = next;
        }
        Ok(layer.iter().map(|d| d.iter().sum()).collect())
    }

    /// Same quantity as [`Self::exact_test_probability`] by summing over all
    /// `|S|^{W+1}` latent paths.
    pub fn path_enumeration_probability(&self, belief: &[f64], actions: &[u32], observations: &[u32]) -> Result<f64> {
        self.check_belief(belief)?;
        let w = actions.len();
        let ns = self.states();
        let total = ns.pow(w as u32 + 1);
        let mut sum = 0.0;
        for code in 0..total {
            let mut path = vec![0usize; w + 1];
            let mut c = code;
            for slot in (0..=w).rev() {
                path[slot] = c % ns;
                c /= ns;
            }
            let mut p = belief[path[0]];
            for k in 0..w {
                let a = self.check_action(actions[k])?;
                let o = self.check_observation(observations[k])?;
                p *= self.transition[a][path[k]][path[k + 1]] * self.emission[path[k + 1]][o];
            }
            sum += p;
        }
        Ok(sum)
    }

    /// Next-observation distribution after `a`.
    pub fn one_step_distribution(&self, belief: &[f64], a: u32) -> Result<Vec<f64>> {
        self.test_distribution(belief, &[a])
    }

    fn check_cap(&self, len: usize, cap: u128) -> Result<()> {
        let count = (self.states() as u128).saturating_pow(len as u32)
            .saturating_mul((self.actions() as u128).saturating_pow(len as u32));
        if count > cap {
            Err(Error::EnumerationCap { count, cap })
        } else {
            Ok(())
        }
    }

    /// Exact expected return and risks of an open-loop action block.
    pub fn exact_block_value(&self, belief: &[f64], actions: &[u32]) -> Result<(f64, Vec<f64>)> {
        self.check_belief(belief)?;
        let mut d = belief.to_vec();
        let mut v = 0.0;
        let mut c = vec![0.0; self.risk_channels()];
        for &a in actions {
            d = self.propagate(&d, self.check_action(a)?);
            v += dot(&d, &self.reward);
            for (acc, r) in c.iter_mut().zip(&self.risks) {
                *acc += dot(&d, r);
            }
        }
        Ok((v, c))
    }

    /// Exact value and risks of a distribution over action blocks of length
    /// `block_len`, given as probabilities indexed by mixed-radix block code.
    pub fn exact_value_risk(&self, belief: &[f64], block_probs: &[f64], block_len: usize, cap: u128) -> Result<(f64, Vec<f64>)> {
        self.check_cap(block_len, cap)?;
        let blocks = enumerate_blocks(self.actions(), block_len);
        if block_probs.len() != blocks.len() {
            return Err(Error::Shape(format!(
                "{} block probabilities for {} blocks",
                block_probs.len(),
                blocks.len()
            )));
        }
        let mut v = 0.0;
        let mut c = vec![0.0; self.risk_channels()];
        for (block, &p) in blocks.iter().zip(block_probs) {
            if p == 0.0 {
                continue;
            }
            let (bv, bc) = self.exact_block_value(belief, block)?;
            v += p * bv;
            for (acc, x) in c.iter_mut().zip(bc) {
                *acc += p * x;
            }
        }
        Ok((v, c))
    }

    /// `E[Σ r | belief, o_block]` and risk analogues for a fixed action
    /// block, with the probability of the observation block.
    pub fn conditional_block_return(&self, belief: &[f64], actions: &[u32], observations: &[u32]) -> Result<(f64, f64, Vec<f64>)> {
        self.check_belief(belief)?;
        let nc = self.risk_channels();
        let mut alpha = belief.to_vec();
        let mut rho = vec![0.0; self.states()];
        let mut kappa = vec![vec![0.0; self.states()]; nc];
        for (&a, &o) in actions.iter().zip(observations) {
            let (a, o) = (self.check_action(a)?, self.check_observation(o)?);
            let pa = self.propagate(&alpha, a);
            let pr = self.propagate(&rho, a);
            for s in 0..self.states() {
                let e = self.emission[s][o];
                rho[s] = (pr[s] + pa[s] * self.reward[s]) * e;
            }
            for (i, k) in kappa.iter_mut().enumerate() {
                let pk = self.propagate(k, a);
                for s in 0..self.states() {
                    k[s] = (pk[s] + pa[s] * self.risks[i][s]) * self.emission[s][o];
                }
            }
            for s in 0..self.states() {
                alpha[s] = pa[s] * self.emission[s][o];
            }
        }
        let z: f64 = alpha.iter().sum();
        Ok((z, rho.iter().sum(), kappa.iter().map(|k| k.iter().sum()).collect()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All blocks of `len` symbols from `alphabet`, in mixed-radix order.
pub fn enumerate_blocks(alphabet: usize, len: usize) -> Vec<Vec<u32>> {
    let total = alphabet.pow(len as u32);
    (0..total)
        .map(|mut code| {
            let mut b = vec![0u32; len];
            for slot in (0..len).rev() {
                b[slot] = (code % alphabet) as u32;
                code /= alphabet;
            }
            b
        })
        .collect()
}

/// Mixed-radix code of a block.
pub fn block_code(block: &[u32], alphabet: usize) -> usize {
    block.iter().fold(0, |acc, &s| acc * alphabet + s as usize)
}

#[derive(Debug, Clone)]
pub struct TabularEnv {
    model: Arc<TabularPomdp>,
    initial: Vec<f64>,
    state: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn state(&self) -> usize {
        self.state
    }
}

impl Env for TabularEnv {
    fn descriptor(&self) -> EnvDescriptor {
        self.model.descriptor()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = sample_categorical(&self.initial, self.rng.gen());
    }

    fn step(&mut self, action: &Datum) -> Result<EnvStep> {
        let a = match action {
            Datum::Symbol(a) => self.model.check_action(*a)?,
            other => return Err(Error::Shape(format!("tabular env expects a symbol, got {other:?}"))),
        };
        let m = &self.model;
        self.state = sample_categorical(&m.transition[a][self.state], self.rng.gen());
        let o = sample_categorical(&m.emission[self.state], self.rng.gen());
        Ok(EnvStep {
            observation: Datum::Symbol(o as u32),
            reward: m.reward[self.state],
            risks: m.risks.iter().map(|r| r[self.state]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::shipped;

    fn chain() -> TabularPomdp {
        TabularPomdp {
            name: "chain".into(),
            transition: vec![vec![vec![0.7, 0.3], vec![0.4, 0.6]]],
            emission: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            reward: vec![0.0, 1.0],
            risks: vec![],
            initial: None,
        }
        .validated()
        .unwrap()
    }

    #[test]
    fn identity_emission_reads_the_transition() {
        let m = chain();
        assert_eq!(m.exact_test_probability(&[1.0, 0.0], &[0], &[1]).unwrap(), 0.3);
        assert_eq!(m.exact_test_probability(&[0.0, 1.0], &[0], &[0]).unwrap(), 0.4);
    }

    #[test]
    fn invalid_beliefs_are_rejected() {
        let m = chain();
        assert!(matches!(m.exact_test_probability(&[0.5, 0.6], &[0], &[1]), Err(Error::InvalidDistribution(_))));
        assert!(m.exact_test_probability(&[1.0], &[0], &[1]).is_err());
    }

    #[test]
    fn stationary_is_invariant() {
        let m = shipped::tab3_model();
        let st = m.stationary_behavior();
        let mut next = vec![0.0; 3];
        for a in 0..m.actions() {
            for (s, v) in m.propagate(&st, a).iter().enumerate() {
                next[s] += v / m.actions() as f64;
            }
        }
        for (x, y) in st.iter().zip(&next) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn value_of_constant_rewards() {
        let mut m = shipped::tab3_model();
        let b = m.stationary_behavior();
        m.reward = vec![0.0; 3];
        assert_eq!(m.exact_block_value(&b, &[0, 1, 1]).unwrap().0, 0.0);
        m.reward = vec![1.0; 3];
        let (v, _) = m.exact_value_risk(&b, &[0.125; 8], 3, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(matches!(
            m.exact_value_risk(&b, &[0.125; 8], 3, 10),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn conditional_return_marginalizes_to_block_value() {
        let m = shipped::tab3_model();
        let b = m.suffix_belief(&[(Datum::Symbol(1), Datum::Symbol(2))]).unwrap();
        let acts = [1u32, 0, 1];
        let mut z = 0.0;
        let mut ret = 0.0;
        for obs in enumerate_blocks(4, 3) {
            let (p, r, _) = m.conditional_block_return(&b, &acts, &obs).unwrap();
            z += p;
            ret += r;
        }
        let (v, _) = m.exact_block_value(&b, &acts).unwrap();
        assert!((z - 1.0).abs() < 1e-12);
        assert!((ret - v).abs() < 1e-12);
    }

    #[test]
    fn block_codes_round_trip() {
        for (k, b) in enumerate_blocks(3, 3).iter().enumerate() {
            assert_eq!(block_code(b, 3), k);
        }
    }
}
