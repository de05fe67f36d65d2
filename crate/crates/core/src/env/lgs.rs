//! Linear-Gaussian system `s' = A s + B a + ε`, `o = C s' + ν` with a Kalman
//! filter oracle.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvDescriptor, EnvStep, SpaceKind};
use crate::error::{Error, Result};
use crate::kernel::Datum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    /// Standard deviation of each process-noise component.
    pub process_noise: f64,
    /// Standard deviation of each observation-noise component.
    pub observation_noise: f64,
    /// Mean of the latent state before the first record.
    pub initial_mean: Vec<f64>,
    /// Isotropic standard deviation of the initial state.
    pub initial_std: f64,
    /// Box for uniformly random behavior actions.
    pub action_low: f64,
    pub action_high: f64,
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::Shape(format!("matrix {what} is empty or ragged")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Gaussian belief over the latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LinearGaussian {
    pub fn validated(self) -> Result<Self> {
        let (a, b, c) = (self.a_mat()?, self.b_mat()?, self.c_mat()?);
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || self.initial_mean.len() != n {
            return Err(Error::Shape("inconsistent A/B/C/initial dimensions".into()));
        }
        if !(self.process_noise >= 0.0 && self.observation_noise >= 0.0 && self.initial_std >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if !(self.action_high > self.action_low) {
            return Err(Error::Config("action box must be non-empty".into()));
        }
        Ok(self)
    }

    pub fn a_mat(&self) -> Result<DMatrix<f64>> {
        to_matrix(&self.a, "A")
    }

    pub fn b_mat(&self) -> Result<DMatrix<f64>> {
        to_matrix(&self.b, "B")
    }

    pub fn c_mat(&self) -> Result<DMatrix<f64>> {
        to_matrix(&self.c, "C")
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn action_dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn observation_dim(&self) -> usize {
        self.c.len()
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: self.name.clone(),
            action: SpaceKind::Continuous {
                dim: self.action_dim(),
                low: self.action_low,
                high: self.action_high,
            },
            observation: SpaceKind::Continuous {
                dim: self.observation_dim(),
                low: f64::NEG_INFINITY,
                high: f64::INFINITY,
            },
            risk_channels: 0,
        }
    }

    pub fn instantiate(&self) -> LgsEnv {
        LgsEnv {
            a: self.a_mat().expect("validated"),
            b: self.b_mat().expect("validated"),
            c: self.c_mat().expect("validated"),
            model: self.clone(),
            state: DVector::from_vec(self.initial_mean.clone()),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn prior(&self) -> GaussianBelief {
        let n = self.state_dim();
        GaussianBelief {
            mean: DVector::from_vec(self.initial_mean.clone()),
            cov: DMatrix::identity(n, n) * self.initial_std.powi(2),
        }
    }

    fn vector(d: &Datum, dim: usize, what: &str) -> Result<DVector<f64>> {
        match d {
            Datum::Vector(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
            other => Err(Error::Shape(format!("{what}: expected a {dim}-vector, got {other:?}"))),
        }
    }

    /// Kalman filter over `(action, observation)` records, starting from
    /// `prior` over the state before the first record.
    pub fn kalman(&self, prior: &GaussianBelief, records: &[(Datum, Datum)]) -> Result<GaussianBelief> {
        let (a, b, c) = (self.a_mat()?, self.b_mat()?, self.c_mat()?);
        let n = self.state_dim();
        let q = DMatrix::identity(n, n) * self.process_noise.powi(2);
        let r = DMatrix::identity(self.observation_dim(), self.observation_dim()) * self.observation_noise.powi(2);
        let mut m = prior.mean.clone();
        let mut p = prior.cov.clone();
        for (step, (act, obs)) in records.iter().enumerate() {
            let u = Self::vector(act, self.action_dim(), "action")?;
            let y = Self::vector(obs, self.observation_dim(), "observation")?;
            m = &a * &m + &b * u;
            p = &a * &p * a.transpose() + &q;
            if p.iter().all(|v| *v == 0.0) {
                // state known exactly; the observation carries no information
                continue;
            }
            let s = &c * &p * c.transpose() + &r;
            let chol = s.clone().cholesky().ok_or(Error::SingularInnovation(step))?;
            let gain = chol.solve(&(&c * &p)).transpose();
            m = &m + &gain * (y - &c * &m);
            p = (DMatrix::identity(n, n) - &gain * &c) * p;
            p = (&p + p.transpose()) * 0.5;
        }
        Ok(GaussianBelief { mean: m, cov: p })
    }

    /// `E[o_{t+k} | h, a]` for the actions `a_{t-1}, …, a_{t+W-2}` following a
    /// filtered belief: `Γ ŝ + U a` with `Γ_k = C A^{k+1}` and
    /// `U_{kj} = C A^{k-j} B`.
    pub fn conditional_mean(&self, belief: &GaussianBelief, actions: &[Datum]) -> Result<Vec<Vec<f64>>> {
        let (a, b, c) = (self.a_mat()?, self.b_mat()?, self.c_mat()?);
        let mut s = belief.mean.clone();
        let mut out = Vec::with_capacity(actions.len());
        for act in actions {
            let u = Self::vector(act, self.action_dim(), "action")?;
            s = &a * &s + &b * u;
            out.push((&c * &s).iter().copied().collect());
        }
        Ok(out)
    }

    /// Filtered conditional means from the start of an episode.
    pub fn lgs_conditional_mean(&self, history: &[(Datum, Datum)], actions: &[Datum]) -> Result<Vec<Vec<f64>>> {
        let belief = self.kalman(&self.prior(), history)?;
        self.conditional_mean(&belief, actions)
    }
}

#[derive(Debug, Clone)]
pub struct LgsEnv {
    model: LinearGaussian,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    state: DVector<f64>,
    rng: ChaCha8Rng,
}

impl LgsEnv {
    fn noise(&mut self, dim: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            scale * z
        })
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }
}

impl Env for LgsEnv {
    fn descriptor(&self) -> EnvDescriptor {
        self.model.descriptor()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.model.state_dim();
        let jitter = self.noise(n, self.model.initial_std);
        self.state = DVector::from_vec(self.model.initial_mean.clone()) + jitter;
    }

    fn step(&mut self, action: &Datum) -> Result<EnvStep> {
        let u = LinearGaussian::vector(action, self.model.action_dim(), "action")?;
        let n = self.model.state_dim();
        let p = self.model.observation_dim();
        let w = self.noise(n, self.model.process_noise);
        self.state = &self.a * &self.state + &self.b * u + w;
        let v = self.noise(p, self.model.observation_noise);
        let o = &self.c * &self.state + v;
        Ok(EnvStep {
            observation: Datum::Vector(o.iter().copied().collect()),
            reward: 0.0,
            risks: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout_constant, shipped, EnvConfig};

    fn scalar(noise: f64) -> LinearGaussian {
        LinearGaussian {
            name: "scalar".into(),
            a: vec![vec![0.9]],
            b: vec![vec![1.0]],
            c: vec![vec![1.0]],
            process_noise: noise,
            observation_noise: noise,
            initial_mean: vec![1.0],
            initial_std: 0.0,
            action_low: -1.0,
            action_high: 1.0,
        }
    }

    #[test]
    fn zero_noise_rollout_is_the_recursion() {
        let env = EnvConfig::LinearGaussian(scalar(0.0));
        let trajs = rollout_constant(&env, 1, 6, 3, Datum::Vector(vec![0.0])).unwrap();
        let mut expected = 1.0;
        for step in &trajs[0].steps {
            expected *= 0.9;
            let o = step.observation.as_slice().unwrap()[0];
            assert!((o - expected).abs() < 1e-12, "{o} vs {expected}");
        }
    }

    #[test]
    fn zero_noise_prediction_is_deterministic() {
        let m = scalar(0.0);
        let hist: Vec<(Datum, Datum)> = vec![
            (Datum::Vector(vec![0.5]), Datum::Vector(vec![1.4])),
            (Datum::Vector(vec![-1.0]), Datum::Vector(vec![0.26])),
        ];
        let pred = m
            .lgs_conditional_mean(&hist, &[Datum::Vector(vec![0.2]), Datum::Vector(vec![0.0])])
            .unwrap();
        let s2 = 0.9 * (0.9 * 1.0 + 0.5) - 1.0;
        let o3 = 0.9 * s2 + 0.2;
        assert!((pred[0][0] - o3).abs() < 1e-12);
        assert!((pred[1][0] - 0.9 * o3).abs() < 1e-12);
    }

    #[test]
    fn shipped_lgs_is_valid() {
        let cfg = shipped::lgs1();
        assert!(cfg.clone().validated().is_ok());
        assert_eq!(cfg.descriptor().risk_channels, 0);
    }
}
