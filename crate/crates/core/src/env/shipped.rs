//! Desk-scale environments used by the tests and the experiment configs.
//!
//! The JSON files under `configs/` hold the same models inline.

use super::{EnvConfig, LinearGaussian, TabularPomdp};

/// Three latent states, four noisy observations, two actions, one risk
/// channel. Transition and emission rows were drawn from a Dirichlet and
/// rounded; the emission matrix is diagonal-heavy with smallest singular value about 0.72.
pub fn tab3_model() -> TabularPomdp {
    TabularPomdp {
        name: "tab3".into(),
        transition: vec![
            vec![
                vec![0.222, 0.503, 0.275],
                vec![0.131, 0.363, 0.506],
                vec![0.024, 0.169, 0.807],
            ],
            vec![
                vec![0.580, 0.107, 0.313],
                vec![0.062, 0.045, 0.893],
                vec![0.045, 0.095, 0.860],
            ],
        ],
        emission: vec![
            vec![0.80, 0.10, 0.05, 0.05],
            vec![0.05, 0.80, 0.10, 0.05],
            vec![0.05, 0.05, 0.15, 0.75],
        ],
        reward: vec![1.0, 0.2, 0.6],
        risks: vec![vec![1.0, 0.0, 0.5]],
        initial: None,
    }
    .validated()
    .expect("tab3 is valid")
}

pub fn tab3() -> EnvConfig {
    EnvConfig::Tabular(tab3_model())
}

/// Risk threshold for `tab3` under which about 40% of (history, block) pairs
/// are feasible.
pub const TAB3_RISK_THRESHOLD: f64 = 1.36;

/// Deterministic cycle: the state is (position, last action); action 1
/// advances the position, action 0 stays, and the observation reveals the state.
pub fn tab_det() -> EnvConfig {
    let mut transition = vec![vec![vec![0.0; 4]; 4]; 2];
    for (a, slice) in transition.iter_mut().enumerate() {
        for (s, row) in slice.iter_mut().enumerate() {
            let pos = s / 2;
            let next = ((pos + a) % 2) * 2 + a;
            row[next] = 1.0;
        }
    }
    let emission = (0..4).map(|s| (0..4).map(|o| if o == s { 1.0 } else { 0.0 }).collect()).collect();
    EnvConfig::Tabular(
        TabularPomdp {
            name: "tab-det".into(),
            transition,
            emission,
            reward: vec![0.0, 0.5, 1.0, 0.25],
            risks: vec![vec![0.0, 0.0, 1.0, 0.0]],
            initial: Some(vec![0.25; 4]),
        }
        .validated()
        .expect("tab-det is valid"),
    )
}

/// Observations independent of everything: a single latent state.
pub fn tab_iid() -> EnvConfig {
    EnvConfig::Tabular(
        TabularPomdp {
            name: "tab-iid".into(),
            transition: vec![vec![vec![1.0]]; 2],
            emission: vec![vec![0.4, 0.3, 0.2, 0.1]],
            reward: vec![0.5],
            risks: vec![vec![0.5]],
            initial: Some(vec![1.0]),
        }
        .validated()
        .expect("tab-iid is valid"),
    )
}

/// Bandit-like system whose state and observation equal the last action.
pub fn echo() -> EnvConfig {
    let transition = (0..2)
        .map(|a| (0..2).map(|_| (0..2).map(|s| if s == a { 1.0 } else { 0.0 }).collect()).collect())
        .collect();
    EnvConfig::Tabular(
        TabularPomdp {
            name: "echo".into(),
            transition,
            emission: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            reward: vec![0.2, 0.8],
            risks: vec![vec![0.0, 1.0]],
            initial: Some(vec![0.5, 0.5]),
        }
        .validated()
        .expect("echo is valid"),
    )
}

/// Scalar `A = 0.9, B = 1, C = 1` with noise scale 0.01.
pub fn lgs1() -> EnvConfig {
    EnvConfig::LinearGaussian(LinearGaussian {
        name: "lgs1".into(),
        a: vec![vec![0.9]],
        b: vec![vec![1.0]],
        c: vec![vec![1.0]],
        process_noise: 0.01,
        observation_noise: 0.01,
        initial_mean: vec![0.0],
        initial_std: 1.3,
        action_low: -1.0,
        action_high: 1.0,
    })
}

pub fn by_name(name: &str) -> Option<EnvConfig> {
    match name {
        "tab3" => Some(tab3()),
        "tab-det" => Some(tab_det()),
        "tab-iid" => Some(tab_iid()),
        "echo" => Some(echo()),
        "lgs1" => Some(lgs1()),
        _ => None,
    }
}

pub const NAMES: [&str; 5] = ["tab3", "tab-det", "tab-iid", "echo", "lgs1"];
