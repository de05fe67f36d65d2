use kpsr::env::tabular::{enumerate_blocks, DEFAULT_ENUMERATION_CAP};
use kpsr::env::{chi_square, rollout, rollout_constant, rollout_with, shipped, Env, EnvConfig, LinearGaussian, TabularPomdp};
use kpsr::Datum;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tabular_envs() -> Vec<TabularPomdp> {
    shipped::NAMES
        .iter()
        .filter_map(|n| match shipped::by_name(n).unwrap() {
            EnvConfig::Tabular(t) => Some(t),
            _ => None,
        })
        .collect()
}

fn p_value(counts: &[u64], probs: &[f64]) -> f64 {
    let (stat, dof) = chi_square(counts, probs);
    if dof == 0 {
        return 1.0;
    }
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

#[test]
fn sampled_transitions_and_emissions_pass_chi_square() {
    for model in tabular_envs() {
        let (ns, na, no) = (model.states(), model.actions(), model.observations());
        let mut trans = vec![vec![vec![0u64; ns]; ns]; na];
        let mut emit = vec![vec![0u64; no]; ns];
        let mut env = model.instantiate();
        env.reset(11);
        for k in 0..100_000u32 {
            let a = k % na as u32;
            let s = env.state();
            let step = env.step(&Datum::Symbol(a)).unwrap();
            let next = env.state();
            trans[a as usize][s][next] += 1;
            emit[next][step.observation.symbol().unwrap() as usize] += 1;
        }
        for a in 0..na {
            for s in 0..ns {
                if trans[a][s].iter().sum::<u64>() > 0 {
                    let p = p_value(&trans[a][s], &model.transition[a][s]);
                    assert!(p > 1e-3, "{} transition a={a} s={s}: p={p}", model.name);
                }
            }
        }
        for s in 0..ns {
            if emit[s].iter().sum::<u64>() > 0 {
                let p = p_value(&emit[s], &model.emission[s]);
                assert!(p > 1e-3, "{} emission s={s}: p={p}", model.name);
            }
        }
    }
}

#[test]
fn filtering_matches_path_enumeration_on_every_config() {
    for model in tabular_envs() {
        let belief = model.stationary_behavior();
        for w in 1..=3 {
            let obs_blocks = enumerate_blocks(model.observations(), w);
            for actions in enumerate_blocks(model.actions(), w) {
                let mut total = 0.0;
                for obs in &obs_blocks {
                    let f = model.exact_test_probability(&belief, &actions, obs).unwrap();
                    let e = model.path_enumeration_probability(&belief, &actions, obs).unwrap();
                    assert!((f - e).abs() < 1e-12, "{} {actions:?} {obs:?}: {f} vs {e}", model.name);
                    total += f;
                }
                assert!((total - 1.0).abs() < 1e-10, "{} mass {total}", model.name);
            }
        }
    }
}

#[test]
fn shipped_configs_are_undercomplete() {
    for model in tabular_envs() {
        assert!(model.smallest_emission_singular_value() > 1e-6, "{}", model.name);
    }
}

#[test]
fn deterministic_env_probabilities_are_zero_or_one() {
    let env = shipped::tab_det();
    let model = env.tabular().unwrap();
    let belief = vec![1.0, 0.0, 0.0, 0.0];
    let actions = [1, 1, 0];
    let mut hits = 0;
    for obs in enumerate_blocks(4, 3) {
        let p = model.exact_test_probability(&belief, &actions, &obs).unwrap();
        assert!(p == 0.0 || (p - 1.0).abs() < 1e-15);
        if p > 0.5 {
            hits += 1;
            // position advances, advances, stays; observation reveals (position, last action)
            assert_eq!(obs, vec![3, 1, 0]);
        }
    }
    assert_eq!(hits, 1);
}

fn with_rewards(mut model: TabularPomdp, reward: Vec<f64>) -> TabularPomdp {
    model.reward = reward;
    model
}

#[test]
fn value_oracle_examples() {
    let model = shipped::tab3_model();
    let belief = model.stationary_behavior();
    let uniform = vec![0.125; 8];
    let zero = with_rewards(model.clone(), vec![0.0; 3]);
    assert_eq!(zero.exact_value_risk(&belief, &uniform, 3, DEFAULT_ENUMERATION_CAP).unwrap().0, 0.0);
    let ones = with_rewards(model.clone(), vec![1.0; 3]);
    let mut skewed = vec![0.0; 8];
    skewed[5] = 0.7;
    skewed[2] = 0.3;
    for probs in [&uniform, &skewed] {
        let (v, _) = ones.exact_value_risk(&belief, probs, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }
    assert!(model.exact_value_risk(&belief, &uniform, 3, 10).is_err());
}

#[test]
fn block_value_matches_monte_carlo() {
    let env = shipped::tab3();
    let model = env.tabular().unwrap();
    let block = [1u32, 0, 1];
    let (exact, exact_risk) = model.exact_block_value(&model.initial_distribution(), &block).unwrap();
    let n = 100_000;
    let trajs = rollout_with(&env, n, 3, 5, 0, &|_, _| Ok(block.iter().map(|&a| Datum::Symbol(a)).collect())).unwrap();
    let returns: Vec<f64> = trajs.iter().map(|t| t.steps.iter().map(|s| s.reward).sum()).collect();
    let risks: Vec<f64> = trajs.iter().map(|t| t.steps.iter().map(|s| s.risks[0]).sum()).collect();
    for (xs, target) in [(&returns, exact), (&risks, exact_risk[0])] {
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * se, "mean {mean} exact {target} se {se}");
    }
}

#[test]
fn rollout_examples() {
    let env = shipped::tab3();
    let trajs = rollout(&env, 10, 20, 3).unwrap();
    assert_eq!(trajs.len(), 10);
    assert!(trajs.iter().all(|t| t.len() == 20));
    assert_eq!(trajs, rollout(&env, 10, 20, 3).unwrap());
    assert_ne!(trajs, rollout(&env, 10, 20, 4).unwrap());

    let lgs = EnvConfig::LinearGaussian(LinearGaussian {
        name: "noiseless".into(),
        a: vec![vec![0.9]],
        b: vec![vec![1.0]],
        c: vec![vec![1.0]],
        process_noise: 0.0,
        observation_noise: 0.0,
        initial_mean: vec![1.0],
        initial_std: 0.0,
        action_low: -1.0,
        action_high: 1.0,
    });
    let t = &rollout_constant(&lgs, 1, 6, 0, Datum::Vector(vec![0.0])).unwrap()[0];
    for (k, s) in t.steps.iter().enumerate() {
        let expected = 0.9f64.powi(k as i32 + 1);
        match &s.observation {
            Datum::Vector(v) => assert!((v[0] - expected).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }
}

fn scalar_lgs() -> LinearGaussian {
    LinearGaussian {
        name: "scalar".into(),
        a: vec![vec![0.8]],
        b: vec![vec![0.5]],
        c: vec![vec![1.5]],
        process_noise: 0.3,
        observation_noise: 0.2,
        initial_mean: vec![0.4],
        initial_std: 0.7,
        action_low: -1.0,
        action_high: 1.0,
    }
}

#[test]
fn kalman_prediction_matches_joint_gaussian_conditioning() {
    let m = scalar_lgs();
    let (a, b, c) = (0.8, 0.5, 1.5);
    let (q, r) = (0.3f64.powi(2), 0.2f64.powi(2));
    let (m0, v0) = (0.4, 0.7f64.powi(2));
    let (a0, o0, a1) = (0.3, 1.1, -0.6);
    // s1 = a s0 + b a0 + w, o0 = c s1 + v, o1 = c (a s1 + b a1 + w') + v'
    let var_s1 = a * a * v0 + q;
    let mean_s1 = a * m0 + b * a0;
    let mean_o0 = c * mean_s1;
    let mean_o1 = c * (a * mean_s1 + b * a1);
    let cov_o1_o0 = c * a * var_s1 * c;
    let var_o0 = c * c * var_s1 + r;
    let direct = mean_o1 + cov_o1_o0 / var_o0 * (o0 - mean_o0);
    let kalman = m
        .lgs_conditional_mean(&[(Datum::Vector(vec![a0]), Datum::Vector(vec![o0]))], &[Datum::Vector(vec![a1])])
        .unwrap();
    assert!((kalman[0][0] - direct).abs() < 1e-10, "{} vs {direct}", kalman[0][0]);
}

#[test]
fn kalman_variance_reaches_the_riccati_fixed_point() {
    let m = scalar_lgs();
    let (a, c) = (0.8f64, 1.5f64);
    let (q, r) = (0.3f64.powi(2), 0.2f64.powi(2));
    // predicted variance P solves P = a² P r / (c² P + r) + q
    let (aa, bb, cc) = (c * c, r - a * a * r - q * c * c, -q * r);
    let predicted = (-bb + (bb * bb - 4.0 * aa * cc).sqrt()) / (2.0 * aa);
    let filtered = predicted * r / (c * c * predicted + r);
    let records: Vec<(Datum, Datum)> = (0..200)
        .map(|k| (Datum::Vector(vec![(k as f64 * 0.37).sin()]), Datum::Vector(vec![(k as f64 * 0.11).cos()])))
        .collect();
    let belief = m.kalman(&m.prior(), &records).unwrap();
    assert!((belief.cov[(0, 0)] - filtered).abs() < 1e-6, "{} vs {filtered}", belief.cov[(0, 0)]);
}
