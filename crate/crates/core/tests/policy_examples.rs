use rand::Rng;

use kpsr::data::{featurize_windows, make_windows};
use kpsr::env::tabular::DEFAULT_ENUMERATION_CAP;
use kpsr::env::{rollout, shipped, EnvConfig, TabularPomdp};
use kpsr::kernel::Composition;
use kpsr::link::fit_links;
use kpsr::operators::fit_bundle;
use kpsr::safe_opt::{init_state, policy_sample, policy_step, train, train_until, BlockSpace, HistoryBatch, ModelTables, Objective, TrainContext};
use kpsr::seed::stream_rng;
use kpsr::{Datum, FeatureMaps, FeatureSpecs, KernelSpec, OperatorBundle, PolicyParams, TrainConfig, WindowSample};

struct Setup {
    env: EnvConfig,
    bundle: OperatorBundle,
    samples: Vec<WindowSample>,
    batch: HistoryBatch,
}

fn setup(env: EnvConfig, episodes: usize, w: usize, l: usize, seed: u64) -> Setup {
    setup_with_ridge(env, episodes, w, l, seed, 1e-3)
}

fn setup_with_ridge(env: EnvConfig, episodes: usize, w: usize, l: usize, seed: u64, ridge: f64) -> Setup {
    let m = env.tabular().unwrap();
    let maps = FeatureMaps::new(FeatureSpecs::one_hot(m.actions(), m.observations()), w, l).unwrap();
    let samples = make_windows(&rollout(&env, episodes, 40, seed).unwrap(), w, l).unwrap();
    let bundle = fit_bundle(&featurize_windows(&samples, &maps).unwrap(), &maps, ridge, 4096, seed).unwrap();
    let batch = HistoryBatch::from_windows(&samples, &maps).unwrap();
    Setup { env, bundle, samples, batch }
}

fn config(iterations: usize, threshold: Option<f64>) -> TrainConfig {
    TrainConfig {
        iterations,
        mc_samples: 100,
        alpha0: 5.0,
        alpha_decay: false,
        beta0: 5.0,
        thresholds: vec![threshold],
        sigma: 1.0,
        history_features: true,
        link_ridge: 1e-3,
        refit_every: 0,
        refit_episodes: 0,
        blocks_per_episode: 1,
        checkpoint_every: 0,
        feasibility_tolerance: 0.05,
        seed: 3,
    }
}

fn context(s: &Setup) -> TrainContext<'_> {
    TrainContext {
        env: &s.env,
        bundle: &s.bundle,
        batch: &s.batch,
        behavior: &s.samples,
    }
}

fn with(reward: Vec<f64>, risk: Vec<f64>) -> EnvConfig {
    let mut m = shipped::tab3_model();
    m.reward = reward;
    m.risks = vec![risk];
    EnvConfig::Tabular(m)
}

#[test]
fn zero_logits_sample_blocks_uniformly() {
    let s = setup(shipped::tab3(), 100, 2, 1, 1);
    let policy = PolicyParams::zeros(&s.bundle, BlockSpace::Discrete { alphabet: 2, len: 3 }, 1.0, false).unwrap();
    let h = s.bundle.maps.history.embed_one(&Datum::Symbol(5)).unwrap();
    let n = 10_000;
    let mut counts = [0usize; 8];
    for seed in 0..n as u64 {
        let block = policy_sample(&policy, &s.bundle, &h, seed).unwrap();
        let code = block.iter().fold(0, |c, d| c * 2 + d.symbol().unwrap() as usize);
        counts[code] += 1;
    }
    let p = 1.0 / 8.0;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - p).abs() <= 3.0 * sd, "{counts:?}");
    }
    assert_eq!(policy_sample(&policy, &s.bundle, &h, 77).unwrap(), policy_sample(&policy, &s.bundle, &h, 77).unwrap());
}

#[test]
fn vanishing_noise_samples_the_mean() {
    let env = shipped::lgs1();
    let specs = FeatureSpecs {
        action: KernelSpec::Linear { input_dim: 1, affine: true },
        observation: KernelSpec::Linear { input_dim: 1, affine: true },
        history: KernelSpec::Linear { input_dim: 2, affine: true },
        block_composition: Composition::Concat,
        history_composition: Composition::Concat,
    };
    let maps = FeatureMaps::new(specs, 2, 1).unwrap();
    let samples = make_windows(&rollout(&env, 50, 30, 1).unwrap(), 2, 1).unwrap();
    let bundle = fit_bundle(&featurize_windows(&samples, &maps).unwrap(), &maps, 1e-3, 4096, 1).unwrap();
    let space = BlockSpace::new(&env.descriptor().action, 3);
    let mut policy = PolicyParams::zeros(&bundle, space, 1e-300, false).unwrap();
    let mut rng = stream_rng(4, &[1]);
    for v in policy.theta.iter_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    let pair = vec![(Datum::Vector(vec![0.3]), Datum::Vector(vec![-0.2]))];
    let h = maps.history.embed_one(&maps.pair(&pair[0].0, &pair[0].1).unwrap()).unwrap();
    let mean = policy.mean(&policy.features(&bundle, &h.sparse()).unwrap());
    let block = policy_sample(&policy, &bundle, &h, 9).unwrap();
    let drawn: Vec<f64> = block.iter().flat_map(|d| d.as_slice().unwrap().to_vec()).collect();
    assert_eq!(drawn, mean);
}

#[test]
fn constant_rewards_are_a_fixed_point() {
    let mut m = shipped::echo().tabular().unwrap().clone();
    m.reward = vec![1.0; 2];
    m.risks = vec![vec![0.0; 2]];
    let s = setup_with_ridge(EnvConfig::Tabular(m), 300, 2, 1, 2, 1e-9);
    let cfg = TrainConfig {
        link_ridge: 1e-8,
        ..config(5, None)
    };
    let state = train(&cfg, &context(&s), None).unwrap();
    let start = init_state(&cfg, &context(&s)).unwrap();
    let moved = (&state.policy.theta - &start.policy.theta).norm();
    assert!(moved <= 1e-6, "{moved}");
}

#[test]
fn accepted_steps_never_decrease_the_objective() {
    let s = setup(shipped::tab3(), 300, 2, 1, 3);
    let links = fit_links(&s.samples, &s.bundle.maps, 1e-3).unwrap();
    let mut policy = PolicyParams::zeros(&s.bundle, BlockSpace::Discrete { alphabet: 2, len: 3 }, 1.0, true).unwrap();
    let tables = ModelTables::new(&s.bundle, &s.batch, &policy).unwrap();
    let values = tables.values(&links);
    let excluded = vec![false; s.batch.len()];
    let thresholds = [1.36];
    let objective = Objective {
        tables: &tables,
        values: &values,
        weights: &s.batch.weights,
        excluded: &excluded,
        thresholds: &thresholds,
    };
    for k in 0..30 {
        let out = policy_step(&policy, &objective, &[0.7], 50.0, 20, k).unwrap();
        if out.accepted {
            assert!(out.j_after >= out.j_before - 1e-9);
        } else {
            assert_eq!(out.policy, policy);
        }
        policy = out.policy;
    }
}

#[test]
fn duals_stay_nonnegative_and_slack_constraints_are_inert() {
    let s = setup(shipped::tab3(), 300, 2, 1, 4);
    let constrained = train(&config(20, Some(1.36)), &context(&s), None).unwrap();
    assert!(constrained.log.iter().all(|r| r.eta.iter().all(|e| *e >= 0.0)));

    let slack = train(&config(20, Some(100.0)), &context(&s), None).unwrap();
    let free = train(&config(20, None), &context(&s), None).unwrap();
    assert!(slack.log.iter().all(|r| r.eta[0] == 0.0));
    assert_eq!(slack.policy.theta, free.policy.theta);
    assert_eq!(slack.j_history(), free.j_history());
}

#[test]
fn score_gradient_is_unbiased() {
    let s = setup(shipped::echo(), 500, 1, 1, 5);
    let links = fit_links(&s.samples, &s.bundle.maps, 1e-3).unwrap();
    let mut policy = PolicyParams::zeros(&s.bundle, BlockSpace::Discrete { alphabet: 2, len: 2 }, 1.0, true).unwrap();
    let mut rng = stream_rng(5, &[2]);
    for v in policy.theta.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let tables = ModelTables::new(&s.bundle, &s.batch, &policy).unwrap();
    let values = tables.values(&links);
    let excluded = vec![false; s.batch.len()];
    let thresholds = [0.4];
    let eta = [0.5];
    let objective = Objective {
        tables: &tables,
        values: &values,
        weights: &s.batch.weights,
        excluded: &excluded,
        thresholds: &thresholds,
    };
    let h = 1e-5;
    let mut fd = policy.theta.clone() * 0.0;
    for idx in 0..fd.len() {
        let (mut up, mut down) = (policy.clone(), policy.clone());
        up.theta[idx] += h;
        down.theta[idx] -= h;
        fd[idx] = (objective.evaluate(&up, &eta).unwrap().j - objective.evaluate(&down, &eta).unwrap().j) / (2.0 * h);
    }
    let n = 50;
    let grads: Vec<_> = (0..n).map(|k| objective.gradient(&policy, &eta, 200, 1_000 + k).unwrap()).collect();
    let mean = grads.iter().fold(fd.clone() * 0.0, |acc, g| acc + g) / n as f64;
    // squared standard error of the mean, summed over components
    let se2: f64 = (0..fd.len())
        .map(|i| grads.iter().map(|g| (g[i] - mean[i]).powi(2)).sum::<f64>() / ((n - 1) * n) as f64)
        .sum();
    let dist = (&mean - &fd).norm();
    assert!(dist <= 2.0 * se2.sqrt(), "distance {dist}, combined SE {}", se2.sqrt());
}

#[test]
fn every_block_unsafe_flags_every_history() {
    let s = setup(with(vec![1.0, 0.2, 0.6], vec![1.0; 3]), 300, 2, 1, 6);
    let state = train(&config(10, Some(1.0)), &context(&s), None).unwrap();
    assert!(state.all_flagged());
    assert_eq!(state.k, 0);
}

fn exact_value(model: &TabularPomdp, s: &Setup, policy: &PolicyParams) -> f64 {
    s.batch
        .histories
        .iter()
        .zip(&s.batch.features)
        .zip(&s.batch.weights)
        .map(|((h, f), w)| {
            let probs = policy.block_probs(&policy.features(&s.bundle, f).unwrap()).unwrap();
            let belief = model.suffix_belief(h).unwrap();
            w * model.exact_value_risk(&belief, &probs, 2, DEFAULT_ENUMERATION_CAP).unwrap().0
        })
        .sum()
}

#[test]
fn unconstrained_training_reaches_the_best_block() {
    let s = setup(shipped::echo(), 500, 1, 1, 7);
    let model = s.env.tabular().unwrap().clone();
    let cfg = TrainConfig {
        iterations: 100,
        ..config(0, None)
    };
    let state = train(&cfg, &context(&s), None).unwrap();
    let best: f64 = s
        .batch
        .histories
        .iter()
        .zip(&s.batch.weights)
        .map(|(h, w)| {
            let belief = model.suffix_belief(h).unwrap();
            let v = kpsr::env::tabular::enumerate_blocks(2, 2)
                .iter()
                .map(|b| model.exact_block_value(&belief, b).unwrap().0)
                .fold(f64::NEG_INFINITY, f64::max);
            w * v
        })
        .sum();
    let v = exact_value(&model, &s, &state.policy);
    assert!(best - v <= 0.1, "V {v}, best {best}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let s = setup(shipped::tab3(), 300, 2, 1, 8);
    let cfg = TrainConfig {
        refit_every: 4,
        refit_episodes: 200,
        ..config(10, Some(1.36))
    };
    let full = train(&cfg, &context(&s), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let partial = train_until(&cfg, &context(&s), init_state(&cfg, &context(&s)).unwrap(), 5, None).unwrap();
    kpsr::safe_opt::save_checkpoint(&partial, &path).unwrap();
    let resumed = train_until(&cfg, &context(&s), kpsr::safe_opt::load_checkpoint(&path).unwrap(), 10, None).unwrap();
    assert_eq!(resumed, full);
}
