//! The acceptance criteria, each run end to end against the environment
//! oracles. Every criterion returns a report line instead of panicking so
//! that `run-all` can print the whole table.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use kpsr::data::{featurize_windows, FeatureMaps, WindowSample};
use kpsr::env::{shipped, EnvConfig, TabularPomdp};
use kpsr::kernel::{Datum, FeatureVector, SpaceId};
use kpsr::linalg::{FeatureMatrix, SparseVec};
use kpsr::operators::{conditional_operator, kbr_conditional, project_simplex, total_variation, OperatorBundle};
use kpsr::link::{bellman_loss, eval_value, fit_links, LinkWeights};
use kpsr::safe_opt::{on_policy_windows, train, BlockSpace, HistoryBatch, ModelTables, Objective, PolicyParams, TrainConfig, TrainContext, ValueTables};
use kpsr::seed::stream_rng;
use kpsr::Result;

use crate::commands::{cmd_diagnose, cmd_evaluate, cmd_fit, cmd_generate, cmd_train, BUNDLE, CHECKPOINT, DIAGNOSTICS, EVALUATION, FIT_REPORT, TRAIN_LOG, TRAJECTORIES};
use crate::config::{DiagnoseConfig, Experiment, ExperimentConfig};
use crate::experiment::{
    block_dense, fit_on_windows, forward_tv_all, history_counts, lgs_forward_error, linear_specs, log_log_slope, one_hot_specs, safe_optimum, symbol, symbols, exact_policy_values,
    uniform_windows,
};

pub const HORIZON: usize = 53;
pub const RIDGE: f64 = 1e-3;
pub const CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub id: u32,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {:<28} {}  {} ({:.1}s)",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: u32, name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Report {
    let start = Instant::now();
    let (pass, detail) = match body() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Report {
        id,
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn tab3_maps(window: usize, history: usize) -> Result<FeatureMaps> {
    FeatureMaps::new(one_hot_specs(&shipped::tab3())?, window, history)
}

fn one_hot_dense(index: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}

pub fn criterion_1(seed: u64) -> Report {
    timed(1, "kbr-correctness", || {
        let env = shipped::tab3();
        let maps = tab3_maps(2, 1)?;
        let samples = uniform_windows(&env, 20_000, HORIZON, 2, 1, seed)?;
        let blocks = featurize_windows(&samples, &maps)?;
        let (x, y, z) = (&blocks.observation, &blocks.action, &blocks.history);
        let no = maps.observation.output_dim();
        let na = maps.action.output_dim();
        let nz = maps.history.output_dim();
        let col = |m: &FeatureMatrix, j: usize| m.column(j).0[0] as usize;
        let mut counts = vec![vec![vec![0usize; no]; na]; nz];
        for j in 0..x.ncols() {
            counts[col(z, j)][col(y, j)][col(x, j)] += 1;
        }
        let mut worst_kbr: f64 = 0.0;
        for zv in 0..nz {
            if counts[zv].iter().flatten().sum::<usize>() == 0 {
                continue;
            }
            let op = kbr_conditional(x, y, z, &FeatureVector::new(one_hot_dense(zv, nz), z.space().clone()), RIDGE)?;
            for yv in 0..na {
                let n: usize = counts[zv][yv].iter().sum();
                if n == 0 {
                    continue;
                }
                let freq: Vec<f64> = counts[zv][yv].iter().map(|&c| c as f64 / n as f64).collect();
                let column: Vec<f64> = (0..no).map(|o| op.matrix[(o, yv)]).collect();
                worst_kbr = worst_kbr.max(total_variation(&column, &freq));
            }
        }
        let cond = conditional_operator(x, y, RIDGE)?;
        let mut worst_cond: f64 = 0.0;
        for yv in 0..na {
            let cell: Vec<usize> = (0..no).map(|o| (0..nz).map(|zv| counts[zv][yv][o]).sum()).collect();
            let n: usize = cell.iter().sum();
            let freq: Vec<f64> = cell.iter().map(|&c| c as f64 / n as f64).collect();
            let column: Vec<f64> = (0..no).map(|o| cond.matrix[(o, yv)]).collect();
            worst_cond = worst_cond.max(total_variation(&column, &freq));
        }
        let mut constant = FeatureMatrix::new(1, SpaceId::new("constant"));
        for _ in 0..x.ncols() {
            constant.push(&SparseVec {
                indices: vec![0],
                values: vec![1.0],
            });
        }
        let degenerate = kbr_conditional(x, y, &constant, &FeatureVector::new(vec![1.0], SpaceId::new("constant")), RIDGE)?;
        let gap = (&degenerate.matrix - &cond.matrix).abs().max();
        let pass = worst_kbr <= 0.05 && worst_cond <= 0.05 && gap <= 1e-8;
        Ok((
            pass,
            format!("max_tv_kbr={worst_kbr:.2e} max_tv_cond={worst_cond:.2e} (<= 0.05) constant_z_gap={gap:.1e} (<= 1e-8)"),
        ))
    })
}

/// Per-pair total variation of the forward prediction against the exact
/// test distribution, for `pairs` random (history, action block) pairs.
pub fn forward_tv(bundle: &OperatorBundle, pomdp: &TabularPomdp, histories: &[Vec<(Datum, Datum)>], pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let maps = &bundle.maps;
    let blocks = maps.action_block.enumerate_inputs().expect("one-hot blocks");
    let mut rng = stream_rng(seed, &[11]);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let h = &histories[rng.gen_range(0..histories.len())];
        let a = &blocks[rng.gen_range(0..blocks.len())];
        let pred = bundle.forward_slice(&maps.history_dense(h)?) * nalgebra::DVector::from_vec(block_dense(&maps.action_block, a)?);
        let exact = pomdp.test_distribution(&pomdp.suffix_belief(h)?, &symbols(a))?;
        out.push(total_variation(&project_simplex(pred.as_slice()), &exact));
    }
    Ok(out)
}

pub fn criterion_2(seed: u64) -> Report {
    timed(2, "forward-fidelity", || {
        let env = shipped::tab3();
        let pomdp = env.tabular()?;
        let maps = tab3_maps(2, 1)?;
        let samples = uniform_windows(&env, 50_000, HORIZON, 2, 1, seed)?;
        let bundle = fit_on_windows(&samples, &maps, RIDGE, CAP, seed)?;
        let histories: Vec<_> = history_counts(&samples).into_values().map(|(h, _)| h).collect();
        let tv = forward_tv(&bundle, pomdp, &histories, 20, seed)?;
        let mean = tv.iter().sum::<f64>() / tv.len() as f64;
        let max = tv.iter().cloned().fold(0.0, f64::max);
        Ok((mean <= 0.05, format!("mean_tv={mean:.4} (<= 0.05) max_tv={max:.4} over 20 pairs")))
    })
}

/// `sqrt(Σ ‖𝒫_{o,a} F_h − F⁺_{h⁺}‖² / Σ ‖F⁺_{h⁺}‖²)` over the (history,
/// next pair) combinations of `eval`, weighted by their frequency, with
/// both sides applied to every shifted action block.
pub fn composition_gap(bundle: &OperatorBundle, eval: &[WindowSample]) -> Result<f64> {
    let maps = &bundle.maps;
    let mut groups: BTreeMap<(Vec<(u32, u32)>, (u32, u32)), (WindowSample, usize)> = BTreeMap::new();
    for s in eval {
        let key = (
            s.history.iter().map(|(a, o)| (symbol(a), symbol(o))).collect(),
            (symbol(&s.one_step.0), symbol(&s.one_step.1)),
        );
        groups.entry(key).or_insert((s.clone(), 0)).1 += 1;
    }
    let blocks = maps.action_block.enumerate_inputs().expect("one-hot blocks");
    let block_features: Vec<nalgebra::DVector<f64>> = blocks
        .iter()
        .map(|b| block_dense(&maps.action_block, b).map(nalgebra::DVector::from_vec))
        .collect::<Result<_>>()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (s, count) in groups.values() {
        let f = bundle.forward_slice(&maps.history_dense(&s.history)?);
        let f_next = bundle.shifted_forward_slice(&maps.history_dense(&s.next_history())?);
        let lift = bundle.shifted.lift_sparse(&bundle.pair_feature(&s.one_step.0, &s.one_step.1)?);
        for b in &block_features {
            let lhs = &lift * (&f * b);
            let rhs = &f_next * b;
            num += *count as f64 * (lhs - &rhs).norm_squared();
            den += *count as f64 * rhs.norm_squared();
        }
    }
    Ok((num / den).sqrt())
}

/// `max ‖𝒫v − v‖/‖v‖` for embeddings `v` of 20 random inputs under random pairs.
pub fn identity_gap(bundle: &OperatorBundle, histories: &[Vec<(Datum, Datum)>], seed: u64) -> Result<f64> {
    let maps = &bundle.maps;
    let blocks = maps.action_block.enumerate_inputs().expect("one-hot blocks");
    let na = maps.action.alphabet().expect("one-hot actions") as u32;
    let no = maps.observation.alphabet().expect("one-hot observations") as u32;
    let mut rng = stream_rng(seed, &[12]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let h = &histories[rng.gen_range(0..histories.len())];
        let a = &blocks[rng.gen_range(0..blocks.len())];
        let v = bundle.forward_slice(&maps.history_dense(h)?) * nalgebra::DVector::from_vec(block_dense(&maps.action_block, a)?);
        let pair = bundle.pair_feature(&Datum::Symbol(rng.gen_range(0..na)), &Datum::Symbol(rng.gen_range(0..no)))?;
        let pv = bundle.shifted.lift_sparse(&pair) * &v;
        worst = worst.max((pv - &v).norm() / v.norm());
    }
    Ok(worst)
}

pub fn criterion_3(seed: u64, windows: usize, iid_windows: usize) -> Report {
    timed(3, "shifted-consistency", || {
        let env = shipped::tab3();
        let maps = tab3_maps(2, 1)?;
        let samples = uniform_windows(&env, windows, HORIZON, 2, 1, seed)?;
        let bundle = fit_on_windows(&samples, &maps, RIDGE, CAP, seed)?;
        let eval = uniform_windows(&env, 5_000, HORIZON, 2, 1, seed ^ 0x5eed)?;
        let gap = composition_gap(&bundle, &eval)?;

        let iid = shipped::tab_iid();
        let iid_maps = FeatureMaps::new(one_hot_specs(&iid)?, 2, 1)?;
        let iid_samples = uniform_windows(&iid, iid_windows, HORIZON, 2, 1, seed)?;
        let iid_bundle = fit_on_windows(&iid_samples, &iid_maps, RIDGE, CAP, seed)?;
        let histories: Vec<_> = history_counts(&iid_samples).into_values().map(|(h, _)| h).collect();
        let id_gap = identity_gap(&iid_bundle, &histories, seed)?;
        Ok((
            gap <= 0.1 && id_gap <= 0.1,
            format!("tab3_relative_gap={gap:.4} (<= 0.1, K={windows}) iid_identity_gap={id_gap:.4} (<= 0.1, K={iid_windows})"),
        ))
    })
}

/// Relative Frobenius gap between the extended operator and
/// `Σ_{o|h,a} ⊗ (𝒫 ∘ Σ_{𝒪|𝒜,h})`, and the worst total variation between the
/// marginalized extended prediction and the one-step prediction.
pub fn factorization_gap(bundle: &OperatorBundle, histories: &[Vec<(Datum, Datum)>]) -> Result<(f64, f64)> {
    let maps = &bundle.maps;
    let blocks = maps.action_block.enumerate_inputs().expect("one-hot blocks");
    let actions = maps.action.enumerate_inputs().expect("one-hot actions");
    let no = maps.observation.output_dim();
    let d = maps.observation_block.output_dim();
    let (mut num, mut den, mut worst_tv) = (0.0, 0.0, 0.0f64);
    for h in histories {
        let hs = maps.history_sparse(h)?;
        let model = kpsr::link::HistoryModel::new(bundle, hs.clone());
        for a in &actions {
            let a_sparse = FeatureMaps::block_sparse(&maps.action, a)?;
            let p = model.one_step(&a_sparse.to_dense(maps.action.output_dim()));
            for b in &blocks {
                let b_sparse = FeatureMaps::block_sparse(&maps.action_block, b)?;
                let domain = hs.kron(&b_sparse, maps.action_block.output_dim()).kron(&a_sparse, maps.action.output_dim());
                let lhs = bundle.extended.predict_sparse(&domain);
                let mu = model.forward(&b_sparse.to_dense(maps.action_block.output_dim()));
                let mut rhs = vec![0.0; d * no];
                for o in 0..no {
                    let u = bundle.pair_feature(&a[0], &Datum::Symbol(o as u32))?;
                    let v = bundle.shifted.lift_sparse(&u) * &mu;
                    for j in 0..d {
                        rhs[j * no + o] = p[o] * v[j];
                    }
                }
                num += lhs.iter().zip(&rhs).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                den += lhs.iter().map(|x| x * x).sum::<f64>();
                let marginal: Vec<f64> = (0..no).map(|o| (0..d).map(|j| lhs[j * no + o]).sum()).collect();
                worst_tv = worst_tv.max(total_variation(&project_simplex(&marginal), &project_simplex(p.as_slice())));
            }
        }
    }
    Ok(((num / den).sqrt(), worst_tv))
}

pub fn criterion_4(seed: u64, windows: usize) -> Report {
    timed(4, "extended-factorization", || {
        let env = shipped::tab3();
        let maps = tab3_maps(2, 1)?;
        let samples = uniform_windows(&env, windows, HORIZON, 2, 1, seed)?;
        let bundle = fit_on_windows(&samples, &maps, RIDGE, CAP, seed)?;
        let histories: Vec<_> = history_counts(&samples).into_values().map(|(h, _)| h).collect();
        let (gap, tv) = factorization_gap(&bundle, &histories)?;
        Ok((
            gap <= 0.15,
            format!("relative_gap={gap:.4} (<= 0.15, K={windows}) marginal_tv={tv:.4}"),
        ))
    })
}

/// Mean forward-operator oracle error per sample size, averaged over seeds.
pub fn convergence_errors(sizes: &[usize], seeds: u64, base_seed: u64) -> Result<Vec<f64>> {
    let env = shipped::tab3();
    let pomdp = env.tabular()?;
    let maps = tab3_maps(2, 1)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &k in sizes {
        let mut acc = 0.0;
        for s in 0..seeds {
            let seed = kpsr::seed::derive_seed(base_seed, &[k as u64, s]);
            let samples = uniform_windows(&env, k, HORIZON, 2, 1, seed)?;
            let bundle = fit_on_windows(&samples, &maps, RIDGE, CAP, seed)?;
            let histories: Vec<_> = history_counts(&samples).into_values().map(|(h, _)| h).collect();
            acc += forward_tv_all(&bundle, pomdp, &histories)?;
        }
        out.push(acc / seeds as f64);
    }
    Ok(out)
}

pub fn criterion_5(seed: u64) -> Report {
    timed(5, "convergence-rate", || {
        let sizes = [2_000usize, 8_000, 32_000];
        let errors = convergence_errors(&sizes, 5, seed)?;
        let k: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
        let slope = log_log_slope(&k, &errors)?;
        let monotone = errors.windows(2).all(|w| w[1] <= w[0]);
        Ok((
            (-0.8..=-0.25).contains(&slope) && monotone,
            format!(
                "slope={slope:.3} in [-0.8, -0.25] errors={} non_increasing={monotone}",
                errors.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join("/")
            ),
        ))
    })
}

pub fn criterion_6(seed: u64) -> Report {
    timed(6, "continuous-oracle", || {
        let env = shipped::lgs1();
        let maps = FeatureMaps::new(linear_specs(&env)?, 2, 2)?;
        let train = uniform_windows(&env, 50_000, HORIZON, 2, 2, seed)?;
        let bundle = fit_on_windows(&train, &maps, RIDGE, CAP, seed)?;
        let err = lgs_forward_error(&bundle, &env, 5_000, HORIZON, seed ^ 0xe7a1)?;
        Ok((err <= 0.02, format!("relative_error={err:.4} (<= 0.02) vs Kalman mean")))
    })
}

/// Behavior data, fitted operators and start histories shared by the value
/// and training criteria.
pub struct Fixture {
    pub env: EnvConfig,
    pub bundle: OperatorBundle,
    pub behavior: Vec<WindowSample>,
    pub batch: HistoryBatch,
}

pub fn tab3_fixture(windows: usize, seed: u64) -> Result<Fixture> {
    fixture(shipped::tab3(), windows, 2, 1, seed)
}

pub fn fixture(env: EnvConfig, windows: usize, window: usize, history: usize, seed: u64) -> Result<Fixture> {
    let maps = FeatureMaps::new(one_hot_specs(&env)?, window, history)?;
    let behavior = uniform_windows(&env, windows, HORIZON, window, history, seed)?;
    let bundle = fit_on_windows(&behavior, &maps, RIDGE, CAP, seed)?;
    let batch = HistoryBatch::from_windows(&behavior, &maps)?;
    Ok(Fixture {
        env,
        bundle,
        behavior,
        batch,
    })
}

/// Policy that plays `choice[h]` at batch history `h` with probability
/// `1 − ε`, `ε ≈ e^{-30}` spread over the other blocks.
pub fn deterministic_policy(fx: &Fixture, choice: &[usize]) -> Result<PolicyParams> {
    let space = BlockSpace::new(&fx.env.descriptor().action, fx.bundle.maps.window + 1);
    let mut policy = PolicyParams::zeros(&fx.bundle, space, 1.0, true)?;
    let offset = 1 + fx.bundle.maps.observation_block.output_dim();
    for (h, &b) in fx.batch.features.iter().zip(choice) {
        for (&i, &v) in h.indices.iter().zip(&h.values) {
            policy.theta[(b, offset + i as usize)] += 30.0 * v;
        }
    }
    Ok(policy)
}

/// Model block values under `links`, per batch history.
pub fn model_block_values(fx: &Fixture, links: &LinkWeights, policy: &PolicyParams) -> Result<ValueTables> {
    Ok(ModelTables::new(&fx.bundle, &fx.batch, policy)?.values(links))
}

fn argbest(row: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if better(v, row[best]) {
            best = i;
        }
    }
    best
}

/// Exact `(V, C)` of `policy` at every batch history, from the suffix belief.
pub fn oracle_values(fx: &Fixture, policy: &PolicyParams) -> Result<Vec<(f64, Vec<f64>)>> {
    exact_policy_values(fx.env.tabular()?, &fx.bundle, &fx.batch, policy)
}

/// On-policy links for one block per episode after `L` uniform steps, so the
/// start-history law matches the suffix-belief oracle.
pub fn on_policy_links(fx: &Fixture, policy: &PolicyParams, episodes: usize, seed: u64) -> Result<LinkWeights> {
    let windows = on_policy_windows(&fx.env, &fx.bundle, policy, episodes, 1, seed, 0)?;
    fit_links(&windows, &fx.bundle.maps, RIDGE)
}

pub fn criterion_7(seed: u64) -> Report {
    timed(7, "value-risk-links", || {
        let fx = tab3_fixture(50_000, seed)?;
        let behavior_links = fit_links(&fx.behavior, &fx.bundle.maps, RIDGE)?;
        let uniform = deterministic_policy(&fx, &vec![0; fx.batch.len()])?;
        let uniform = PolicyParams {
            theta: uniform.theta * 0.0,
            ..uniform
        };
        let table = model_block_values(&fx, &behavior_links, &uniform)?;
        let greedy: Vec<usize> = table.v.iter().map(|r| argbest(r, |a, b| a > b)).collect();
        let worst: Vec<usize> = table.v.iter().map(|r| argbest(r, |a, b| a < b)).collect();
        let policies = [
            ("uniform", uniform),
            ("greedy", deterministic_policy(&fx, &greedy)?),
            ("adversarial", deterministic_policy(&fx, &worst)?),
        ];
        let mut pass = true;
        let mut parts = vec![];
        for (i, (name, policy)) in policies.iter().enumerate() {
            let links = on_policy_links(&fx, policy, 60_000, kpsr::seed::derive_seed(seed, &[7, i as u64]))?;
            let exact = oracle_values(&fx, policy)?;
            let (mut dv_mean, mut dc_mean, mut dv_max, mut dc_max) = (0.0, 0.0, 0.0f64, 0.0f64);
            for (k, h) in fx.batch.histories.iter().enumerate() {
                let est = eval_value(&links, &fx.bundle, h, policy, 2_000, kpsr::seed::derive_seed(seed, &[70, k as u64]))?;
                let dv = (est.value - exact[k].0).abs();
                let dc = (est.risks[0] - exact[k].1[0]).abs();
                let w = fx.batch.weights[k];
                dv_mean += w * dv;
                dc_mean += w * dc;
                dv_max = dv_max.max(dv);
                dc_max = dc_max.max(dc);
            }
            pass &= dv_max <= 0.1 && dc_max <= 0.1;
            parts.push(format!("{name}: max|dV|={dv_max:.3} max|dC|={dc_max:.3} mean|dV|={dv_mean:.3} mean|dC|={dc_mean:.3}"));
        }
        Ok((pass, format!("{} (<= 0.1)", parts.join("; "))))
    })
}

pub fn criterion_8(seed: u64) -> Report {
    timed(8, "bellman-loss-decay", || {
        let fx = tab3_fixture(50_000, seed)?;
        let mut links = fit_links(&fx.behavior, &fx.bundle.maps, RIDGE)?;
        let table = model_block_values(&fx, &links, &deterministic_policy(&fx, &vec![0; fx.batch.len()])?)?;
        let greedy: Vec<usize> = table.v.iter().map(|r| argbest(r, |a, b| a > b)).collect();
        let policy = deterministic_policy(&fx, &greedy)?;
        let same = bellman_loss((&links, &policy), (&links, &policy), &fx.batch.histories, &fx.bundle, 500, seed)?;
        let mut buffer = fx.behavior.clone();
        let mut trace = vec![];
        let mut reached = None;
        for r in 1..=10u64 {
            buffer.extend(on_policy_windows(&fx.env, &fx.bundle, &policy, 5_000, 1, kpsr::seed::derive_seed(seed, &[8, r]), r * 5_000)?);
            let next = fit_links(&buffer, &fx.bundle.maps, RIDGE)?;
            let bl = bellman_loss((&next, &policy), (&links, &policy), &fx.batch.histories, &fx.bundle, 500, seed)?;
            trace.push(bl);
            if reached.is_none() && bl.abs() < 0.05 {
                reached = Some(r);
            }
            links = next;
        }
        let trace_s: Vec<String> = trace.iter().map(|v| format!("{v:.4}")).collect();
        Ok((
            reached.is_some() && same == 0.0,
            format!(
                "identical_bl={same:e} (== 0) below_0.05_at_refit={} trace={}",
                reached.map_or("never".to_string(), |r| r.to_string()),
                trace_s.join("/")
            ),
        ))
    })
}

pub fn tab3_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 300,
        mc_samples: 200,
        alpha0: 5.0,
        alpha_decay: false,
        beta0: 5.0,
        thresholds: vec![Some(shipped::TAB3_RISK_THRESHOLD)],
        sigma: 1.0,
        history_features: true,
        link_ridge: RIDGE,
        refit_every: 25,
        refit_episodes: 10_000,
        blocks_per_episode: 1,
        checkpoint_every: 0,
        feasibility_tolerance: 0.05,
        seed,
    }
}

pub fn criterion_9(seed: u64) -> Report {
    timed(9, "safe-training", || {
        let fx = tab3_fixture(50_000, seed)?;
        let pomdp = fx.env.tabular()?;
        let threshold = shipped::TAB3_RISK_THRESHOLD;
        let blocks = kpsr::env::tabular::enumerate_blocks(pomdp.actions(), 3);
        let mut exact_blocks = vec![];
        let mut feasible_pairs = 0;
        for h in &fx.batch.histories {
            let belief = pomdp.suffix_belief(h)?;
            let row: Vec<(f64, f64)> = blocks
                .iter()
                .map(|b| pomdp.exact_block_value(&belief, b).map(|(v, c)| (v, c[0])))
                .collect::<Result<_>>()?;
            feasible_pairs += row.iter().filter(|(_, c)| *c <= threshold).count();
            exact_blocks.push(row);
        }
        let fraction = feasible_pairs as f64 / (blocks.len() * fx.batch.len()) as f64;
        let config = tab3_train_config(seed);
        let ctx = TrainContext {
            env: &fx.env,
            bundle: &fx.bundle,
            batch: &fx.batch,
            behavior: &fx.behavior,
        };
        let state = train(&config, &ctx, None)?;
        let exact = oracle_values(&fx, &state.policy)?;
        let (mut worst, mut gap, mut gap_max, mut total) = (f64::NEG_INFINITY, 0.0, 0.0f64, 0.0);
        let mut oracle_flags = 0;
        let mut flag_mismatch = 0;
        for (h, row) in exact_blocks.iter().enumerate() {
            let v: Vec<f64> = row.iter().map(|r| r.0).collect();
            let c: Vec<f64> = row.iter().map(|r| r.1).collect();
            let opt = safe_optimum(&v, &c, threshold);
            if opt.is_none() {
                oracle_flags += 1;
            }
            if opt.is_none() != state.flagged[h] {
                flag_mismatch += 1;
            }
            let Some(opt) = opt else { continue };
            if state.flagged[h] {
                continue;
            }
            worst = worst.max(exact[h].1[0] - threshold);
            let w = fx.batch.weights[h];
            gap += w * (opt - exact[h].0);
            gap_max = gap_max.max(opt - exact[h].0);
            total += w;
        }
        gap /= total;
        let strict = TrainConfig {
            thresholds: vec![Some(0.5)],
            iterations: 5,
            ..config.clone()
        };
        let blocked = train(&strict, &ctx, None)?;
        let case1 = blocked.all_flagged() && blocked.k == 0;
        let pass = worst <= 0.05 && gap <= 0.1 && flag_mismatch == 0 && case1;
        Ok((
            pass,
            format!(
                "feasible_pairs={fraction:.3} max_slack={worst:.4} (<= 0.05) mean_gap={gap:.4} (<= 0.1) max_gap={gap_max:.4} flags={}/{} oracle={oracle_flags} all_flagged_at_0.5={case1} model_feasible={}",
                state.flagged.iter().filter(|f| **f).count(),
                fx.batch.len(),
                state.feasible()
            ),
        ))
    })
}

pub fn criterion_10(seed: u64) -> Report {
    timed(10, "gradient-check", || {
        let fx = fixture(shipped::echo(), 20_000, 1, 1, seed)?;
        let links = fit_links(&fx.behavior, &fx.bundle.maps, RIDGE)?;
        let space = BlockSpace::new(&fx.env.descriptor().action, 2);
        let mut policy = PolicyParams::zeros(&fx.bundle, space, 1.0, true)?;
        let mut rng = stream_rng(seed, &[10]);
        for v in policy.theta.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let tables = ModelTables::new(&fx.bundle, &fx.batch, &policy)?;
        let values = tables.values(&links);
        let thresholds = [0.4];
        let eta = [0.5];
        let excluded = vec![false; fx.batch.len()];
        let objective = Objective {
            tables: &tables,
            values: &values,
            weights: &fx.batch.weights,
            excluded: &excluded,
            thresholds: &thresholds,
        };
        let grad = objective.gradient(&policy, &eta, 20_000, seed)?;
        let h = 1e-5;
        let mut fd = grad.clone() * 0.0;
        for idx in 0..fd.len() {
            let mut up = policy.clone();
            up.theta[idx] += h;
            let mut down = policy.clone();
            down.theta[idx] -= h;
            fd[idx] = (objective.evaluate(&up, &eta)?.j - objective.evaluate(&down, &eta)?.j) / (2.0 * h);
        }
        let cosine = grad.dot(&fd) / (grad.norm() * fd.norm());
        Ok((cosine >= 0.9, format!("cosine={cosine:.4} (>= 0.9) |fd|={:.4} |mc|={:.4}", fd.norm(), grad.norm())))
    })
}

fn same_bytes(a: &Path, b: &Path, name: &str) -> Result<bool> {
    Ok(std::fs::read(a.join(name))? == std::fs::read(b.join(name))?)
}

/// Small tab3 experiment used by the determinism criterion and the CLI tests.
pub fn tab3_experiment(dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("tab3.json"), serde_json::to_string_pretty(&shipped::tab3())?)?;
    let config = ExperimentConfig {
        name: "tab3-small".into(),
        env: "tab3.json".into(),
        window: 2,
        history: 1,
        features: None,
        ridge: Some(RIDGE),
        episodes: 300,
        horizon: HORIZON,
        held_out_fraction: 0.2,
        dimension_cap: CAP,
        mc_samples: 200,
        train: Some(TrainConfig {
            iterations: 40,
            refit_every: 10,
            refit_episodes: 2_000,
            ..tab3_train_config(seed)
        }),
        diagnose: DiagnoseConfig {
            sizes: vec![2_000, 4_000],
            replicates: 1,
            refits: 2,
            refit_episodes: 1_000,
        },
        seed,
        output_dir: "out".into(),
    };
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config)?)?;
    Ok(path)
}

pub fn criterion_11(seed: u64) -> Report {
    timed(11, "determinism", || {
        let root = std::env::temp_dir().join(format!("kpsr-determinism-{}-{seed}", std::process::id()));
        let config = tab3_experiment(&root, seed)?;
        let result = (|| -> Result<(bool, String)> {
            let a = Experiment::load(&config, None, Some(&root.join("a")))?;
            let b = Experiment::load(&config, None, Some(&root.join("b")))?;
            let other = Experiment::load(&config, Some(seed + 1), Some(&root.join("c")))?;
            let mut checks = vec![];
            let data_a = cmd_generate(&a)?;
            let data_b = cmd_generate(&b)?;
            cmd_generate(&other)?;
            checks.push(("generate", same_bytes(&a.out, &b.out, TRAJECTORIES)?));
            checks.push(("seed-sensitive", !same_bytes(&a.out, &other.out, TRAJECTORIES)?));
            let (bundle_a, _) = cmd_fit(&a, &data_a)?;
            let (bundle_b, _) = cmd_fit(&b, &data_b)?;
            checks.push(("fit", same_bytes(&a.out, &b.out, BUNDLE)? && same_bytes(&a.out, &b.out, FIT_REPORT)?));
            cmd_train(&a, &bundle_a, &data_a, false, None)?;
            let partial = cmd_train(&b, &bundle_b, &data_b, false, Some(15))?;
            let resumed = cmd_train(&b, &bundle_b, &data_b, true, None)?;
            checks.push(("interrupted", partial.k == 15 && resumed.k == 40));
            checks.push(("resume", same_bytes(&a.out, &b.out, CHECKPOINT)? && same_bytes(&a.out, &b.out, TRAIN_LOG)?));
            let ckpt_a = a.out.join(CHECKPOINT);
            let ckpt_b = b.out.join(CHECKPOINT);
            cmd_evaluate(&a, &bundle_a, &ckpt_a, &data_a)?;
            cmd_evaluate(&b, &bundle_b, &ckpt_b, &data_b)?;
            checks.push(("evaluate", same_bytes(&a.out, &b.out, EVALUATION)?));
            cmd_diagnose(&a, &bundle_a, &data_a)?;
            cmd_diagnose(&b, &bundle_b, &data_b)?;
            checks.push(("diagnose", same_bytes(&a.out, &b.out, DIAGNOSTICS)?));
            let pass = checks.iter().all(|(_, ok)| *ok);
            let detail = checks.iter().map(|(n, ok)| format!("{n}={}", if *ok { "ok" } else { "FAILED" })).collect::<Vec<_>>();
            Ok((pass, detail.join(" ")))
        })();
        let _ = std::fs::remove_dir_all(&root);
        result
    })
}

/// Every criterion at its pinned settings, in order. `each` sees each report
/// as soon as it is ready.
pub fn run_all(seed: u64, mut each: impl FnMut(&Report)) -> Vec<Report> {
    let runs: Vec<Box<dyn Fn() -> Report>> = vec![
        Box::new(move || criterion_1(seed)),
        Box::new(move || criterion_2(seed)),
        Box::new(move || criterion_3(seed, 200_000, 800_000)),
        Box::new(move || criterion_4(seed, 50_000)),
        Box::new(move || criterion_5(seed)),
        Box::new(move || criterion_6(seed)),
        Box::new(move || criterion_7(seed)),
        Box::new(move || criterion_8(seed)),
        Box::new(move || criterion_9(seed)),
        Box::new(move || criterion_10(seed)),
        Box::new(move || criterion_11(seed)),
    ];
    runs.iter()
        .map(|run| {
            let r = run();
            each(&r);
            r
        })
        .collect()
}
