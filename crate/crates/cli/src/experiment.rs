//! Shared data-generation and fitting steps used by the commands and the
//! acceptance suite.

use std::collections::BTreeMap;

use nalgebra::DVector;

use kpsr::data::{featurize_windows, make_windows, FeatureMaps, FeatureSpecs, WindowSample};
use kpsr::env::{rollout, EnvConfig, SpaceKind, TabularPomdp};
use kpsr::kernel::{Datum, FeatureMap};
use kpsr::env::tabular::DEFAULT_ENUMERATION_CAP;
use kpsr::operators::{fit_bundle, project_simplex, total_variation, OperatorBundle};
use kpsr::safe_opt::{HistoryBatch, PolicyParams};
use kpsr::{Error, KernelSpec, Result};

/// One-hot specs derived from a discrete environment.
pub fn one_hot_specs(env: &EnvConfig) -> Result<FeatureSpecs> {
    let d = env.descriptor();
    match (d.action, d.observation) {
        (SpaceKind::Discrete { size: na }, SpaceKind::Discrete { size: no }) => Ok(FeatureSpecs::one_hot(na, no)),
        _ => Err(Error::Config(format!("{} is not discrete; give feature specs explicitly", env.name()))),
    }
}

/// Affine linear features for a continuous environment, concatenated over
/// blocks and histories.
pub fn linear_specs(env: &EnvConfig) -> Result<FeatureSpecs> {
    let d = env.descriptor();
    match (d.action, d.observation) {
        (SpaceKind::Continuous { dim: da, .. }, SpaceKind::Continuous { dim: dobs, .. }) => Ok(FeatureSpecs {
            action: KernelSpec::Linear { input_dim: da, affine: true },
            observation: KernelSpec::Linear { input_dim: dobs, affine: true },
            history: KernelSpec::Linear {
                input_dim: da + dobs,
                affine: true,
            },
            block_composition: kpsr::kernel::Composition::Concat,
            history_composition: kpsr::kernel::Composition::Concat,
        }),
        _ => Err(Error::Config(format!("{} is not continuous", env.name()))),
    }
}

/// `windows` uniform-behavior window samples from episodes of `horizon`
/// steps, cut at exactly `windows` in episode order.
pub fn uniform_windows(env: &EnvConfig, windows: usize, horizon: usize, window: usize, history: usize, seed: u64) -> Result<Vec<WindowSample>> {
    let per = horizon
        .checked_sub(window + history)
        .filter(|p| *p > 0)
        .ok_or(Error::InvalidWindow { window, history })?;
    let episodes = windows.div_ceil(per);
    let trajs = rollout(env, episodes, horizon, seed)?;
    let mut out = make_windows(&trajs, window, history)?;
    out.truncate(windows);
    Ok(out)
}

pub fn fit_on_windows(samples: &[WindowSample], maps: &FeatureMaps, ridge: f64, cap: usize, seed: u64) -> Result<OperatorBundle> {
    let blocks = featurize_windows(samples, maps)?;
    fit_bundle(&blocks, maps, ridge, cap, seed)
}

pub fn symbol(d: &Datum) -> u32 {
    d.symbol().expect("tabular data is symbolic")
}

pub fn symbols(ds: &[Datum]) -> Vec<u32> {
    ds.iter().map(symbol).collect()
}

/// Distinct histories of `samples`, with counts, in a fixed order.
pub fn history_counts(samples: &[WindowSample]) -> BTreeMap<Vec<(u32, u32)>, (Vec<(Datum, Datum)>, usize)> {
    let mut out = BTreeMap::new();
    for s in samples {
        let key: Vec<(u32, u32)> = s.history.iter().map(|(a, o)| (symbol(a), symbol(o))).collect();
        out.entry(key).or_insert((s.history.clone(), 0)).1 += 1;
    }
    out
}

pub fn distinct_histories(samples: &[WindowSample]) -> Vec<Vec<(Datum, Datum)>> {
    history_counts(samples).into_values().map(|(h, _)| h).collect()
}

pub fn block_dense(map: &FeatureMap, block: &[Datum]) -> Result<Vec<f64>> {
    Ok(FeatureMaps::block_sparse(map, block)?.to_dense(map.output_dim()))
}

/// Mean total variation of the forward prediction against the exact test
/// distribution, over every given history and every action block.
pub fn forward_tv_all(bundle: &OperatorBundle, pomdp: &TabularPomdp, histories: &[Vec<(Datum, Datum)>]) -> Result<f64> {
    let maps = &bundle.maps;
    let blocks = maps
        .action_block
        .enumerate_inputs()
        .ok_or_else(|| Error::Unsupported("forward error needs enumerable action blocks".into()))?;
    if histories.is_empty() {
        return Err(Error::Empty("histories"));
    }
    let mut total = 0.0;
    for h in histories {
        let slice = bundle.forward_slice(&maps.history_dense(h)?);
        let belief = pomdp.suffix_belief(h)?;
        for a in &blocks {
            let pred = &slice * DVector::from_vec(block_dense(&maps.action_block, a)?);
            let exact = pomdp.test_distribution(&belief, &symbols(a))?;
            total += total_variation(&project_simplex(pred.as_slice()), &exact);
        }
    }
    Ok(total / (histories.len() * blocks.len()) as f64)
}

/// Relative error of an affine linear-feature forward prediction against the
/// Kalman conditional mean, over `eval` fresh windows.
pub fn lgs_forward_error(bundle: &OperatorBundle, env: &EnvConfig, eval: usize, horizon: usize, seed: u64) -> Result<f64> {
    let lgs = env.linear_gaussian()?;
    let maps = &bundle.maps;
    let (w, l) = (maps.window, maps.history_len);
    let per = horizon.checked_sub(w + l).filter(|p| *p > 0).ok_or(Error::InvalidWindow { window: w, history: l })?;
    let trajs = rollout(env, eval.div_ceil(per), horizon, seed)?;
    let (mut num, mut den) = (0.0, 0.0);
    let mut count = 0;
    'outer: for traj in &trajs {
        for t in l..traj.len() - w {
            if count == eval {
                break 'outer;
            }
            count += 1;
            let prefix: Vec<(Datum, Datum)> = traj.steps[..t].iter().map(|s| (s.action.clone(), s.observation.clone())).collect();
            let actions: Vec<Datum> = traj.steps[t..t + w].iter().map(|s| s.action.clone()).collect();
            let exact = lgs.lgs_conditional_mean(&prefix, &actions)?;
            let h = maps.history_dense(&traj.history(t, l))?;
            let pred = bundle.forward_slice(&h) * DVector::from_vec(block_dense(&maps.action_block, &actions)?);
            for (k, e) in exact.iter().enumerate() {
                for (i, v) in e.iter().enumerate() {
                    num += (pred[1 + k * e.len() + i] - v).powi(2);
                    den += v * v;
                }
            }
        }
    }
    Ok((num / den).sqrt())
}

/// Forward-operator oracle error of `bundle`: mean total variation over the
/// observed histories for tabular systems, relative mean error against the
/// Kalman filter for linear-Gaussian ones.
pub fn forward_oracle_error(bundle: &OperatorBundle, env: &EnvConfig, samples: &[WindowSample], horizon: usize, seed: u64) -> Result<f64> {
    match env {
        EnvConfig::Tabular(pomdp) => forward_tv_all(bundle, pomdp, &distinct_histories(samples)),
        EnvConfig::LinearGaussian(_) => lgs_forward_error(bundle, env, 5_000, horizon, seed),
    }
}

/// Best value over block mixtures meeting every threshold, from exact block
/// values. With one constrained channel two blocks suffice.
pub fn safe_optimum(values: &[f64], risks: &[f64], threshold: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..values.len() {
        for j in i..values.len() {
            let (vi, ci, vj, cj) = (values[i], risks[i], values[j], risks[j]);
            let candidates = if ci <= threshold && cj <= threshold {
                vec![vi.max(vj)]
            } else if ci <= threshold || cj <= threshold {
                let (vs, cs, vu, cu) = if ci <= threshold { (vi, ci, vj, cj) } else { (vj, cj, vi, ci) };
                let p = (threshold - cs) / (cu - cs);
                vec![vs, (1.0 - p) * vs + p * vu]
            } else {
                vec![]
            };
            for c in candidates {
                best = Some(best.map_or(c, |b: f64| b.max(c)));
            }
        }
    }
    best
}

/// Exact `(V, C)` of `policy` at every batch history, taking the state law
/// at a history to be the stationary law filtered by its suffix.
pub fn exact_policy_values(pomdp: &TabularPomdp, bundle: &OperatorBundle, batch: &HistoryBatch, policy: &PolicyParams) -> Result<Vec<(f64, Vec<f64>)>> {
    batch
        .histories
        .iter()
        .zip(&batch.features)
        .map(|(h, f)| {
            let probs = policy.block_probs(&policy.features(bundle, f)?)?;
            pomdp.exact_value_risk(&pomdp.suffix_belief(h)?, &probs, policy.space.len(), DEFAULT_ENUMERATION_CAP)
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("slope needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::NonFinite("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_known_power_law() {
        let k = [2000.0, 8000.0, 32000.0, 128000.0];
        let e: Vec<f64> = k.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&k, &e).unwrap() + 0.5).abs() < 1e-6);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
    }
}
