//! The `kpsr` subcommands. Each reads an [`Experiment`] and writes its
//! outputs under the experiment's output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use kpsr::data::{featurize_windows, load_trajectories, make_windows, save_trajectories, split_by_episode, DatasetSplit};
use kpsr::env::rollout;
use kpsr::link::{bellman_loss, eval_value, fit_links};
use kpsr::operators::{default_ridge, fit_bundle, load_bundle, save_bundle, OperatorBundle};
use kpsr::safe_opt::{
    init_state, load_checkpoint, log_header, log_line, on_policy_windows, save_checkpoint, train_until, BlockSpace, HistoryBatch, TrainContext,
};
use kpsr::seed::{derive_seed, purpose};
use kpsr::{Error, PolicyParams, Result, TrainState, WindowSample};

use crate::acceptance::{self, Report};
use crate::config::{Experiment, TOOL_VERSION};
use crate::experiment::{distinct_histories, exact_policy_values, fit_on_windows, forward_tv_all, log_log_slope, safe_optimum, uniform_windows};

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const BUNDLE: &str = "bundle.json";
pub const FIT_REPORT: &str = "fit_report.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVALUATION: &str = "evaluation.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const ACCEPTANCE: &str = "acceptance.csv";

/// Link ridge used outside training when the config has no train section.
const DEFAULT_LINK_RIDGE: f64 = 1e-3;

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Wall-clock times go to a sidecar so the outputs themselves stay
/// byte-reproducible.
fn sidecar(out: &Path, command: &str) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let text = serde_json::json!({ "command": command, "finished_unix": secs, "version": TOOL_VERSION });
    std::fs::write(out.join(format!("{command}.run.json")), serde_json::to_string_pretty(&text)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_generate(exp: &Experiment) -> Result<PathBuf> {
    prepare(&exp.out)?;
    let c = &exp.config;
    let trajs = rollout(&exp.env, c.episodes, c.horizon, derive_seed(c.seed, &[purpose::BEHAVIOR]))?;
    let path = exp.out.join(TRAJECTORIES);
    save_trajectories(&path, &trajs, exp.env.descriptor().risk_channels, &exp.stamp())?;
    sidecar(&exp.out, "generate")?;
    Ok(path)
}

/// Windows of `data`, split by episode.
pub fn load_split(exp: &Experiment, data: &Path) -> Result<DatasetSplit> {
    let trajs = load_trajectories(data)?;
    let windows = make_windows(&trajs, exp.config.window, exp.config.history)?;
    split_by_episode(windows, exp.config.held_out_fraction, derive_seed(exp.config.seed, &[purpose::SPLIT]))
}

fn fit(exp: &Experiment, windows: &[WindowSample], seed: u64) -> Result<OperatorBundle> {
    let maps = exp.maps()?;
    let blocks = featurize_windows(windows, &maps)?;
    let ridge = match exp.config.ridge {
        Some(r) => r,
        None => default_ridge(&blocks.history.khatri_rao(&blocks.action_block)?),
    };
    let mut bundle = fit_bundle(&blocks, &maps, ridge, exp.config.dimension_cap, seed)?;
    bundle.meta.config_hash = exp.hash();
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub ridge: f64,
    pub train_windows: usize,
    pub held_out_windows: usize,
    /// Regularized empirical loss of each operator.
    pub losses: BTreeMap<String, f64>,
}

pub fn cmd_fit(exp: &Experiment, data: &Path) -> Result<(PathBuf, FitReport)> {
    prepare(&exp.out)?;
    let split = load_split(exp, data)?;
    if split.train.is_empty() {
        return Err(Error::Empty("no training windows in the data"));
    }
    let bundle = fit(exp, &split.train, exp.config.seed)?;
    let path = exp.out.join(BUNDLE);
    save_bundle(&bundle, &path)?;
    let report = FitReport {
        version: TOOL_VERSION.into(),
        config_hash: exp.hash(),
        seed: exp.config.seed,
        ridge: bundle.meta.ridge,
        train_windows: split.train.len(),
        held_out_windows: split.held_out.len(),
        losses: bundle.meta.losses.clone(),
    };
    write_json(&exp.out.join(FIT_REPORT), &report)?;
    sidecar(&exp.out, "fit")?;
    Ok((path, report))
}

fn load_checked_bundle(exp: &Experiment, path: &Path) -> Result<OperatorBundle> {
    let bundle = load_bundle(path)?;
    if bundle.maps != exp.maps()? {
        return Err(Error::Config(format!("{} was fit with different feature maps", path.display())));
    }
    Ok(bundle)
}

/// Behavior windows and the start-history batch: the batch comes from the
/// held-out episodes when there are any.
fn batch_of(exp: &Experiment, bundle: &OperatorBundle, data: &Path) -> Result<(Vec<WindowSample>, HistoryBatch)> {
    let split = load_split(exp, data)?;
    let batch = if split.held_out.is_empty() {
        HistoryBatch::from_windows(&split.train, &bundle.maps)?
    } else {
        HistoryBatch::from_windows(&split.held_out, &bundle.maps)?
    };
    Ok((split.train, batch))
}

/// Trains from `bundle`, or resumes from the checkpoint in the output
/// directory when `resume` is set. `stop_after` ends the run early at that
/// iteration, leaving a checkpoint to resume from.
pub fn cmd_train(exp: &Experiment, bundle: &Path, data: &Path, resume: bool, stop_after: Option<usize>) -> Result<TrainState> {
    prepare(&exp.out)?;
    let config = exp.train_config()?;
    let bundle = load_checked_bundle(exp, bundle)?;
    let (behavior, batch) = batch_of(exp, &bundle, data)?;
    let ctx = TrainContext {
        env: &exp.env,
        bundle: &bundle,
        batch: &batch,
        behavior: &behavior,
    };
    let checkpoint = exp.out.join(CHECKPOINT);
    let state = if resume && checkpoint.is_file() {
        let state = load_checkpoint(&checkpoint)?;
        if state.seed != config.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from config seed {}", state.seed, config.seed)));
        }
        if !state.config_hash.is_empty() && state.config_hash != exp.hash() {
            return Err(Error::Config(format!(
                "checkpoint was written under config {} but the current config hashes to {}",
                state.config_hash,
                exp.hash()
            )));
        }
        state
    } else {
        let mut state = init_state(config, &ctx)?;
        state.config_hash = exp.hash();
        state
    };
    let until = stop_after.map_or(config.iterations, |s| s.min(config.iterations));
    let state = train_until(config, &ctx, state, until, Some(&checkpoint))?;
    save_checkpoint(&state, &checkpoint)?;
    let mut log = String::new();
    for line in exp.stamp() {
        log.push_str(&format!("# {line}\n"));
    }
    log.push_str(&log_header(config.thresholds.len()));
    log.push('\n');
    for row in &state.log {
        log.push_str(&log_line(row));
        log.push('\n');
    }
    std::fs::write(exp.out.join(TRAIN_LOG), log)?;
    sidecar(&exp.out, "train")?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvaluation {
    pub history: String,
    pub weight: f64,
    pub value: f64,
    pub risks: Vec<f64>,
    pub exact_value: Option<f64>,
    pub exact_risks: Option<Vec<f64>>,
    /// Best value over block mixtures meeting the thresholds, when there is
    /// one constrained channel.
    pub safe_optimum: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iterations: usize,
    pub mc_samples: usize,
    pub histories: Vec<HistoryEvaluation>,
    pub value: f64,
    pub risks: Vec<f64>,
    pub exact_value: Option<f64>,
    pub exact_risks: Option<Vec<f64>>,
    /// `max_h C_i(h) − C̄_i` under the oracle, over unflagged histories.
    pub exact_worst_slack: Option<Vec<f64>>,
}

fn describe(history: &[(kpsr::Datum, kpsr::Datum)]) -> String {
    history.iter().map(|(a, o)| format!("({a},{o})")).collect::<Vec<_>>().join("")
}

pub fn cmd_evaluate(exp: &Experiment, bundle: &Path, checkpoint: &Path, data: &Path) -> Result<EvaluationReport> {
    prepare(&exp.out)?;
    let config = exp.train_config()?;
    let bundle = load_checked_bundle(exp, bundle)?;
    let state = load_checkpoint(checkpoint)?;
    let (_, batch) = batch_of(exp, &bundle, data)?;
    let thresholds = config.threshold_values();
    let pomdp = exp.env.tabular().ok();
    let exact = pomdp.map(|p| exact_policy_values(p, &bundle, &batch, &state.policy)).transpose()?;
    let channels = thresholds.len();
    let mut rows = Vec::with_capacity(batch.len());
    for (k, h) in batch.histories.iter().enumerate() {
        let est = eval_value(
            &state.links,
            &bundle,
            h,
            &state.policy,
            exp.config.mc_samples,
            derive_seed(exp.config.seed, &[purpose::EVAL, k as u64]),
        )?;
        let optimum = match (pomdp, channels) {
            (Some(p), 1) if thresholds[0].is_finite() => {
                let belief = p.suffix_belief(h)?;
                let blocks = kpsr::env::tabular::enumerate_blocks(p.actions(), state.policy.space.len());
                let (mut v, mut c) = (vec![], vec![]);
                for b in &blocks {
                    let (bv, bc) = p.exact_block_value(&belief, b)?;
                    v.push(bv);
                    c.push(bc[0]);
                }
                safe_optimum(&v, &c, thresholds[0])
            }
            _ => None,
        };
        rows.push(HistoryEvaluation {
            history: describe(h),
            weight: batch.weights[k],
            value: est.value,
            risks: est.risks,
            exact_value: exact.as_ref().map(|e| e[k].0),
            exact_risks: exact.as_ref().map(|e| e[k].1.clone()),
            safe_optimum: optimum,
            flagged: state.flagged.get(k).copied().unwrap_or(false),
        });
    }
    let active: Vec<&HistoryEvaluation> = rows.iter().filter(|r| !r.flagged).collect();
    let total: f64 = active.iter().map(|r| r.weight).sum();
    let mean = |f: &dyn Fn(&HistoryEvaluation) -> f64| active.iter().map(|r| r.weight * f(r)).sum::<f64>() / total;
    let value = mean(&|r| r.value);
    let risks = (0..channels).map(|i| mean(&|r| r.risks[i])).collect();
    let (exact_value, exact_risks, exact_worst_slack) = if exact.is_some() {
        let ev = mean(&|r| r.exact_value.unwrap_or(f64::NAN));
        let er = (0..channels).map(|i| mean(&|r| r.exact_risks.as_ref().map_or(f64::NAN, |c| c[i]))).collect();
        let slack = (0..channels)
            .map(|i| {
                active
                    .iter()
                    .filter_map(|r| r.exact_risks.as_ref().map(|c| c[i] - thresholds[i]))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        (Some(ev), Some(er), Some(slack))
    } else {
        (None, None, None)
    };
    let report = EvaluationReport {
        version: TOOL_VERSION.into(),
        config_hash: exp.hash(),
        seed: exp.config.seed,
        iterations: state.k,
        mc_samples: exp.config.mc_samples,
        histories: rows,
        value,
        risks,
        exact_value,
        exact_risks,
        exact_worst_slack,
    };
    write_json(&exp.out.join(EVALUATION), &report)?;
    sidecar(&exp.out, "evaluate")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGap {
    pub history: String,
    pub value: f64,
    pub exact_value: f64,
    pub risks: Vec<f64>,
    pub exact_risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub replicates: u64,
    /// Mean total variation of the forward prediction per sample size.
    pub operator_errors: Vec<f64>,
    pub slope: f64,
    /// Uniform policy, links fit on the data.
    pub value_gaps: Vec<ValueGap>,
    pub max_value_gap: f64,
    pub max_risk_gap: f64,
    /// `|BL|` between consecutive link refits under the uniform policy.
    pub bellman_trace: Vec<f64>,
    /// Oracle constraint check of the checkpoint in the output directory, if
    /// there is one.
    pub constraint_satisfied: Option<bool>,
}

pub fn cmd_diagnose(exp: &Experiment, bundle: &Path, data: &Path) -> Result<DiagnosticsReport> {
    prepare(&exp.out)?;
    let pomdp = exp.env.tabular()?;
    let c = &exp.config;
    let d = &c.diagnose;
    let maps = exp.maps()?;
    let mut errors = Vec::with_capacity(d.sizes.len());
    for &k in &d.sizes {
        let mut acc = 0.0;
        for r in 0..d.replicates {
            let seed = derive_seed(c.seed, &[purpose::BEHAVIOR, k as u64, r]);
            let samples = uniform_windows(&exp.env, k, c.horizon, c.window, c.history, seed)?;
            let fitted = match c.ridge {
                Some(ridge) => fit_on_windows(&samples, &maps, ridge, c.dimension_cap, seed)?,
                None => fit(exp, &samples, seed)?,
            };
            acc += forward_tv_all(&fitted, pomdp, &distinct_histories(&samples))?;
        }
        errors.push(acc / d.replicates as f64);
    }
    let sizes: Vec<f64> = d.sizes.iter().map(|&k| k as f64).collect();
    let slope = log_log_slope(&sizes, &errors)?;

    let bundle = load_checked_bundle(exp, bundle)?;
    let (behavior, batch) = batch_of(exp, &bundle, data)?;
    let link_ridge = c.train.as_ref().map_or(DEFAULT_LINK_RIDGE, |t| t.link_ridge);
    let space = BlockSpace::new(&exp.env.descriptor().action, c.window + 1);
    let uniform = PolicyParams::zeros(&bundle, space, 1.0, false)?;
    let mut links = fit_links(&behavior, &bundle.maps, link_ridge)?;
    let exact = exact_policy_values(pomdp, &bundle, &batch, &uniform)?;
    let mut gaps = Vec::with_capacity(batch.len());
    let (mut max_v, mut max_c) = (0.0f64, 0.0f64);
    for (k, h) in batch.histories.iter().enumerate() {
        let est = eval_value(&links, &bundle, h, &uniform, c.mc_samples, derive_seed(c.seed, &[purpose::EVAL, k as u64]))?;
        max_v = max_v.max((est.value - exact[k].0).abs());
        for (a, b) in est.risks.iter().zip(&exact[k].1) {
            max_c = max_c.max((a - b).abs());
        }
        gaps.push(ValueGap {
            history: describe(h),
            value: est.value,
            exact_value: exact[k].0,
            risks: est.risks,
            exact_risks: exact[k].1.clone(),
        });
    }

    let mut buffer = behavior.clone();
    let mut trace = Vec::with_capacity(d.refits);
    for r in 1..=d.refits as u64 {
        buffer.extend(on_policy_windows(
            &exp.env,
            &bundle,
            &uniform,
            d.refit_episodes,
            1,
            derive_seed(c.seed, &[purpose::LINKS, r]),
            r * d.refit_episodes as u64,
        )?);
        let next = fit_links(&buffer, &bundle.maps, link_ridge)?;
        trace.push(bellman_loss((&next, &uniform), (&links, &uniform), &batch.histories, &bundle, c.mc_samples, c.seed)?.abs());
        links = next;
    }

    let checkpoint = exp.out.join(CHECKPOINT);
    let constraint_satisfied = match (&c.train, checkpoint.is_file()) {
        (Some(t), true) => {
            let state = load_checkpoint(&checkpoint)?;
            let values = exact_policy_values(pomdp, &bundle, &batch, &state.policy)?;
            let thresholds = t.threshold_values();
            Some(values.iter().enumerate().filter(|(k, _)| !state.flagged.get(*k).copied().unwrap_or(false)).all(|(_, (_, risks))| {
                risks.iter().zip(&thresholds).all(|(r, th)| r - th <= t.feasibility_tolerance)
            }))
        }
        _ => None,
    };

    let report = DiagnosticsReport {
        version: TOOL_VERSION.into(),
        config_hash: exp.hash(),
        seed: c.seed,
        sizes: d.sizes.clone(),
        replicates: d.replicates,
        operator_errors: errors,
        slope,
        value_gaps: gaps,
        max_value_gap: max_v,
        max_risk_gap: max_c,
        bellman_trace: trace,
        constraint_satisfied,
    };
    write_json(&exp.out.join(DIAGNOSTICS), &report)?;
    sidecar(&exp.out, "diagnose")?;
    Ok(report)
}

/// Runs every acceptance criterion, printing each line as it finishes, and
/// writes the table to `acceptance.csv`.
pub fn run_all(out: &Path, seed: u64) -> Result<Vec<Report>> {
    prepare(out)?;
    let reports = acceptance::run_all(seed, |r| println!("{r}"));
    let mut text = format!("# kpsr {TOOL_VERSION}\n# seed {seed}\nid,name,pass,detail\n");
    for r in &reports {
        text.push_str(&format!("{},{},{},\"{}\"\n", r.id, r.name, u8::from(r.pass), r.detail.replace('"', "'")));
    }
    std::fs::write(out.join(ACCEPTANCE), text)?;
    sidecar(out, "run-all")?;
    Ok(reports)
}
