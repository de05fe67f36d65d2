use std::collections::BTreeMap;

use nalgebra::DVector;

use kpsr::data::{featurize_windows, make_windows};
use kpsr::env::{rollout, shipped, EnvConfig, TabularPomdp};
use kpsr::kernel::FeatureMap;
use kpsr::operators::{fit_bundle, kbr_conditional, load_bundle, project_simplex, save_bundle, total_variation, BUNDLE_FORMAT_VERSION};
use kpsr::{Datum, Error, FeatureMaps, FeatureSpecs, FeatureVector, OperatorBundle, WindowSample};

fn windows(env: &EnvConfig, count: usize, w: usize, l: usize, seed: u64) -> Vec<WindowSample> {
    let horizon = 50;
    let per = horizon - w - l;
    let trajs = rollout(env, count.div_ceil(per), horizon, seed).unwrap();
    let mut out = make_windows(&trajs, w, l).unwrap();
    out.truncate(count);
    out
}

fn fitted(env: &EnvConfig, count: usize, w: usize, l: usize, ridge: f64, seed: u64) -> (OperatorBundle, Vec<WindowSample>) {
    let model = env.tabular().unwrap();
    let maps = FeatureMaps::new(FeatureSpecs::one_hot(model.actions(), model.observations()), w, l).unwrap();
    let samples = windows(env, count, w, l, seed);
    let blocks = featurize_windows(&samples, &maps).unwrap();
    (fit_bundle(&blocks, &maps, ridge, 4096, seed).unwrap(), samples)
}

fn sym(d: &Datum) -> u32 {
    d.symbol().unwrap()
}

fn dense(map: &FeatureMap, block: &[Datum]) -> DVector<f64> {
    DVector::from_vec(FeatureMaps::block_sparse(map, block).unwrap().to_dense(map.output_dim()))
}

fn one_hot(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn code(block: &[u32], alphabet: usize) -> usize {
    block.iter().fold(0, |c, &s| c * alphabet + s as usize)
}

fn distinct(samples: &[WindowSample]) -> Vec<Vec<(Datum, Datum)>> {
    let mut seen = BTreeMap::new();
    for s in samples {
        let key: Vec<(u32, u32)> = s.history.iter().map(|(a, o)| (sym(a), sym(o))).collect();
        seen.entry(key).or_insert_with(|| s.history.clone());
    }
    seen.into_values().collect()
}

fn blocks_of(alphabet: usize, len: usize) -> Vec<Vec<Datum>> {
    kpsr::env::tabular::enumerate_blocks(alphabet, len)
        .into_iter()
        .map(|b| b.into_iter().map(Datum::Symbol).collect())
        .collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn deterministic_env_predictions_are_exact_one_hots() {
    let env = shipped::echo();
    let model = env.tabular().unwrap();
    let (bundle, samples) = fitted(&env, 20_000, 2, 1, 1e-8, 1);
    let maps = &bundle.maps;
    let no = model.observations();
    for h in distinct(&samples) {
        let hv = maps.history_dense(&h).unwrap();
        let belief = model.suffix_belief(&h).unwrap();
        for b in blocks_of(2, 2) {
            let pred = bundle.forward_slice(&hv) * dense(&maps.action_block, &b);
            let exact = model.test_distribution(&belief, &b.iter().map(sym).collect::<Vec<_>>()).unwrap();
            assert!(exact.iter().all(|p| *p == 0.0 || *p == 1.0));
            assert!(max_abs(pred.as_slice(), &exact) < 1e-6);
        }
        for a in blocks_of(2, 1) {
            let pred = bundle.one_step_slice(&hv) * dense(&maps.action, &a);
            let exact = model.one_step_distribution(&belief, sym(&a[0])).unwrap();
            assert!(max_abs(pred.as_slice(), &exact) < 1e-6);
            for b in blocks_of(2, 2) {
                let domain: Vec<f64> = DVector::from_vec(hv.clone())
                    .kronecker(&dense(&maps.action_block, &b))
                    .kronecker(&dense(&maps.action, &a))
                    .iter()
                    .copied()
                    .collect();
                let pred = &bundle.extended.matrix * DVector::from_vec(domain);
                let mut actions = vec![sym(&a[0])];
                actions.extend(b.iter().map(sym));
                let joint = model.test_distribution(&belief, &actions).unwrap();
                // joint is indexed (o_t, shifted block); the codomain is (shifted block, o_t)
                let w_codes = no.pow(2);
                let mut reordered = vec![0.0; joint.len()];
                for (c, p) in joint.iter().enumerate() {
                    reordered[(c % w_codes) * no + c / w_codes] = *p;
                }
                assert!(max_abs(pred.as_slice(), &reordered) < 1e-6);
            }
        }
    }
}

#[test]
fn forward_prediction_matches_enumeration_oracle() {
    let env = shipped::tab3();
    let model = env.tabular().unwrap();
    let (bundle, samples) = fitted(&env, 200_000, 2, 2, 1e-3, 2);
    let maps = &bundle.maps;
    let (mut worst, mut mean): (f64, f64) = (0.0, 0.0);
    for k in 0..20 {
        let s = &samples[(k * 7919) % samples.len()];
        let (h, b) = (&s.history, &s.test_actions);
        let pred = bundle.forward_slice(&maps.history_dense(h).unwrap()) * dense(&maps.action_block, b);
        let exact = model
            .test_distribution(&model.suffix_belief(h).unwrap(), &b.iter().map(sym).collect::<Vec<_>>())
            .unwrap();
        let tv = total_variation(&project_simplex(pred.as_slice()), &exact);
        worst = worst.max(tv);
        mean += tv / 20.0;
        let mass: f64 = pred.iter().sum();
        assert!((mass - 1.0).abs() <= 0.05, "mass {mass}");
    }
    assert!(mean <= 0.05, "mean TV {mean}, worst {worst}");
}

#[test]
fn one_step_matches_frequency_counts() {
    let env = shipped::tab3();
    let (bundle, samples) = fitted(&env, 50_000, 2, 2, 1e-3, 3);
    let maps = &bundle.maps;
    let mut counts: BTreeMap<(Vec<u32>, u32), (Vec<(Datum, Datum)>, Vec<f64>)> = BTreeMap::new();
    for s in &samples {
        let key = (s.history.iter().flat_map(|(a, o)| [sym(a), sym(o)]).collect(), sym(&s.one_step.0));
        counts.entry(key).or_insert_with(|| (s.history.clone(), vec![0.0; 4])).1[sym(&s.one_step.1) as usize] += 1.0;
    }
    for ((_, a), (h, c)) in counts {
        let n: f64 = c.iter().sum();
        let freq: Vec<f64> = c.iter().map(|x| x / n).collect();
        let pred = bundle.one_step_slice(&maps.history_dense(&h).unwrap()) * DVector::from_vec(one_hot(2, a as usize));
        assert!(total_variation(&project_simplex(pred.as_slice()), &freq) <= 0.05);
    }
}

#[test]
fn iid_observations_give_marginal_predictions_and_identity_lift() {
    let env = shipped::tab_iid();
    let (bundle, samples) = fitted(&env, 400_000, 1, 1, 1e-3, 4);
    let maps = &bundle.maps;
    let mut marginal = vec![0.0; 4];
    for s in &samples {
        marginal[sym(&s.one_step.1) as usize] += 1.0 / samples.len() as f64;
    }
    let histories = distinct(&samples);
    for h in &histories {
        let hv = maps.history_dense(h).unwrap();
        for a in 0..2 {
            let pred = bundle.one_step_slice(&hv) * DVector::from_vec(one_hot(2, a));
            assert!(max_abs(pred.as_slice(), &marginal) <= 0.05);
        }
    }
    for k in 0..20 {
        let h = &histories[k % histories.len()];
        let (a, o) = (Datum::Symbol((k % 2) as u32), Datum::Symbol((k % 4) as u32));
        let v = bundle.forward_slice(&maps.history_dense(h).unwrap()) * DVector::from_vec(one_hot(2, (k / 2) % 2));
        let lifted = bundle.shifted.lift_sparse(&bundle.pair_feature(&a, &o).unwrap()) * &v;
        let r = (lifted - &v).norm() / v.norm();
        assert!(r <= 0.1, "lift gap {r}");
    }
}

#[test]
fn shifted_operator_follows_the_deterministic_cycle() {
    let env = shipped::tab_det();
    let model = env.tabular().unwrap();
    let (bundle, samples) = fitted(&env, 20_000, 2, 1, 1e-6, 5);
    let maps = &bundle.maps;
    let no = model.observations();
    for h in distinct(&samples) {
        let hv = maps.history_dense(&h).unwrap();
        let belief = model.suffix_belief(&h).unwrap();
        for a in 0..2u32 {
            let o = model.one_step_distribution(&belief, a).unwrap().iter().position(|p| *p > 0.5).unwrap() as u32;
            let next = model.filter(&belief, a, o).unwrap();
            let lift = bundle.shifted.lift_sparse(&bundle.pair_feature(&Datum::Symbol(a), &Datum::Symbol(o)).unwrap());
            for b in blocks_of(2, 2) {
                let mu = bundle.forward_slice(&hv) * dense(&maps.action_block, &b);
                let pred = &lift * mu;
                let target = model.test_distribution(&next, &b.iter().map(sym).collect::<Vec<_>>()).unwrap();
                assert_eq!(target.iter().filter(|p| **p == 1.0).count(), 1);
                let forced = one_hot(no * no, target.iter().position(|p| *p == 1.0).unwrap());
                assert!(max_abs(pred.as_slice(), &forced) <= 1e-3);
            }
        }
    }
}

#[test]
fn extended_operator_factorizes_and_marginalizes() {
    let env = shipped::tab3();
    let (bundle, samples) = fitted(&env, 50_000, 2, 1, 1e-3, 6);
    let maps = &bundle.maps;
    let (na, no) = (2, 4);
    let ob = no * no;
    let mut cells: BTreeMap<(Vec<u32>, usize, usize), f64> = BTreeMap::new();
    for s in &samples {
        let h = s.history.iter().flat_map(|(a, o)| [sym(a), sym(o)]).collect();
        let b = code(&s.shifted_actions.iter().map(sym).collect::<Vec<_>>(), na);
        *cells.entry((h, b, sym(&s.one_step.0) as usize)).or_default() += 1.0;
    }
    let (mut gap, mut norm, mut worst_tv) = (0.0, 0.0, 0.0f64);
    for h in distinct(&samples) {
        let key: Vec<u32> = h.iter().flat_map(|(a, o)| [sym(a), sym(o)]).collect();
        let hv = maps.history_dense(&h).unwrap();
        let ext = kpsr::operators::slice_by_history(&bundle.extended.matrix, &hv, maps.action_block.output_dim() * na);
        for a in 0..na {
            let one_step = bundle.one_step_slice(&hv) * DVector::from_vec(one_hot(na, a));
            let (mut marginal, mut total) = (vec![0.0; no], 0.0);
            for b in blocks_of(2, 2) {
                let bc = code(&b.iter().map(sym).collect::<Vec<_>>(), na);
                let mu = bundle.forward_slice(&hv) * dense(&maps.action_block, &b);
                let pred = ext.column(bc * na + a).clone_owned();
                let mut built = DVector::zeros(ob * no);
                for o in 0..no {
                    let pair = bundle.pair_feature(&Datum::Symbol(a as u32), &Datum::Symbol(o as u32)).unwrap();
                    let shifted = bundle.shifted.lift_sparse(&pair) * &mu;
                    for j in 0..ob {
                        built[j * no + o] = one_step[o] * shifted[j];
                    }
                }
                gap += (&pred - &built).norm_squared();
                norm += pred.norm_squared();
                let n = cells.get(&(key.clone(), bc, a)).copied().unwrap_or(0.0);
                for (o, m) in marginal.iter_mut().enumerate() {
                    *m += n * (0..ob).map(|j| pred[j * no + o]).sum::<f64>();
                }
                total += n;
            }
            let marginal: Vec<f64> = marginal.iter().map(|m| m / total).collect();
            worst_tv = worst_tv.max(total_variation(&marginal, one_step.as_slice()));
        }
    }
    let rel = (gap / norm).sqrt();
    assert!(worst_tv <= 0.05, "marginal TV {worst_tv}");
    assert!(rel <= 0.15, "relative factorization gap {rel}");
}

#[test]
fn held_out_loss_does_not_increase_when_samples_double() {
    let env = shipped::tab3();
    let model: &TabularPomdp = env.tabular().unwrap();
    let maps = FeatureMaps::new(FeatureSpecs::one_hot(model.actions(), model.observations()), 2, 2).unwrap();
    let test = featurize_windows(&windows(&env, 50_000, 2, 2, 99), &maps).unwrap();
    let domain = test.history.khatri_rao(&test.action_block).unwrap();
    let mean_loss = |k: usize| -> f64 {
        (0..5)
            .map(|seed| {
                let blocks = featurize_windows(&windows(&env, k, 2, 2, 100 + seed), &maps).unwrap();
                let op = kpsr::operators::fit_forward(&blocks, 1e-3, 4096).unwrap();
                let mut sse = 0.0;
                for j in 0..domain.ncols() {
                    let mut pred = op.predict_sparse(&domain.column_sparse(j));
                    let (ti, tv) = test.observation_block.column(j);
                    for (&i, &v) in ti.iter().zip(tv) {
                        pred[i as usize] -= v;
                    }
                    sse += pred.iter().map(|e| e * e).sum::<f64>();
                }
                sse / domain.ncols() as f64
            })
            .sum::<f64>()
            / 5.0
    };
    let losses: Vec<f64> = [5_000, 10_000, 20_000, 40_000].iter().map(|&k| mean_loss(k)).collect();
    for pair in losses.windows(2) {
        assert!(pair[1] <= pair[0], "losses {losses:?}");
    }
}

#[test]
fn zero_input_predicts_zero() {
    let env = shipped::tab3();
    let (bundle, _) = fitted(&env, 5_000, 2, 1, 1e-3, 7);
    let zero = FeatureVector::zeros(bundle.forward.domain_dim(), bundle.forward.domain.clone());
    assert!(bundle.forward.predict(&zero).unwrap().values.iter().all(|v| *v == 0.0));
}

#[test]
fn kbr_with_huge_ridge_vanishes() {
    let env = shipped::tab3();
    let maps = FeatureMaps::new(FeatureSpecs::one_hot(2, 4), 1, 1).unwrap();
    let blocks = featurize_windows(&windows(&env, 5_000, 1, 1, 8), &maps).unwrap();
    let z = blocks.action.column_vector(0);
    let op = kbr_conditional(&blocks.observation, &blocks.history, &blocks.action, &z, 1e12).unwrap();
    assert!(op.matrix.amax() < 1e-6);
}

#[test]
fn bundle_round_trip_and_version() {
    let env = shipped::tab3();
    let (bundle, _) = fitted(&env, 5_000, 2, 1, 1e-3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.json");
    save_bundle(&bundle, &path).unwrap();
    assert_eq!(load_bundle(&path).unwrap(), bundle);

    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(value["format_version"], BUNDLE_FORMAT_VERSION);
    assert_eq!(BUNDLE_FORMAT_VERSION, 1);

    value["forward"]["domain"] = serde_json::json!("history⊗unrelated");
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(load_bundle(&path), Err(Error::SpaceMismatch { .. })));

    value["format_version"] = serde_json::json!(2);
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(matches!(load_bundle(&path), Err(Error::Version { found: 2, .. })));
}
