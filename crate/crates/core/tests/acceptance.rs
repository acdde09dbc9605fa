//! End-to-end acceptance checks. Each test prints one `criterion N ... PASS|FAIL`
//! line on stderr (not captured by the harness) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use fedunlearn::aggregation::{coordinate_median, fedavg, trimmed_mean, WeightedUpdate};
use fedunlearn::archive_io::{load_archive, persist_archive};
use fedunlearn::cost::{cost_report, CostReport};
use fedunlearn::eval::{EvalPhase, EvalReport};
use fedunlearn::experiment::{evaluate, prepare, ExperimentConfig, Prepared};
use fedunlearn::fl::{run_federated_learning, FlConfig, FlOutcome};
use fedunlearn::model::{init_params, loss, loss_and_gradient, ModelSpec};
use fedunlearn::privacy::{clip_update, gaussian_noise_update, noise_sigma, PrivacyParams, PrivacyState};
use fedunlearn::selection::{flush_stage, Archive, ArchiveMeta, ClientUpdate, RoundEntry, StageBuffer};
use fedunlearn::theory::{
    convergence_bound, estimate_constants, random_quadratic, verify_bound_montecarlo, BoundInputs, DivergenceGrid,
    MonteCarloConfig, QuadraticProblem,
};
use fedunlearn::unlearn::{calibrate_update, run_unlearning, UnlearnOutcome};
use fedunlearn::data::Sample;
use fedunlearn::ParamVector;

fn report(n: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {name}: {verdict} ({detail}; {:.2}s)",
        elapsed.as_secs_f64()
    );
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

// ---------------------------------------------------------------------------
// shared scenarios

const CLASSIFICATION: &str = r#"
[data]
partition = { kind = "iid" }
partition_seed = 9

[data.source.synthetic]
num_classes = 3
dim = 10
per_class = 15000
separation = 4.0
seed = 7
test_fraction = 0.4

[model]
kind = "logistic"
init = "zeros"

[fl]
num_clients = 20
global_rounds = 40
local_epochs = 5
batch_size = 64
lr = 0.005
beta = 0.1
lambda = 0.6
gamma = 0.7
dp_enabled = false
master_seed = 1

[fl.privacy]
epsilon_min = 0.1
epsilon_max = 3.0
delta = 1e-5
clip_s = 1.0
"#;

const BACKDOOR_EXTRA: &str = r#"
[backdoor]
clients = [0, 1, 2, 3, 4]
seed = 100

[backdoor.trigger]
feature_indices = [7, 8, 9]
trigger_value = 1.0
target_label = 0
poison_fraction = 0.5

[unlearn]
targets = [0, 1, 2, 3, 4]
normalization = "strict"
"#;

fn classification_config(dp: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(CLASSIFICATION).unwrap();
    cfg.fl.dp_enabled = dp;
    cfg
}

fn backdoor_config() -> ExperimentConfig {
    let text = CLASSIFICATION.replace("dp_enabled = false", "dp_enabled = true");
    ExperimentConfig::from_toml_str(&format!("{text}{BACKDOOR_EXTRA}")).unwrap()
}

struct FlRun {
    prepared: Prepared,
    outcome: FlOutcome,
    metrics: Vec<u8>,
    accuracy: f64,
    elapsed: Duration,
}

fn fl_run(cfg: &ExperimentConfig) -> FlRun {
    let start = Instant::now();
    let prepared = prepare(cfg).unwrap();
    let init = prepared.initial_model(cfg).unwrap();
    let mut metrics = Vec::new();
    let outcome = run_federated_learning(&cfg.fl, &prepared.partitions, &init, Some(&mut metrics)).unwrap();
    let report = evaluate(cfg, &prepared, &outcome.final_model, &outcome.final_model, EvalPhase::PostFl).unwrap();
    FlRun { prepared, outcome, metrics, accuracy: report.test_accuracy, elapsed: start.elapsed() }
}

fn clean_run() -> &'static FlRun {
    static RUN: OnceLock<FlRun> = OnceLock::new();
    RUN.get_or_init(|| fl_run(&classification_config(false)))
}

struct BackdoorRun {
    fl: FlRun,
    post_fl: EvalReport,
    unlearned: UnlearnOutcome,
    post_unlearn: EvalReport,
    elapsed: Duration,
}

fn backdoor_scenario() -> BackdoorRun {
    let cfg = backdoor_config();
    let start = Instant::now();
    let mut fl = fl_run(&cfg);
    let model = &fl.outcome.final_model;
    let post_fl = evaluate(&cfg, &fl.prepared, model, model, EvalPhase::PostFl).unwrap();
    let request = cfg.unlearn_request().unwrap();
    let unlearned = run_unlearning(
        &fl.outcome.archive,
        &fl.prepared.spec,
        &fl.prepared.partitions,
        &request,
        &cfg.unlearn_config(),
        Some(&mut fl.metrics),
    )
    .unwrap();
    let post_unlearn = evaluate(&cfg, &fl.prepared, model, &unlearned.model, EvalPhase::PostUnlearn).unwrap();
    BackdoorRun { fl, post_fl, unlearned, post_unlearn, elapsed: start.elapsed() }
}

fn backdoor_run() -> &'static BackdoorRun {
    static RUN: OnceLock<BackdoorRun> = OnceLock::new();
    RUN.get_or_init(backdoor_scenario)
}

// ---------------------------------------------------------------------------
// 1

fn oracles() -> Value {
    serde_json::from_str(include_str!("fixtures/oracles.json")).unwrap()
}

fn num(v: &Value) -> f64 {
    match v {
        Value::String(s) => s.parse().unwrap(),
        other => other.as_f64().unwrap(),
    }
}

fn nums(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(num).collect()
}

#[test]
fn c01_closed_forms_match_high_precision_oracles() {
    let start = Instant::now();
    let o = oracles();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut count = 0;
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };

    for c in o["noise_sigma"].as_array().unwrap() {
        let got = noise_sigma(num(&c["epsilon"]), num(&c["delta"]), num(&c["clip_s"])).unwrap();
        note("noise_sigma", rel_err(got, num(&c["expected"])));
        count += 1;
    }
    for c in o["next_budget"].as_array().unwrap() {
        let mut state = PrivacyState {
            epsilon_t: num(&c["epsilon_t"]),
            epsilon_min: num(&c["epsilon_min"]),
            epsilon_max: num(&c["epsilon_max"]),
            delta: 1e-5,
            clip_s: 1.0,
            prev_loss: num(&c["prev_loss"]),
        };
        let got = state.next_budget(num(&c["current_loss"])).unwrap();
        note("next_budget", rel_err(got, num(&c["expected"])));
        count += 1;
    }
    for c in o["convergence_bound"].as_array().unwrap() {
        let inputs = BoundInputs {
            l: num(&c["l"]),
            mu: num(&c["mu"]),
            eta: num(&c["eta"]),
            t: c["t"].as_u64().unwrap(),
            clip_s: num(&c["clip_s"]),
            delta: num(&c["delta"]),
            eps_max: num(&c["eps_max"]),
            div_eps: num(&c["div_eps"]),
            num_clients: c["num_clients"].as_u64().unwrap() as usize,
            init_gap: num(&c["init_gap"]),
        };
        let got = convergence_bound(&inputs).unwrap();
        note("convergence_bound", rel_err(got.value, num(&c["expected"])));
        count += 1;
    }
    for c in o["calibrate_update"].as_array().unwrap() {
        let got = calibrate_update(&pv(nums(&c["historical"])), &pv(nums(&c["fresh"]))).unwrap();
        let want = nums(&c["expected"]);
        let diff: f64 = got.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        note("calibrate_update", if scale == 0.0 { diff } else { diff / scale });
        count += 1;
    }

    let elapsed = start.elapsed();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let pass = count == 400 && max <= 1e-12 && elapsed < Duration::from_secs(1);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    report(1, "closed forms vs oracles", pass, &format!("{count} points, max rel err: {detail}"), elapsed);
    assert_eq!(count, 400);
    assert!(max <= 1e-12, "max relative error {max:e}");
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
}

// ---------------------------------------------------------------------------
// 2

fn random_batch(rng: &mut ChaCha8Rng, dim: usize, classes: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect()
}

#[test]
fn c02_analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for pair in 0..20 {
        let dim = rng.random_range(2..8);
        let classes = rng.random_range(2..5);
        let spec = if pair % 2 == 0 {
            ModelSpec::logistic(dim, classes)
        } else {
            ModelSpec::mlp(dim, vec![rng.random_range(2..6)], classes)
        };
        let base = init_params(&spec, pair).unwrap();
        // move biases away from zero so every parameter matters
        let params: Vec<f64> = base.params.iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
        let model = base.with_params(pv(params.clone())).unwrap();
        let n = rng.random_range(1..9);
        let batch = random_batch(&mut rng, dim, classes, n);
        let (_, grad) = loss_and_gradient(&model, &batch).unwrap();

        let mut fd = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = loss(&model.with_params(pv(plus)).unwrap(), &batch).unwrap();
            let lm = loss(&model.with_params(pv(minus)).unwrap(), &batch).unwrap();
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = grad.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(5);
    report(2, "gradient check", pass, &format!("20 pairs, max rel err {worst:.2e}"), elapsed);
    assert!(worst <= 1e-6, "relative error {worst:e}");
    assert!(elapsed < Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// 3

#[test]
fn c03_gaussian_mechanism_statistics() {
    let start = Instant::now();
    let clip_s = 1.0;
    let sigma = noise_sigma(3.0, 1e-5, clip_s).unwrap();
    let g = clip_update(&pv(vec![3.0, -4.0, 0.0, 12.0]), clip_s).unwrap();
    let draws = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = g.len();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..draws {
        let noisy = gaussian_noise_update(&g, sigma, clip_s, &mut rng).unwrap();
        for (j, v) in noisy.iter().enumerate() {
            let dev = v - g[j];
            sum[j] += dev;
            sum_sq[j] += dev * dev;
        }
    }
    let n = draws as f64;
    let std_target = sigma * clip_s;
    let mean_tol = 4.0 * std_target / n.sqrt();
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
        worst_mean = worst_mean.max(mean.abs() / mean_tol);
        worst_std = worst_std.max((var.sqrt() - std_target).abs() / std_target);
    }
    let elapsed = start.elapsed();
    let pass = worst_mean <= 1.0 && worst_std <= 0.02 && elapsed < Duration::from_secs(5);
    report(
        3,
        "DP noise statistics",
        pass,
        &format!("mean offset {worst_mean:.2} of tolerance, std rel dev {worst_std:.4}"),
        elapsed,
    );
    assert!(worst_mean <= 1.0 && worst_std <= 0.02);
    assert!(elapsed < Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// 4, 5

fn vector_strategy() -> impl Strategy<Value = Vec<f64>> {
    (1usize..64, -6.0..6.0f64).prop_flat_map(|(d, log_scale)| {
        prop::collection::vec(-1.0..1.0f64, d).prop_map(move |v| v.into_iter().map(|x| x * 10f64.powf(log_scale)).collect())
    })
}

#[test]
fn c04_clipping_invariant() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 10_000, ..PropConfig::default() });
    let result = runner.run(&(vector_strategy(), 1e-3..1e3f64), |(v, s)| {
        let g = pv(v);
        let clipped = clip_update(&g, s).unwrap();
        prop_assert!(clipped.norm() <= s * (1.0 + 1e-12));
        if g.norm() <= s {
            let same = g.iter().zip(clipped.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
        Ok(())
    });
    report(4, "clipping invariant", result.is_ok(), "10000 random vectors", start.elapsed());
    result.unwrap();
}

#[test]
fn c05_budget_clamp_invariant() {
    let start = Instant::now();
    let losses = prop::collection::vec(prop_oneof![0.0..5.0f64, 0.0..1e3f64, Just(0.0)], 1..60);
    let bounds = (1e-3..2.0f64, 0.0..10.0f64, 0.0..1.0f64, 0.0..10.0f64);
    let mut runner = TestRunner::new(PropConfig { cases: 10_000, ..PropConfig::default() });
    let result = runner.run(&(losses, bounds), |(losses, (lo, width, init_frac, initial_loss))| {
        let hi = lo + width;
        let params = PrivacyParams {
            epsilon_min: lo,
            epsilon_max: hi,
            delta: 1e-5,
            clip_s: 1.0,
            epsilon_init: Some(lo + init_frac * width),
        };
        let mut state = PrivacyState::new(&params, initial_loss).unwrap();
        for l in losses {
            let eps = state.next_budget(l).unwrap();
            prop_assert!(eps >= lo && eps <= hi);
        }
        Ok(())
    });
    report(5, "budget clamp invariant", result.is_ok(), "10000 random loss sequences", start.elapsed());
    result.unwrap();
}

// ---------------------------------------------------------------------------
// 6

/// `max(1, round_half_up(num / den * n))` in integer arithmetic.
fn count_oracle(num: usize, den: usize, n: usize) -> usize {
    ((2 * num * n + den) / (2 * den)).max(1)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Flushes one synthetic stage and checks it against a sort-based oracle.
fn check_single_stage(lambda: (usize, usize), gamma: (usize, usize), clients: usize, rounds: usize, seed: u64) -> (usize, usize) {
    let dim = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = random_vec(&mut rng, dim);
    let mut buffer = StageBuffer::new(pv(anchor.clone()));
    let mut models = vec![anchor];
    let mut entries = Vec::new();
    for t in 1..=rounds {
        // drift plus noise, so successive models align to varying degrees
        let prev = models.last().unwrap().clone();
        let step = rng.random_range(0.05..3.0);
        let model: Vec<f64> = prev.iter().map(|p| p + step * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let updates: BTreeMap<usize, ClientUpdate> = (0..clients)
            .map(|c| (c, ClientUpdate { weight: rng.random_range(1.0..50.0), update: pv(random_vec(&mut rng, dim)) }))
            .collect();
        let weighted: Vec<WeightedUpdate> = updates.values().map(|u| WeightedUpdate::new(u.update.clone(), u.weight)).collect();
        let entry = RoundEntry { round: t as u64, model: pv(model.clone()), updates, aggregate: fedavg(&weighted).unwrap() };
        buffer.push(entry.clone()).unwrap();
        entries.push(entry);
        models.push(model);
    }

    let lam = lambda.0 as f64 / lambda.1 as f64;
    let gam = gamma.0 as f64 / gamma.1 as f64;
    let meta = ArchiveMeta { lambda: lam, gamma: gam, num_clients: clients, model_dim: dim };
    let mut archive = Archive::new(meta);
    flush_stage(&mut buffer, &mut archive, lam, gam).unwrap();

    let k_models = count_oracle(lambda.0, lambda.1, rounds);
    let k_updates = count_oracle(gamma.0, gamma.1, clients);
    let mut scored: Vec<(f64, usize)> = (1..=rounds).map(|t| (cosine(&models[t], &models[t - 1]).max(0.0), t)).collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut expected_rounds: Vec<u64> = scored[..k_models].iter().map(|&(_, t)| t as u64).collect();
    expected_rounds.sort_unstable();
    let got_rounds: Vec<u64> = archive.rounds.iter().map(|r| r.round).collect();
    assert_eq!(got_rounds, expected_rounds);

    for r in &archive.rounds {
        let entry = &entries[r.round as usize - 1];
        let mut by_align: Vec<(f64, usize)> = entry
            .updates
            .iter()
            .map(|(&c, u)| (cosine(u.update.as_slice(), entry.aggregate.as_slice()), c))
            .collect();
        by_align.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: BTreeSet<usize> = by_align[..k_updates].iter().map(|&(_, c)| c).collect();
        assert_eq!(r.client_set(), expected, "round {}", r.round);
    }
    (archive.len(), archive.total_updates())
}

fn single_stage_fl_counts(lambda: f64, gamma: f64, clients: usize, rounds: usize) -> (usize, Vec<usize>) {
    let mut cfg = classification_config(false);
    cfg.data.source = fedunlearn::experiment::DataSource::Synthetic {
        num_classes: 3,
        dim: 10,
        per_class: 20 * clients,
        separation: 4.0,
        seed: 3,
        test_fraction: 0.2,
    };
    cfg.fl = FlConfig {
        num_clients: clients,
        global_rounds: rounds,
        local_epochs: 1,
        lambda,
        gamma,
        // no flush can trigger before the final one
        beta: 0.999,
        dp_enabled: false,
        ..cfg.fl
    };
    let prepared = prepare(&cfg).unwrap();
    let out = run_federated_learning(&cfg.fl, &prepared.partitions, &prepared.initial_model(&cfg).unwrap(), None).unwrap();
    let flushes = out.records.iter().filter(|r| r.flushed).count();
    assert_eq!(flushes, 1, "expected a single stage");
    (out.archive.len(), out.archive.rounds.iter().map(|r| r.updates.len()).collect())
}

#[test]
fn c06_selection_counts() {
    let start = Instant::now();
    let cases = [((3, 5), (7, 10), 20, 40), ((1, 1), (1, 1), 5, 10), ((1, 2), (1, 2), 3, 7)];
    let mut details = Vec::new();
    for (i, &(lambda, gamma, clients, rounds)) in cases.iter().enumerate() {
        let k_models = count_oracle(lambda.0, lambda.1, rounds);
        let k_updates = count_oracle(gamma.0, gamma.1, clients);
        for seed in 0..5 {
            let (models, updates) = check_single_stage(lambda, gamma, clients, rounds, 60 + 10 * i as u64 + seed);
            assert_eq!(models, k_models);
            assert_eq!(updates, k_models * k_updates);
        }
        let lam = lambda.0 as f64 / lambda.1 as f64;
        let gam = gamma.0 as f64 / gamma.1 as f64;
        let (models, per_round) = single_stage_fl_counts(lam, gam, clients, rounds);
        assert_eq!(models, k_models);
        assert!(per_round.iter().all(|&u| u == k_updates));
        details.push(format!("({lam}, {gam}, {clients}, {rounds}) -> {k_models} models x {k_updates} updates"));
    }
    report(6, "selection counts", true, &details.join("; "), start.elapsed());
}

// ---------------------------------------------------------------------------
// 7

#[test]
fn c07_calibration_projection_identity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut norm_ok = true;
    for _ in 0..10_000 {
        let d = rng.random_range(1..32);
        let scale_h = 10f64.powf(rng.random_range(-3.0..3.0));
        let scale_f = 10f64.powf(rng.random_range(-3.0..3.0));
        let h: Vec<f64> = random_vec(&mut rng, d).into_iter().map(|x| x * scale_h).collect();
        let f: Vec<f64> = random_vec(&mut rng, d).into_iter().map(|x| x * scale_f).collect();
        let got = calibrate_update(&pv(h.clone()), &pv(f.clone())).unwrap();

        let hf: f64 = h.iter().zip(&f).map(|(a, b)| a * b).sum();
        let ff: f64 = f.iter().map(|b| b * b).sum();
        let want: Vec<f64> = f.iter().map(|b| hf / ff * b).collect();
        let diff: f64 = got.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(if scale == 0.0 { diff } else { diff / scale });
        let h_norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        norm_ok &= got.norm() <= h_norm * (1.0 + 1e-12);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && norm_ok;
    report(7, "calibration projection", pass, &format!("10000 pairs, max rel err {worst:.1e}"), elapsed);
    assert!(worst <= 1e-12, "relative error {worst:e}");
    assert!(norm_ok);
}

// ---------------------------------------------------------------------------
// 8

#[test]
fn c08_aggregation_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let n = rng.random_range(1..=9);
        let d = rng.random_range(1..=5);
        // small integer grids produce ties
        let ties = rng.random_bool(0.3);
        let vs: Vec<ParamVector> = (0..n)
            .map(|_| {
                pv((0..d)
                    .map(|_| if ties { rng.random_range(-2..=2) as f64 } else { rng.random_range(-10.0..10.0) })
                    .collect())
            })
            .collect();
        let refs: Vec<&ParamVector> = vs.iter().collect();

        let mut median = Vec::new();
        let mut trimmed = Vec::new();
        let trim = rng.random_range(0.0..0.5);
        let k = (trim * n as f64).floor() as usize;
        for j in 0..d {
            let mut col: Vec<f64> = vs.iter().map(|v| v[j]).collect();
            // insertion sort, independent of the library's sort
            for a in 1..col.len() {
                let mut b = a;
                while b > 0 && col[b - 1] > col[b] {
                    col.swap(b - 1, b);
                    b -= 1;
                }
            }
            median.push(col[(n - 1) / 2]);
            let kept = &col[k..n - k];
            trimmed.push(kept.iter().sum::<f64>() / kept.len() as f64);
        }
        assert_eq!(coordinate_median(&refs).unwrap().as_slice(), median.as_slice());
        if n > 2 * k {
            assert_eq!(trimmed_mean(&refs, trim).unwrap().as_slice(), trimmed.as_slice());
        }
    }
    report(8, "aggregation oracles", true, "1000 instances, exact", start.elapsed());
}

// ---------------------------------------------------------------------------
// 9, 10

#[test]
fn c09_federated_accuracy_without_dp() {
    let run = clean_run();
    let pass = run.accuracy >= 0.95 && run.elapsed < Duration::from_secs(60);
    report(9, "FL accuracy, no DP", pass, &format!("TA {:.4} (need >= 0.95)", run.accuracy), run.elapsed);
    assert!(run.accuracy >= 0.95, "accuracy {}", run.accuracy);
    assert!(run.elapsed < Duration::from_secs(60));
}

#[test]
fn c10_federated_accuracy_with_dp() {
    let clean = clean_run().accuracy;
    let run = fl_run(&classification_config(true));
    let need = clean - 0.15;
    let pass = run.accuracy >= need;
    report(10, "FL accuracy, DP", pass, &format!("TA {:.4} (need >= {need:.4})", run.accuracy), run.elapsed);
    assert!(run.accuracy >= need, "accuracy {} below {need}", run.accuracy);
}

// ---------------------------------------------------------------------------
// 11, 12

#[test]
fn c11_backdoor_removed_by_unlearning() {
    let run = backdoor_run();
    let before = run.post_fl.asr.unwrap();
    let after = run.post_unlearn.asr.unwrap();
    let pass = before >= 0.80 && after <= 0.10 && run.elapsed < Duration::from_secs(120);
    let detail = format!(
        "ASR {before:.4} -> {after:.4}, TA {:.4} -> {:.4}, {} client trainings",
        run.post_fl.test_accuracy, run.post_unlearn.test_accuracy, run.unlearned.client_training_rounds
    );
    report(11, "backdoor unlearning", pass, &detail, run.elapsed);
    assert!(before >= 0.80, "post-FL ASR {before}");
    assert!(after <= 0.10, "post-unlearn ASR {after}");
    assert!(run.elapsed < Duration::from_secs(120));
}

#[test]
fn c12_membership_inference_after_unlearning() {
    let run = backdoor_run();
    let before = run.post_fl.misr.unwrap();
    let after = run.post_unlearn.misr.unwrap();
    let pass = before >= 0.80 && after <= 0.55;
    report(12, "membership inference", pass, &format!("MISR {before:.4} -> {after:.4} (need >= 0.80 then <= 0.55)"), run.elapsed);
    assert!(after <= 0.55, "post-unlearn MISR {after}");
    assert!(before >= 0.80, "post-FL MISR {before}");
}

// ---------------------------------------------------------------------------
// 13

#[test]
fn c13_convergence_bound_holds() {
    let start = Instant::now();
    let problem = random_quadratic(4, 5, 0.5, 2.0, 1.0, 3.0, 13).unwrap();
    let constants = estimate_constants(&problem, &DivergenceGrid::default()).unwrap();
    let cfg = MonteCarloConfig { eta: 0.1, rounds: 50, eps_max: 3.0, trials: 200, ..MonteCarloConfig::default() };
    let mc = verify_bound_montecarlo(&problem, &constants, &cfg).unwrap();
    let contraction = mc.bound.contraction;

    // identical clients, no noise: plain gradient descent on one quadratic
    let single = random_quadratic(1, 5, 0.5, 2.0, 1.0, 3.0, 14).unwrap();
    let clones = QuadraticProblem::new(
        vec![single.hessians[0].clone(); 4],
        vec![single.centers[0].clone(); 4],
        DVector::from_element(5, 3.0),
    )
    .unwrap();
    let k = estimate_constants(&clones, &DivergenceGrid::default()).unwrap();
    let det_cfg = MonteCarloConfig { sigma_override: Some(0.0), clip: false, trials: 2, ..cfg };
    let det = verify_bound_montecarlo(&clones, &k, &det_cfg).unwrap();
    let decay = det.bound.contraction.powi(50) * k.init_gap;
    let degenerate_ok = k.div_eps == 0.0 && det.empirical_gap <= decay * (1.0 + 1e-9);

    let elapsed = start.elapsed();
    let pass = contraction > 0.0 && contraction < 1.0 && mc.holds && degenerate_ok && elapsed < Duration::from_secs(30);
    let detail = format!(
        "A {contraction:.4}, gap {:.4e} <= bound {:.4e}; degenerate gap {:.3e} <= A^T gap0 {:.3e}",
        mc.empirical_gap, mc.bound.value, det.empirical_gap, decay
    );
    report(13, "convergence bound", pass, &detail, elapsed);
    assert!(contraction > 0.0 && contraction < 1.0);
    assert!(mc.holds, "{mc}");
    assert!(degenerate_ok, "div_eps {}, gap {} vs {decay}", k.div_eps, det.empirical_gap);
    assert!(elapsed < Duration::from_secs(30));
}

// ---------------------------------------------------------------------------
// 14

#[test]
fn c14_cost_accounting() {
    let start = Instant::now();
    let run = clean_run();
    let fl = &classification_config(false).fl;
    let targets: BTreeSet<usize> = (0..5).collect();
    let r: CostReport = cost_report(&run.outcome.archive, &run.outcome.records, &targets);

    // stage lengths from the flush markers, then the per-stage closed forms
    let mut stages = Vec::new();
    let mut len = 0;
    for rec in &run.outcome.records {
        len += 1;
        if rec.flushed {
            stages.push(len);
            len = 0;
        }
    }
    assert_eq!(len, 0, "trailing rounds were not flushed");
    let x = run.outcome.final_model.params.len();
    let k_updates = count_oracle(7, 10, fl.num_clients);
    let models: usize = stages.iter().map(|&n| count_oracle(3, 5, n)).sum();
    let floats = models * (x + k_updates * x);
    let fl_rounds = fl.num_clients * fl.global_rounds;

    // survives a persist/load round trip
    let dir = tempfile::tempdir().unwrap();
    persist_archive(&run.outcome.archive, dir.path()).unwrap();
    let reloaded = cost_report(&load_archive(dir.path()).unwrap(), &run.outcome.records, &targets);

    let pass = r.client_training_rounds_unlearn < r.client_training_rounds_fl
        && r.stored_floats == floats
        && r.stored_models == models
        && r.client_training_rounds_fl == fl_rounds
        && reloaded == r;
    let detail = format!(
        "stages {stages:?}, floats {} (closed form {floats}), unlearn trainings {} < FL {}",
        r.stored_floats, r.client_training_rounds_unlearn, r.client_training_rounds_fl
    );
    report(14, "cost accounting", pass, &detail, start.elapsed());
    assert!(r.client_training_rounds_unlearn < r.client_training_rounds_fl);
    assert_eq!(r.stored_floats, floats);
    assert_eq!(r.stored_models, models);
    assert_eq!(r.client_training_rounds_fl, fl_rounds);
    assert_eq!(reloaded, r);
}

// ---------------------------------------------------------------------------
// 15

#[test]
fn c15_metrics_are_deterministic() {
    let start = Instant::now();
    let clean_again = fl_run(&classification_config(false));
    let backdoor_again = backdoor_scenario();
    let clean_same = clean_again.metrics == clean_run().metrics;
    let backdoor_same = backdoor_again.fl.metrics == backdoor_run().fl.metrics;
    let pass = clean_same && backdoor_same && !clean_again.metrics.is_empty();
    let detail = format!(
        "{} + {} metric bytes compared",
        clean_again.metrics.len(),
        backdoor_again.fl.metrics.len()
    );
    report(15, "determinism", pass, &detail, start.elapsed());
    assert!(clean_same, "clean scenario metrics differ");
    assert!(backdoor_same, "backdoor scenario metrics differ");
}
