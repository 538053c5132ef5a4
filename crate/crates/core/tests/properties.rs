use proptest::prelude::*;

use lagscope::autodiff::{Tape, Tensor};
use lagscope::discovery::{
    discover, lag_runs, score_edges, DiscoveryError, EdgeMatchConfig, Explainer, NodeExplanation, TruthEdge,
};
use lagscope::lbm::{extract_dependencies, learn_soft_mask, threshold_mask, Dependency, LbmConfig, LbmPreset};
use lagscope::mask::BinaryMask;
use lagscope::models::{Model, ModelConfig, ModelKind};
use lagscope::series::{lag_to_row, make_windows, row_to_lag, standardize, MultivariateSeries, SupervisedDataset};
use lagscope::synth::{ground_truth_mask, nonlinear_ground_truth, sample_linear_system, GroundTruthGraph};

fn series_strategy() -> impl Strategy<Value = MultivariateSeries> {
    (1usize..5, 3usize..40).prop_flat_map(|(n, len)| {
        prop::collection::vec(-100.0..100.0f64, n * len)
            .prop_map(move |values| MultivariateSeries::new(MultivariateSeries::default_names(n), values).unwrap())
    })
}

fn truth_strategy() -> impl Strategy<Value = Vec<TruthEdge>> {
    prop::collection::btree_set((0usize..4, 1usize..80), 0..10)
        .prop_map(|set| set.into_iter().map(|(source, lag)| TruthEdge { source, lag }).collect())
}

fn predicted_strategy() -> impl Strategy<Value = Vec<(usize, Vec<usize>)>> {
    prop::collection::btree_map(0usize..4, prop::collection::btree_set(1usize..80, 0..8), 0..4)
        .prop_map(|m| m.into_iter().map(|(s, lags)| (s, lags.into_iter().collect())).collect())
}

fn as_predicted(truth: &[TruthEdge]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for t in truth {
        match out.iter_mut().find(|(s, _)| *s == t.source) {
            Some((_, lags)) => lags.push(t.lag),
            None => out.push((t.source, vec![t.lag])),
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lag_and_row_are_inverse(window in 1usize..300, lag in 1usize..300) {
        match lag_to_row(lag, window) {
            Some(row) => prop_assert_eq!(row_to_lag(row, window), lag),
            None => prop_assert!(lag > window),
        }
    }

    #[test]
    fn windows_reproduce_the_series(s in series_strategy(), window in 1usize..6, stride in 1usize..4) {
        prop_assume!(window < s.len());
        let target = s.n_vars() - 1;
        let data = make_windows(&s, target, window, stride).unwrap();
        for sample in &data.samples {
            let t = sample.origin_t;
            prop_assert_eq!(sample.target, s.get(t, target));
            for lag in 1..=window {
                let row = lag_to_row(lag, window).unwrap();
                for v in 0..s.n_vars() {
                    prop_assert_eq!(sample.input.at(row, v), s.get(t - lag, v));
                }
            }
        }
        prop_assert_eq!(data.len(), (s.len() - window).div_ceil(stride));
    }

    #[test]
    fn standardizing_twice_changes_nothing(s in series_strategy()) {
        let (once, _) = standardize(&s).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convolution_is_causal(
        x in prop::collection::vec(-1.0..1.0f64, 2 * 24),
        w in prop::collection::vec(-1.0..1.0f64, 3 * 2 * 4),
        dilation in 1usize..6,
        cut in 0usize..24,
        bump in -5.0..5.0f64,
    ) {
        let conv = |input: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![2, 24], input).unwrap());
            let wv = tape.constant(Tensor::new(vec![3, 2, 4], w.clone()).unwrap());
            let out = tape.conv1d_dilated_causal(xv, wv, None, dilation).unwrap();
            tape.value(out).values().to_vec()
        };
        let base = conv(x.clone());
        let mut later = x.clone();
        for c in 0..2 {
            for s in cut..24 {
                later[c * 24 + s] += bump;
            }
        }
        let moved = conv(later);
        for o in 0..3 {
            for s in 0..cut {
                prop_assert_eq!(base[o * 24 + s], moved[o * 24 + s]);
            }
        }
    }

    #[test]
    fn scores_are_probabilities(predicted in predicted_strategy(), truth in truth_strategy(), w in 0usize..12) {
        let s = score_edges(&predicted, &truth, EdgeMatchConfig { tolerance: w });
        prop_assert!((0.0..=1.0).contains(&s.precision));
        prop_assert!((0.0..=1.0).contains(&s.recall));
        prop_assert_eq!(s.matched.len() + s.missed.len(), truth.len());
        prop_assert!(s.spurious.len() <= lag_runs(&predicted).len());
    }

    #[test]
    fn truth_matches_itself(truth in truth_strategy(), w in 0usize..12) {
        prop_assume!(!truth.is_empty());
        let s = score_edges(&as_predicted(&truth), &truth, EdgeMatchConfig { tolerance: w });
        prop_assert_eq!((s.precision, s.recall), (1.0, 1.0));
    }

    #[test]
    fn wider_tolerance_never_scores_lower(predicted in predicted_strategy(), truth in truth_strategy(), w in 0usize..10, extra in 0usize..10) {
        let narrow = score_edges(&predicted, &truth, EdgeMatchConfig { tolerance: w });
        let wide = score_edges(&predicted, &truth, EdgeMatchConfig { tolerance: w + extra });
        prop_assert!(wide.precision >= narrow.precision);
        prop_assert!(wide.recall >= narrow.recall);
    }

    #[test]
    fn extraction_inverts_the_truth_mask(seed in 0u64..5000, window in 1usize..260) {
        let graph = sample_linear_system(seed);
        for target in 0..graph.n_vars {
            let (mask, unreachable) = ground_truth_mask(&graph, target, window);
            for dep in extract_dependencies(&mask) {
                let mut lags: Vec<usize> = graph
                    .edges_into(target)
                    .filter(|e| e.source == dep.variable && e.lag <= window)
                    .map(|e| e.lag)
                    .collect();
                lags.sort_unstable();
                lags.dedup();
                prop_assert_eq!(dep.present, !lags.is_empty());
                prop_assert_eq!(dep.lags, lags);
            }
            prop_assert!(unreachable.iter().all(|e| e.lag > window));
        }
    }

    #[test]
    fn binary_mask_is_strict_threshold(values in prop::collection::vec(0.0..1.0f64, 12), t in 0.0..1.0f64) {
        let soft = Tensor::new(vec![6, 2], values.clone()).unwrap();
        let mask = threshold_mask(&soft, t);
        for (i, v) in values.iter().enumerate() {
            prop_assert_eq!(mask.get(i / 2, i % 2), *v > t);
        }
    }
}

/// A model whose output ignores its input: TCN with every weight zero.
fn constant_model(window: usize, n_vars: usize) -> Model {
    let mut model = Model::new(ModelConfig::new(ModelKind::Tcn, n_vars, window), 0).unwrap();
    for t in model.params_mut().tensors_mut() {
        t.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    model
}

fn noise_windows(window: usize, n_vars: usize) -> SupervisedDataset {
    let values: Vec<f64> = (0..200 * n_vars).map(|i| ((i * 7919) % 113) as f64 / 56.0 - 1.0).collect();
    let s = MultivariateSeries::new(MultivariateSeries::default_names(n_vars), values).unwrap();
    make_windows(&s, 0, window, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sparsity_weight_never_adds_cells(l1 in 0.0..0.5f64, factor in 1.0..50.0f64, seed in 0u64..1000) {
        let model = constant_model(8, 2);
        let data = noise_windows(8, 2);
        let above = |l1: f64| {
            let mut cfg = LbmConfig::preset(LbmPreset::Linear);
            cfg.lambda1 = l1;
            learn_soft_mask(&model, &data, &cfg, seed).unwrap().values().iter().filter(|&&v| v > 0.5).count()
        };
        let (light, heavy) = (above(l1), above(l1 * factor));
        prop_assert!(heavy <= light, "{heavy} > {light}");
    }
}

#[test]
fn overwhelming_sparsity_empties_the_mask() {
    let model = constant_model(8, 2);
    let data = noise_windows(8, 2);
    let mut cfg = LbmConfig::preset(LbmPreset::Linear);
    cfg.lambda1 = 1e3;
    cfg.steps = 200;
    let soft = learn_soft_mask(&model, &data, &cfg, 3).unwrap();
    assert!(soft.values().iter().all(|&v| v < 0.05), "{:?}", soft.values());
    assert_eq!(threshold_mask(&soft, 0.05).count(), 0);
}

/// Reports the ground-truth parents of every variable.
struct Oracle(GroundTruthGraph);

impl Explainer for Oracle {
    fn explain(&self, series: &MultivariateSeries, target: usize) -> Result<NodeExplanation, DiscoveryError> {
        let mut mask = BinaryMask::zeros(300, series.n_vars());
        for e in self.0.edges_into(target) {
            mask.set_lag(e.source, e.lag);
        }
        Ok(NodeExplanation {
            dependencies: extract_dependencies(&mask),
            train_mse: Some(0.0),
            test_mse: Some(0.0),
        })
    }
}

fn flat_series(n: usize) -> MultivariateSeries {
    MultivariateSeries::new(MultivariateSeries::default_names(n), vec![0.0; 4 * n]).unwrap()
}

#[test]
fn oracle_discovery_of_the_fifth_variable() {
    let oracle = Oracle(nonlinear_ground_truth());
    let series = flat_series(6);
    let one = discover(&series, 5, 1, &oracle).unwrap();
    let sources: Vec<usize> = one.graph.edges.iter().map(|e| e.src).collect();
    assert_eq!(sources, vec![0, 1, 2, 4, 5]);
    assert_eq!(one.explained, 1);
    let lags: Vec<&[usize]> = one.graph.edges.iter().map(|e| e.lags.as_slice()).collect();
    assert_eq!(lags, vec![&[10][..], &[20], &[110], &[120, 210], &[270]]);

    let two = discover(&series, 5, 2, &oracle).unwrap();
    // 0 and 1 have no parents; 2 and 4 do; 5 is not re-explained
    assert_eq!(two.explained, 5);
    let deep: Vec<(usize, usize)> = two.graph.edges.iter().filter(|e| e.depth == 2).map(|e| (e.src, e.dst)).collect();
    assert_eq!(deep, vec![(0, 2), (1, 2), (2, 4), (3, 4)]);
    assert_eq!(two.graph.modelled(), vec![0, 1, 2, 4, 5]);
}

struct Failing;

impl Explainer for Failing {
    fn explain(&self, _: &MultivariateSeries, target: usize) -> Result<NodeExplanation, DiscoveryError> {
        if target == 0 {
            let mut mask = BinaryMask::zeros(4, 2);
            mask.set_lag(1, 2);
            Ok(NodeExplanation {
                dependencies: extract_dependencies(&mask),
                train_mse: None,
                test_mse: None,
            })
        } else {
            Err(DiscoveryError::Config("boom".into()))
        }
    }
}

#[test]
fn failures_name_the_node() {
    let err = discover(&flat_series(2), 0, 2, &Failing).unwrap_err();
    assert!(matches!(err, DiscoveryError::Node { node: 1, .. }), "{err}");
    assert!(matches!(err.root(), DiscoveryError::Config(m) if m == "boom"));
}

#[test]
fn dependencies_cover_every_variable() {
    let mut mask = BinaryMask::zeros(10, 3);
    mask.set_lag(2, 4);
    mask.set_lag(2, 1);
    let deps = extract_dependencies(&mask);
    assert_eq!(
        deps,
        vec![
            Dependency { variable: 0, present: false, lags: vec![] },
            Dependency { variable: 1, present: false, lags: vec![] },
            Dependency { variable: 2, present: true, lags: vec![1, 4] },
        ]
    );
}
