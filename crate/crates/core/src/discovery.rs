//! Recursive dependency discovery and edge-level scoring against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lbm::{self, Dependency, ImportanceMask, LbmConfig, LbmError};
use crate::models::{self, Model, ModelConfig, ModelError, TrainConfig, TrainReport};
use crate::parallel;
use crate::series::{make_windows, split_train_test, standardize, MultivariateSeries, SeriesError};
use crate::synth::Edge;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("node {node} ({name}): {source}")]
    Node {
        node: usize,
        name: String,
        #[source]
        source: Box<DiscoveryError>,
    },
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lbm(#[from] LbmError),
    #[error("invalid discovery configuration: {0}")]
    Config(String),
}

impl DiscoveryError {
    /// The innermost error, past any node annotations.
    pub fn root(&self) -> &DiscoveryError {
        match self {
            DiscoveryError::Node { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Everything needed to explain one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    /// Architecture template; `n_vars` is taken from the series.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lbm: LbmConfig,
    pub train_fraction: f64,
    pub stride: usize,
    /// Z-score every column before windowing.
    pub standardize: bool,
    /// Seed of the model initialization and the mask initialization.
    pub seed: u64,
    /// 1 explains only the target, 2 also explains its discovered sources.
    pub max_depth: usize,
}

impl DiscoveryConfig {
    pub fn new(model: ModelConfig, lbm: LbmConfig) -> Self {
        Self {
            model,
            train: TrainConfig::default(),
            lbm,
            train_fraction: 0.8,
            stride: 1,
            standardize: true,
            seed: 0,
            max_depth: 2,
        }
    }
}

/// Result of explaining one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeExplanation {
    pub dependencies: Vec<Dependency>,
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
}

/// Produces the dependencies of one variable. The standard implementation
/// trains a regressor and learns a binary mask; tests substitute oracles.
pub trait Explainer: Sync {
    fn explain(&self, series: &MultivariateSeries, target: usize) -> Result<NodeExplanation, DiscoveryError>;
}

/// Trained regressor, its loss history and its importance mask.
#[derive(Debug, Clone)]
pub struct ExplainedModel {
    pub model: Model,
    pub report: TrainReport,
    pub mask: ImportanceMask,
}

/// Standardizes (unless disabled), windows, trains and explains `target`.
pub fn train_and_explain(
    series: &MultivariateSeries,
    target: usize,
    cfg: &DiscoveryConfig,
) -> Result<ExplainedModel, DiscoveryError> {
    let mut mc = cfg.model.clone();
    mc.n_vars = series.n_vars();
    let data = if cfg.standardize {
        make_windows(&standardize(series)?.0, target, mc.window, cfg.stride)?
    } else {
        make_windows(series, target, mc.window, cfg.stride)?
    };
    let (train, test) = split_train_test(&data, cfg.train_fraction)?;
    let mut model = Model::new(mc, cfg.seed)?;
    let report = models::train(&mut model, &train, Some(&test), &cfg.train)?;
    let mask = lbm::explain(&model, &test, &cfg.lbm, cfg.seed)?;
    Ok(ExplainedModel { model, report, mask })
}

/// The regressor + mask explainer.
#[derive(Debug, Clone)]
pub struct LbmExplainer {
    pub config: DiscoveryConfig,
}

impl Explainer for LbmExplainer {
    fn explain(&self, series: &MultivariateSeries, target: usize) -> Result<NodeExplanation, DiscoveryError> {
        let done = train_and_explain(series, target, &self.config)?;
        Ok(NodeExplanation {
            dependencies: lbm::extract_dependencies(&done.mask.binary),
            train_mse: done.report.final_train_mse(),
            test_mse: done.report.final_test_mse(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub name: String,
    /// `None` for variables that were not modelled.
    pub test_mse: Option<f64>,
    pub train_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub lags: Vec<usize>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalKnowledgeGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl TemporalKnowledgeGraph {
    /// Edges into `dst`, in source order.
    pub fn edges_into(&self, dst: usize) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(move |e| e.dst == dst)
    }

    /// Variables that received an explanation.
    pub fn modelled(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.test_mse.is_some() || n.train_mse.is_some()).map(|n| n.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DiscoveryError> {
        serde_json::from_str(text).map_err(|e| DiscoveryError::Config(e.to_string()))
    }
}

/// Outcome of [`discover`]: the graph plus how many explanations ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub graph: TemporalKnowledgeGraph,
    pub explained: usize,
}

fn annotate(series: &MultivariateSeries, node: usize) -> impl Fn(DiscoveryError) -> DiscoveryError + '_ {
    move |e| DiscoveryError::Node {
        node,
        name: series.names()[node].clone(),
        source: Box::new(e),
    }
}

fn edges_from(deps: &[Dependency], dst: usize, depth: usize) -> Vec<GraphEdge> {
    deps.iter()
        .filter(|d| d.present)
        .map(|d| GraphEdge {
            src: d.variable,
            dst,
            lags: d.lags.clone(),
            depth,
        })
        .collect()
}

/// Explains `target`, then (depth 2) every source found for it. A target that
/// drives itself is not explained twice; its depth-1 edges already cover it.
pub fn discover(
    series: &MultivariateSeries,
    target: usize,
    max_depth: usize,
    explainer: &dyn Explainer,
) -> Result<Discovery, DiscoveryError> {
    if target >= series.n_vars() {
        return Err(DiscoveryError::Config(format!("target {target} outside {} variables", series.n_vars())));
    }
    if !(1..=2).contains(&max_depth) {
        return Err(DiscoveryError::Config("depth must be 1 or 2".into()));
    }
    let mut metrics: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    let root = explainer.explain(series, target).map_err(annotate(series, target))?;
    metrics.insert(target, (root.train_mse, root.test_mse));
    let mut edges = edges_from(&root.dependencies, target, 1);
    let mut explained = 1;

    if max_depth == 2 {
        let sources: Vec<usize> = edges.iter().map(|e| e.src).filter(|&s| s != target).collect();
        let results = parallel::map(&sources, |&s| explainer.explain(series, s).map_err(annotate(series, s)));
        for (&s, result) in sources.iter().zip(results) {
            let node = result?;
            metrics.insert(s, (node.train_mse, node.test_mse));
            edges.extend(edges_from(&node.dependencies, s, 2));
            explained += 1;
        }
    }
    edges.sort_by(|a, b| (a.depth, a.dst, a.src, &a.lags).cmp(&(b.depth, b.dst, b.src, &b.lags)));
    let nodes = series
        .names()
        .iter()
        .enumerate()
        .map(|(id, name)| {
            let (train_mse, test_mse) = metrics.get(&id).copied().unwrap_or((None, None));
            GraphNode {
                id,
                name: name.clone(),
                test_mse,
                train_mse,
            }
        })
        .collect();
    Ok(Discovery {
        graph: TemporalKnowledgeGraph { nodes, edges },
        explained,
    })
}

/// Lag tolerance of edge matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeMatchConfig {
    pub tolerance: usize,
}

impl Default for EdgeMatchConfig {
    fn default() -> Self {
        Self { tolerance: 5 }
    }
}

/// One predicted unit: a maximal run of consecutive flagged lags on one variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRun {
    pub source: usize,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TruthEdge {
    pub source: usize,
    pub lag: usize,
}

impl From<&Edge> for TruthEdge {
    fn from(e: &Edge) -> Self {
        Self {
            source: e.source,
            lag: e.lag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub precision: f64,
    pub recall: f64,
    pub tolerance: usize,
    pub matched: Vec<TruthEdge>,
    pub missed: Vec<TruthEdge>,
    /// Predicted runs that match no truth edge.
    pub spurious: Vec<LagRun>,
}

impl EdgeScore {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score serializes")
    }
}

/// Splits each source's sorted lag set into maximal consecutive runs.
pub fn lag_runs(predicted: &[(usize, Vec<usize>)]) -> Vec<LagRun> {
    let mut runs = Vec::new();
    for (source, lags) in predicted {
        let mut lags = lags.clone();
        lags.sort_unstable();
        lags.dedup();
        let mut iter = lags.into_iter();
        let Some(mut first) = iter.next() else { continue };
        let mut last = first;
        for lag in iter {
            if lag == last + 1 {
                last = lag;
            } else {
                runs.push(LagRun { source: *source, first, last });
                first = lag;
                last = lag;
            }
        }
        runs.push(LagRun { source: *source, first, last });
    }
    runs
}

fn run_matches(run: &LagRun, truth: &TruthEdge, w: usize) -> bool {
    // some lag in [first, last] lies within [lag - w, lag + w]
    run.source == truth.source && run.first <= truth.lag + w && truth.lag <= run.last + w
}

/// Precision over predicted runs, recall over truth edges. With no
/// predictions both are 0; with no truth, recall is 0.
pub fn score_edges(predicted: &[(usize, Vec<usize>)], truth: &[TruthEdge], cfg: EdgeMatchConfig) -> EdgeScore {
    let w = cfg.tolerance;
    let runs = lag_runs(predicted);
    let (matched, missed): (Vec<TruthEdge>, Vec<TruthEdge>) =
        truth.iter().partition(|t| runs.iter().any(|r| run_matches(r, t, w)));
    let spurious: Vec<LagRun> = runs
        .iter()
        .filter(|r| !truth.iter().any(|t| run_matches(r, t, w)))
        .cloned()
        .collect();
    let precision = if runs.is_empty() {
        0.0
    } else {
        (runs.len() - spurious.len()) as f64 / runs.len() as f64
    };
    let recall = if truth.is_empty() {
        0.0
    } else {
        matched.len() as f64 / truth.len() as f64
    };
    EdgeScore {
        precision,
        recall,
        tolerance: w,
        matched,
        missed,
        spurious,
    }
}

/// Scores the depth-`depth` edges of `graph` into `target`.
pub fn score_graph(
    graph: &TemporalKnowledgeGraph,
    target: usize,
    depth: usize,
    truth: &[Edge],
    cfg: EdgeMatchConfig,
) -> EdgeScore {
    let predicted: Vec<(usize, Vec<usize>)> = graph
        .edges_into(target)
        .filter(|e| e.depth == depth)
        .map(|e| (e.src, e.lags.clone()))
        .collect();
    let truth: Vec<TruthEdge> = truth.iter().filter(|e| e.target == target).map(TruthEdge::from).collect();
    score_edges(&predicted, &truth, cfg)
}

/// `(source, lags)` pairs of the present dependencies.
pub fn predicted_lags(deps: &[Dependency]) -> Vec<(usize, Vec<usize>)> {
    deps.iter().filter(|d| d.present).map(|d| (d.variable, d.lags.clone())).collect()
}
