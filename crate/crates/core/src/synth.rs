//! Synthetic dependency systems with exact ground truth.
//!
//! Two families: randomly drawn sparse linear lag systems and a fixed
//! six-variable nonlinear system. All randomness flows from explicit seeds
//! through ChaCha8, so identical seeds give bit-identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::series::{MultivariateSeries, SeriesError};

/// Largest absolute coefficient drawn for random linear systems.
pub const LINEAR_ALPHA_BOUND: f64 = 0.4;
pub const LINEAR_MIN_VARS: usize = 5;
pub const LINEAR_MAX_VARS: usize = 15;
pub const LINEAR_MIN_LAG: usize = 1;
pub const LINEAR_MAX_LAG: usize = 250;
/// Any simulated magnitude above this rejects the draw.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Exclusive upper bound on any lag in a ground-truth graph.
pub const LAG_LIMIT: usize = 300;
/// Largest lag in the fixed nonlinear system.
pub const NONLINEAR_MAX_LAG: usize = 270;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("series length {len} must exceed the largest lag {max_lag}")]
    TooShort { len: usize, max_lag: usize },
    #[error("simulation diverged at t={t}, variable {var}")]
    Unstable { t: usize, var: usize },
    #[error("no stable system found after {attempts} draws")]
    Exhausted { attempts: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Linear,
    NonlinearFixed,
}

/// Directed lagged dependency `source --lag--> target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub source: usize,
    pub alpha: f64,
    pub lag: usize,
}

/// Generating dependency structure of a synthetic system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub n_vars: usize,
    pub edges: Vec<Edge>,
    /// Innovation scale per variable.
    pub noise_scale: Vec<f64>,
    pub kind: SystemKind,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GroundTruthGraph {
    /// Linear system from explicit edges. Coefficients are not bounded here;
    /// only randomly drawn systems obey [`LINEAR_ALPHA_BOUND`].
    pub fn linear(n_vars: usize, edges: Vec<Edge>, noise_scale: Vec<f64>) -> Result<Self, SynthError> {
        let g = Self {
            n_vars,
            edges,
            noise_scale,
            kind: SystemKind::Linear,
            seed: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_vars == 0 {
            return Err(SynthError::InvalidGraph("no variables".into()));
        }
        if self.noise_scale.len() != self.n_vars {
            return Err(SynthError::InvalidGraph(format!(
                "{} noise scales for {} variables",
                self.noise_scale.len(),
                self.n_vars
            )));
        }
        if let Some(b) = self.noise_scale.iter().find(|b| !(**b >= 0.0)) {
            return Err(SynthError::InvalidGraph(format!("negative noise scale {b}")));
        }
        for e in &self.edges {
            if e.target >= self.n_vars || e.source >= self.n_vars {
                return Err(SynthError::InvalidGraph(format!("edge {e:?} references a missing variable")));
            }
            if e.lag < 1 || e.lag >= LAG_LIMIT {
                return Err(SynthError::InvalidGraph(format!("lag {} outside [1, {LAG_LIMIT})", e.lag)));
            }
            if !e.alpha.is_finite() {
                return Err(SynthError::InvalidGraph(format!("non-finite coefficient in {e:?}")));
            }
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.edges.iter().map(|e| e.lag).max().unwrap_or(0)
    }

    pub fn edges_into(&self, target: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.target == target)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let g: Self = serde_json::from_str(text).map_err(|e| SynthError::InvalidGraph(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }
}

/// Draws a random sparse linear system.
///
/// `N ~ U{5..15}`; for each variable `n_i ~ U{0..N}` regressor indices are
/// drawn from `U{0..N-1}` and deduplicated keeping first draws; each kept
/// regressor gets `alpha ~ U[-0.4, 0.4]` and `lag ~ U{1..250}`.
pub fn sample_linear_system(seed: u64) -> GroundTruthGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(LINEAR_MIN_VARS..=LINEAR_MAX_VARS);
    let mut edges = Vec::new();
    for target in 0..n {
        let count = rng.gen_range(0..=n);
        let mut sources: Vec<usize> = Vec::with_capacity(count);
        for _ in 0..count {
            let j = rng.gen_range(0..n);
            if !sources.contains(&j) {
                sources.push(j);
            }
        }
        for source in sources {
            let alpha = rng.gen_range(-LINEAR_ALPHA_BOUND..=LINEAR_ALPHA_BOUND);
            let lag = rng.gen_range(LINEAR_MIN_LAG..=LINEAR_MAX_LAG);
            edges.push(Edge {
                target,
                source,
                alpha,
                lag,
            });
        }
    }
    GroundTruthGraph {
        n_vars: n,
        edges,
        noise_scale: vec![1.0; n],
        kind: SystemKind::Linear,
        seed: Some(seed),
    }
}

fn gaussian_noise(seed: u64) -> impl FnMut(usize, usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_, _| rng.sample(StandardNormal)
}

/// Simulates a linear graph with `N(0, 1)` innovations drawn from `seed`.
pub fn simulate_linear(graph: &GroundTruthGraph, len: usize, seed: u64) -> Result<MultivariateSeries, SynthError> {
    simulate_linear_with(graph, len, gaussian_noise(seed))
}

/// Simulates a linear graph with caller-supplied innovations `noise(t, var)`,
/// queried in `(t, var)` row-major order. Rows before the largest lag hold the
/// scaled innovation only; later rows follow
/// `x[t][i] = sum_j alpha_ij x[t - lag_ij][j] + noise_scale[i] * noise(t, i)`.
pub fn simulate_linear_with(
    graph: &GroundTruthGraph,
    len: usize,
    mut noise: impl FnMut(usize, usize) -> f64,
) -> Result<MultivariateSeries, SynthError> {
    if graph.kind != SystemKind::Linear {
        return Err(SynthError::InvalidGraph("simulate_linear needs a linear graph".into()));
    }
    graph.validate()?;
    let n = graph.n_vars;
    let max_lag = graph.max_lag();
    if len <= max_lag {
        return Err(SynthError::TooShort { len, max_lag });
    }
    let mut incoming: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); n];
    for e in &graph.edges {
        incoming[e.target].push((e.source, e.alpha, e.lag));
    }
    let mut x = vec![0.0; len * n];
    for t in 0..len {
        for i in 0..n {
            let mut v = graph.noise_scale[i] * noise(t, i);
            if t >= max_lag {
                for &(j, alpha, lag) in &incoming[i] {
                    v += alpha * x[(t - lag) * n + j];
                }
            }
            if !(v.abs() <= DIVERGENCE_LIMIT) {
                return Err(SynthError::Unstable { t, var: i });
            }
            x[t * n + i] = v;
        }
    }
    Ok(MultivariateSeries::new(MultivariateSeries::default_names(n), x)?)
}

/// Draws linear systems until one simulates without diverging. The first draw
/// uses `seed` itself; retries take seeds from a ChaCha8 stream keyed by `seed`.
pub fn generate_linear_case(
    seed: u64,
    len: usize,
    max_attempts: usize,
) -> Result<(GroundTruthGraph, MultivariateSeries), SynthError> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut graph_seed = seed;
    for _ in 0..max_attempts {
        let graph = sample_linear_system(graph_seed);
        let noise_seed = graph_seed.wrapping_add(1);
        match simulate_linear(&graph, len, noise_seed) {
            Ok(series) => return Ok((graph, series)),
            Err(SynthError::Unstable { .. } | SynthError::TooShort { .. }) => {
                graph_seed = seeds.gen();
            }
            Err(e) => return Err(e),
        }
    }
    Err(SynthError::Exhausted {
        attempts: max_attempts,
    })
}

/// Innovation scales of the fixed nonlinear system.
pub const NONLINEAR_NOISE: [f64; 6] = [1.0, 1.0, 1.0, 0.1, 0.1, 0.1];

/// Ground truth of the fixed nonlinear system as `(target, source, lag)`.
pub const NONLINEAR_EDGES: [(usize, usize, usize); 15] = [
    (2, 0, 10),
    (2, 1, 100),
    (2, 0, 70),
    (2, 1, 40),
    (3, 2, 150),
    (3, 1, 20),
    (3, 0, 100),
    (4, 3, 80),
    (4, 2, 40),
    (5, 0, 10),
    (5, 1, 20),
    (5, 2, 110),
    (5, 4, 120),
    (5, 4, 210),
    (5, 5, 270),
];

pub fn nonlinear_ground_truth() -> GroundTruthGraph {
    GroundTruthGraph {
        n_vars: 6,
        edges: NONLINEAR_EDGES
            .iter()
            .map(|&(target, source, lag)| Edge {
                target,
                source,
                alpha: 1.0,
                lag,
            })
            .collect(),
        noise_scale: NONLINEAR_NOISE.to_vec(),
        kind: SystemKind::NonlinearFixed,
        seed: None,
    }
}

/// First sample index at which each nonlinear equation uses its lagged terms.
pub const NONLINEAR_START: [usize; 6] = [0, 0, 100, 150, 80, 270];

/// Deterministic part of the nonlinear system for variable `var` at step `t`,
/// reading earlier values through `x(var, t)`.
pub fn nonlinear_signal(var: usize, t: usize, x: impl Fn(usize, usize) -> f64) -> f64 {
    let tf = t as f64;
    match var {
        0 => (0.5 * tf).sin() * (2.0 * tf).cos(),
        1 => (2.0 * tf).sin() + (0.5 * tf).cos(),
        2 => x(0, t - 10) * x(1, t - 100) + x(0, t - 70) * x(1, t - 40),
        3 => x(2, t - 150) * x(1, t - 20) - 5.0 * x(0, t - 100).sin(),
        4 => x(3, t - 80) / (20.0 + x(2, t - 40)),
        5 => x(0, t - 10) * x(1, t - 20) + x(2, t - 110) * x(4, t - 120) + x(4, t - 210) * x(5, t - 270),
        _ => unreachable!("the nonlinear system has six variables"),
    }
}

/// Simulates the six-variable nonlinear system with `N(0, 1)` innovations.
pub fn simulate_nonlinear(len: usize, seed: u64) -> Result<(MultivariateSeries, GroundTruthGraph), SynthError> {
    let mut g = nonlinear_ground_truth();
    g.seed = Some(seed);
    Ok((simulate_nonlinear_with(len, gaussian_noise(seed))?, g))
}

/// Nonlinear system with caller-supplied innovations `noise(t, var)`. Before
/// an equation's largest lag is available its variable holds the scaled
/// innovation only.
pub fn simulate_nonlinear_with(
    len: usize,
    mut noise: impl FnMut(usize, usize) -> f64,
) -> Result<MultivariateSeries, SynthError> {
    if len <= NONLINEAR_MAX_LAG {
        return Err(SynthError::TooShort {
            len,
            max_lag: NONLINEAR_MAX_LAG,
        });
    }
    const N: usize = 6;
    let mut x = vec![0.0; len * N];
    for t in 0..len {
        for var in 0..N {
            let eps = NONLINEAR_NOISE[var] * noise(t, var);
            let v = if t >= NONLINEAR_START[var] {
                nonlinear_signal(var, t, |j, s| x[s * N + j]) + eps
            } else {
                eps
            };
            if !(v.abs() <= DIVERGENCE_LIMIT) {
                return Err(SynthError::Unstable { t, var });
            }
            x[t * N + var] = v;
        }
    }
    Ok(MultivariateSeries::new(MultivariateSeries::default_names(N), x)?)
}

/// Window mask with one cell per edge into `target`, plus the edges whose lag
/// does not fit in the window.
pub fn ground_truth_mask(graph: &GroundTruthGraph, target: usize, window: usize) -> (BinaryMask, Vec<Edge>) {
    let mut mask = BinaryMask::zeros(window, graph.n_vars);
    let mut unreachable = Vec::new();
    for e in graph.edges_into(target) {
        if !mask.set_lag(e.source, e.lag) {
            unreachable.push(*e);
        }
    }
    (mask, unreachable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_draw_ranges() {
        for seed in 0..50 {
            let g = sample_linear_system(seed);
            assert!((LINEAR_MIN_VARS..=LINEAR_MAX_VARS).contains(&g.n_vars));
            for e in &g.edges {
                assert!(e.alpha.abs() <= LINEAR_ALPHA_BOUND);
                assert!((1..=250).contains(&e.lag));
            }
            for i in 0..g.n_vars {
                let mut sources: Vec<_> = g.edges_into(i).map(|e| e.source).collect();
                let before = sources.len();
                sources.sort_unstable();
                sources.dedup();
                assert_eq!(before, sources.len());
            }
        }
    }

    #[test]
    fn linear_draw_is_deterministic() {
        assert_eq!(sample_linear_system(9), sample_linear_system(9));
        assert_ne!(sample_linear_system(9).edges, sample_linear_system(10).edges);
    }

    #[test]
    fn forced_unit_driver() {
        let g = GroundTruthGraph::linear(
            2,
            vec![Edge {
                target: 0,
                source: 1,
                alpha: 0.4,
                lag: 5,
            }],
            vec![0.0, 1.0],
        )
        .unwrap();
        let s = simulate_linear_with(&g, 40, |_, _| 1.0).unwrap();
        for t in 0..40 {
            assert_eq!(s.get(t, 1), 1.0);
            assert_eq!(s.get(t, 0), if t >= 5 { 0.4 } else { 0.0 });
        }
    }

    #[test]
    fn linear_too_short() {
        let g = GroundTruthGraph::linear(
            1,
            vec![Edge {
                target: 0,
                source: 0,
                alpha: 0.1,
                lag: 20,
            }],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(simulate_linear(&g, 20, 0), Err(SynthError::TooShort { .. })));
    }

    #[test]
    fn divergent_system_is_rejected() {
        let g = GroundTruthGraph::linear(
            1,
            vec![Edge {
                target: 0,
                source: 0,
                alpha: 3.0,
                lag: 1,
            }],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(simulate_linear(&g, 1000, 1), Err(SynthError::Unstable { .. })));
    }

    #[test]
    fn nonlinear_noiseless_x2() {
        let s = simulate_nonlinear_with(400, |_, _| 0.0).unwrap();
        for t in 100..400 {
            let expected = s.get(t - 10, 0) * s.get(t - 100, 1) + s.get(t - 70, 0) * s.get(t - 40, 1);
            assert_eq!(s.get(t, 2), expected);
        }
    }

    #[test]
    fn nonlinear_truth_for_x4() {
        let g = nonlinear_ground_truth();
        let e: Vec<(usize, usize)> = g.edges_into(4).map(|e| (e.source, e.lag)).collect();
        assert_eq!(e, vec![(3, 80), (2, 40)]);
        assert!(simulate_nonlinear(270, 0).is_err());
    }

    #[test]
    fn truth_mask_cells() {
        let g = nonlinear_ground_truth();
        let (m, unreachable) = ground_truth_mask(&g, 0, 10);
        assert_eq!(m.count(), 0);
        assert!(unreachable.is_empty());

        let single = GroundTruthGraph::linear(
            3,
            vec![Edge {
                target: 0,
                source: 2,
                alpha: 0.3,
                lag: 5,
            }],
            vec![1.0; 3],
        )
        .unwrap();
        let (m, _) = ground_truth_mask(&single, 0, 10);
        assert_eq!(m.count(), 1);
        assert!(m.get(5, 2));

        let long = GroundTruthGraph {
            edges: vec![Edge {
                target: 0,
                source: 1,
                alpha: 0.1,
                lag: 300,
            }],
            ..single.clone()
        };
        let (m, unreachable) = ground_truth_mask(&long, 0, 300);
        assert!(m.get(0, 1));
        assert!(unreachable.is_empty());
        let (_, unreachable) = ground_truth_mask(&long, 0, 299);
        assert_eq!(unreachable.len(), 1);
    }

    #[test]
    fn graph_json_round_trip() {
        let g = sample_linear_system(4);
        let back = GroundTruthGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
        assert!(g.to_json().contains("\"kind\": \"linear\""));
        assert!(nonlinear_ground_truth().to_json().contains("nonlinear-fixed"));
    }
}
