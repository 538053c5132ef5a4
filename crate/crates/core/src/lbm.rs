//! Learned binary masks: which (variable, lag) cells of the input window a
//! frozen regressor needs to reproduce its target.
//!
//! A soft mask `sigmoid(logits)` is optimized with Adam, then binarized by a
//! threshold grid search. Dependencies are read off the binary mask.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, Tape, Tensor};
use crate::mask::BinaryMask;
use crate::models::{Model, ModelError};
use crate::parallel;
use crate::series::{SupervisedDataset, WindowedSample};

#[derive(Debug, Error)]
pub enum LbmError {
    #[error("no test windows to explain")]
    EmptyTestSet,
    #[error("test windows are {found:?} but the model expects [{window}, {n_vars}]")]
    WindowMismatch {
        found: [usize; 2],
        window: usize,
        n_vars: usize,
    },
    #[error("invalid mask configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("map value {value} at row {row}, column {col} is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<LbmError> for ModelError {
    fn from(e: LbmError) -> Self {
        match e {
            LbmError::Model(m) => m,
            other => ModelError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LbmPreset {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for LbmPreset {
    type Err = LbmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(LbmPreset::Linear),
            "nonlinear" => Ok(LbmPreset::Nonlinear),
            _ => Err(LbmError::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbmConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the sparsity term `sum |M|`.
    pub lambda1: f64,
    /// Weight of the cross-entropy pull towards the mask's own 0.5-binarization.
    pub lambda2: f64,
    /// Per-cell cost during threshold selection.
    pub lambda3: f64,
    /// Candidate thresholds, ascending, inside `(0, 1)`.
    pub grid: Vec<f64>,
    /// Test windows per optimization step; the whole set when larger.
    pub batch_size: usize,
    /// Independent initializations whose soft masks are averaged.
    pub restarts: usize,
}

impl LbmConfig {
    pub fn preset(preset: LbmPreset) -> Self {
        let (lambda1, lambda2, lambda3) = match preset {
            LbmPreset::Linear => (0.005, 0.5, 0.0001),
            LbmPreset::Nonlinear => (0.0005, 0.5, 0.00001),
        };
        Self {
            steps: 20,
            learning_rate: 0.1,
            lambda1,
            lambda2,
            lambda3,
            grid: default_grid(),
            batch_size: 512,
            restarts: 1,
        }
    }

    pub fn validate(&self) -> Result<(), LbmError> {
        let bad = |msg: &str| Err(LbmError::Config(msg.to_string()));
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.grid.is_empty() {
            return bad("threshold grid is empty");
        }
        if self.grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("threshold grid must be strictly ascending inside (0, 1)");
        }
        if self.batch_size == 0 || self.restarts == 0 {
            return bad("batch size and restarts must be positive");
        }
        Ok(())
    }
}

impl Default for LbmConfig {
    fn default() -> Self {
        Self::preset(LbmPreset::Linear)
    }
}

/// `0.05, 0.10, ..., 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| f64::from(i) / 20.0).collect()
}

/// Soft importance map with its selected binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMask {
    /// `[tau, N]`, entries in `(0, 1)`.
    pub soft: Tensor,
    pub binary: BinaryMask,
    pub threshold: f64,
}

impl ImportanceMask {
    pub fn from_threshold(soft: Tensor, threshold: f64) -> Self {
        let binary = threshold_mask(&soft, threshold);
        Self { soft, binary, threshold }
    }
}

/// `soft > threshold`, cell by cell.
pub fn threshold_mask(soft: &Tensor, threshold: f64) -> BinaryMask {
    let (window, n_vars) = (soft.shape()[0], soft.shape()[1]);
    BinaryMask::from_cells(window, n_vars, soft.values().iter().map(|&v| v > threshold).collect())
}

fn check_windows(model: &Model, data: &SupervisedDataset) -> Result<(), LbmError> {
    if data.is_empty() {
        return Err(LbmError::EmptyTestSet);
    }
    let cfg = model.config();
    if data.window != cfg.window || data.n_vars != cfg.n_vars {
        return Err(LbmError::WindowMismatch {
            found: [data.window, data.n_vars],
            window: cfg.window,
            n_vars: cfg.n_vars,
        });
    }
    Ok(())
}

fn masked(sample: &WindowedSample, mask: &[f64]) -> Tensor {
    let values = sample.input.values().iter().zip(mask).map(|(x, m)| x * m).collect();
    Tensor::new(sample.input.shape().to_vec(), values).expect("mask matches window")
}

/// `|target - F(X * sigmoid(logits))|` and its gradient w.r.t. the logits.
fn window_term(model: &Model, sample: &WindowedSample, logits: &Tensor) -> Result<(f64, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let params = model.params().register(&mut tape, false);
    let z = tape.leaf(logits.clone(), true);
    let m = tape.sigmoid(z);
    let x = tape.constant(sample.input.clone());
    let xm = tape.mul(x, m)?;
    let y = model.forward(&mut tape, &params, xm)?;
    let target = tape.constant(Tensor::scalar(sample.target));
    let diff = tape.sub(y, target)?;
    let err = tape.abs(diff);
    let value = tape.value(err).item();
    let grads = tape.backward(err)?;
    Ok((value, grads.wrt(z).into_values()))
}

/// Regularizer value and logit gradient:
/// `lambda1 * sum |M| + lambda2 * BCE(stop_grad(M > 0.5), M)`.
fn regularizer(logits: &Tensor, cfg: &LbmConfig) -> Result<(f64, Vec<f64>), AutodiffError> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone(), true);
    let m = tape.sigmoid(z);
    let target = tape.value(m).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let abs = tape.abs(m);
    let l1 = tape.sum(abs);
    let l1 = tape.scale(l1, cfg.lambda1);
    let bce = tape.binary_cross_entropy(m, &target)?;
    let bce = tape.scale(bce, cfg.lambda2);
    let loss = tape.add(l1, bce)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt(z).into_values()))
}

/// Mean masked-prediction error and mean logit gradient over `indices`.
fn batch_term(
    model: &Model,
    data: &SupervisedDataset,
    indices: &[usize],
    logits: &Tensor,
) -> Result<(f64, Vec<f64>), ModelError> {
    let n = logits.len();
    let acc = parallel::fold_chunks(
        indices.len(),
        || Ok((0.0, vec![0.0; n])),
        |acc: &mut Result<(f64, Vec<f64>), ModelError>, i| {
            if let Ok((loss, grad)) = acc {
                match window_term(model, &data.samples[indices[i]], logits) {
                    Ok((l, g)) => {
                        *loss += l;
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |acc, part| match (acc.as_mut(), part) {
            (Ok((loss, grad)), Ok((l, g))) => {
                *loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            (Ok(_), Err(e)) => *acc = Err(e),
            _ => {}
        },
    )?;
    let scale = 1.0 / indices.len() as f64;
    Ok((acc.0 * scale, acc.1.into_iter().map(|g| g * scale).collect()))
}

/// Per-step record of the soft-mask optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskStep {
    pub step: usize,
    pub prediction_error: f64,
    pub regularizer: f64,
}

fn optimize_once(
    model: &Model,
    data: &SupervisedDataset,
    cfg: &LbmConfig,
    seed: u64,
    trace: &mut Vec<MaskStep>,
) -> Result<Tensor, LbmError> {
    let (window, n_vars) = (model.config().window, model.config().n_vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<f64> = (0..window * n_vars).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut logits = [Tensor::new(vec![window, n_vars], init)?];
    let mut adam = Adam::new(cfg.learning_rate);
    let all: Vec<usize> = (0..data.len()).collect();
    for step in 0..cfg.steps {
        let batch = if cfg.batch_size >= data.len() {
            all.clone()
        } else {
            let mut idx = sample(&mut rng, data.len(), cfg.batch_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let (err, mut grad) = batch_term(model, data, &batch, &logits[0])?;
        let (reg, reg_grad) = regularizer(&logits[0], cfg)?;
        grad.iter_mut().zip(&reg_grad).for_each(|(a, b)| *a += b);
        trace.push(MaskStep {
            step,
            prediction_error: err,
            regularizer: reg,
        });
        adam.step(&mut logits, &[grad]);
    }
    let [z] = logits;
    Ok(z.map(sigmoid))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learns one global soft mask over every test window; averages the masks of
/// `cfg.restarts` initializations. The model is only read.
pub fn learn_soft_mask(model: &Model, data: &SupervisedDataset, cfg: &LbmConfig, seed: u64) -> Result<Tensor, LbmError> {
    learn_soft_mask_traced(model, data, cfg, seed).map(|(m, _)| m)
}

pub fn learn_soft_mask_traced(
    model: &Model,
    data: &SupervisedDataset,
    cfg: &LbmConfig,
    seed: u64,
) -> Result<(Tensor, Vec<MaskStep>), LbmError> {
    cfg.validate()?;
    check_windows(model, data)?;
    let mut trace = Vec::new();
    let mut sum: Option<Tensor> = None;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.restarts {
        let soft = optimize_once(model, data, cfg, seeds.gen(), &mut trace)?;
        sum = Some(match sum {
            None => soft,
            Some(mut acc) => {
                acc.values_mut().iter_mut().zip(soft.values()).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    let restarts = cfg.restarts as f64;
    Ok((sum.expect("at least one restart").map(|v| v / restarts), trace))
}

/// Mean `|target - F(X * mask)|` over the test windows.
pub fn masked_error(model: &Model, data: &SupervisedDataset, mask: &[f64]) -> Result<f64, ModelError> {
    let sum = parallel::fold_chunks(
        data.len(),
        || Ok(0.0),
        |acc: &mut Result<f64, ModelError>, i| {
            if let Ok(total) = acc {
                let s = &data.samples[i];
                match model.predict(&masked(s, mask)) {
                    Ok(y) => *total += (s.target - y).abs(),
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |acc, part| match (acc.as_mut(), part) {
            (Ok(a), Ok(b)) => *a += b,
            (Ok(_), Err(e)) => *acc = Err(e),
            _ => {}
        },
    )?;
    Ok(sum / data.len() as f64)
}

/// Threshold candidate and its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub error: f64,
    pub count: usize,
    pub score: f64,
}

/// Picks `T` minimizing `mean |y - F(X * (soft > T))| + lambda3 * count`; ties
/// go to the larger threshold.
pub fn binarize_mask(
    soft: &Tensor,
    model: &Model,
    data: &SupervisedDataset,
    lambda3: f64,
    grid: &[f64],
) -> Result<(ImportanceMask, Vec<ThresholdScore>), LbmError> {
    if grid.is_empty() {
        return Err(LbmError::Config("threshold grid is empty".into()));
    }
    check_windows(model, data)?;
    let mut scores: Vec<ThresholdScore> = Vec::with_capacity(grid.len());
    let mut best: Option<usize> = None;
    for &t in grid {
        let binary = threshold_mask(soft, t);
        let count = binary.count();
        // Thresholds selecting the same cells share one evaluation.
        let cached = scores
            .iter()
            .zip(grid)
            .find(|(_, &u)| threshold_mask(soft, u) == binary)
            .map(|(s, _)| s.error);
        let error = match cached {
            Some(e) => e,
            None => masked_error(model, data, &binary.to_f64())?,
        };
        let score = error + lambda3 * count as f64;
        scores.push(ThresholdScore {
            threshold: t,
            error,
            count,
            score,
        });
        if best.map_or(true, |b| score <= scores[b].score) {
            best = Some(scores.len() - 1);
        }
    }
    let threshold = scores[best.expect("nonempty grid")].threshold;
    Ok((ImportanceMask::from_threshold(soft.clone(), threshold), scores))
}

/// Soft phase followed by threshold selection.
pub fn explain(model: &Model, data: &SupervisedDataset, cfg: &LbmConfig, seed: u64) -> Result<ImportanceMask, LbmError> {
    let soft = learn_soft_mask(model, data, cfg, seed)?;
    Ok(binarize_mask(&soft, model, data, cfg.lambda3, &cfg.grid)?.0)
}

/// Importance of one source variable for the explained target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub variable: usize,
    /// Any cell of the variable's column is set.
    pub present: bool,
    /// Flagged lags, ascending.
    pub lags: Vec<usize>,
}

/// One entry per variable: presence indicator and flagged lag set.
pub fn extract_dependencies(mask: &BinaryMask) -> Vec<Dependency> {
    (0..mask.n_vars())
        .map(|variable| {
            let lags = mask.lags(variable);
            Dependency {
                variable,
                present: !lags.is_empty(),
                lags,
            }
        })
        .collect()
}

/// `tau` rows by `N` columns with a header of variable names, soft values at 6 decimals.
pub fn soft_map_csv(soft: &Tensor, names: &[String]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for row in soft.values().chunks(soft.shape()[1]) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn binary_map_csv(mask: &BinaryMask, names: &[String]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for row in 0..mask.window() {
        let cells: Vec<&str> = (0..mask.n_vars()).map(|v| if mask.get(row, v) { "1" } else { "0" }).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// ASCII PGM: width `N`, height `tau`, maxval 255, cell `round_half_up(255 v)`.
pub fn heatmap_pgm(map: &Tensor) -> Result<String, LbmError> {
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let mut line = Vec::with_capacity(cols);
        for c in 0..cols {
            let value = map.at(r, c);
            if !(0.0..=1.0).contains(&value) {
                return Err(LbmError::OutOfRange { row: r, col: c, value });
            }
            line.push(((255.0 * value) + 0.5).floor() as u32);
        }
        let line: Vec<String> = line.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

pub fn render_heatmap(map: &Tensor, path: impl AsRef<Path>) -> Result<(), LbmError> {
    std::fs::write(path, heatmap_pgm(map)?)?;
    Ok(())
}
