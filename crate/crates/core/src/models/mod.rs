//! Sequence regressors mapping a `tau x N` window to a scalar prediction.
//!
//! Every architecture records its forward pass on a [`Tape`], so the same code
//! serves training (gradients w.r.t. parameters) and mask learning (gradients
//! w.r.t. the masked input window, with parameters frozen).

mod antisymmetric;
mod gru;
mod imv;
mod lstm;
mod rhn;
mod tcn;
mod train;

pub use antisymmetric::{antisymmetric_step, effective_recurrent_matrix, recurrent_transposed, AntisymmetricWeights};
pub use imv::{imv_lstm_step, imv_readout, ImvWeights};
pub use lstm::{lstm_step, LstmWeights};
pub use rhn::{rhn_step, HighwayLayer, RhnWeights};
pub use tcn::{receptive_field, required_levels, TcnConfig, TcnVariant};
pub use train::{evaluate, per_sample_gradient, predict_all, train, EpochLoss, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("window shape {found:?} does not match model input [{window}, {n_vars}]")]
    WindowShape {
        found: Vec<usize>,
        window: usize,
        n_vars: usize,
    },
    #[error("receptive field {receptive_field} is shorter than window {window}; {required_levels} levels needed")]
    ReceptiveField {
        receptive_field: usize,
        window: usize,
        required_levels: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lstm,
    Gru,
    ImvLstm,
    Antisymmetric,
    Rhn,
    Tcn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::ImvLstm,
        ModelKind::Antisymmetric,
        ModelKind::Rhn,
        ModelKind::Tcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::ImvLstm => "imv-lstm",
            ModelKind::Antisymmetric => "antisymmetric",
            ModelKind::Rhn => "rhn",
            ModelKind::Tcn => "tcn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// Architecture and size of a regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_vars: usize,
    pub window: usize,
    /// Hidden size `d` of the recurrent models.
    pub hidden: usize,
    /// Recurrence depth `L` of the highway network.
    pub rhn_depth: usize,
    /// Diffusion strength of the antisymmetric cell.
    pub gamma: f64,
    /// Forward-Euler step of the antisymmetric cell.
    pub step_size: f64,
    pub tcn: TcnConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_vars: usize, window: usize) -> Self {
        Self {
            kind,
            n_vars,
            window,
            hidden: 32,
            rhn_depth: 3,
            gamma: 0.01,
            step_size: 0.01,
            tcn: TcnConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_vars == 0 || self.window == 0 {
            return Err(ModelError::Config("window and variable count must be positive".into()));
        }
        match self.kind {
            ModelKind::Tcn => self.tcn.validate(self.window),
            ModelKind::Rhn if self.rhn_depth == 0 => Err(ModelError::Config("recurrence depth must be >= 1".into())),
            ModelKind::Antisymmetric if !(self.gamma >= 0.0 && self.step_size >= 0.0) => {
                Err(ModelError::Config("gamma and step size must be non-negative".into()))
            }
            _ if self.kind != ModelKind::Tcn && self.hidden == 0 => {
                Err(ModelError::Config("hidden size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A regressor: configuration plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Checkpoint envelope `{kind, config, params}`.
#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    kind: ModelKind,
    config: ModelConfig,
    params: serde_json::Value,
}

impl Model {
    /// Initializes every parameter uniformly in `±1/sqrt(fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init::new(seed);
        let params = match config.kind {
            ModelKind::Lstm => lstm::init(&config, &mut init),
            ModelKind::Gru => gru::init(&config, &mut init),
            ModelKind::ImvLstm => imv::init(&config, &mut init),
            ModelKind::Antisymmetric => antisymmetric::init(&config, &mut init),
            ModelKind::Rhn => rhn::init(&config, &mut init),
            ModelKind::Tcn => tcn::init(&config, &mut init)?,
        };
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records the prediction for `window` (shape `[tau, N]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(window);
        if shape != [self.config.window, self.config.n_vars] {
            return Err(ModelError::WindowShape {
                found: shape.to_vec(),
                window: self.config.window,
                n_vars: self.config.n_vars,
            });
        }
        match self.config.kind {
            ModelKind::Lstm => lstm::forward(&self.config, tape, params, window),
            ModelKind::Gru => gru::forward(&self.config, tape, params, window),
            ModelKind::ImvLstm => imv::forward(&self.config, tape, params, window).map(|(y, _)| y),
            ModelKind::Antisymmetric => antisymmetric::forward(&self.config, tape, params, window),
            ModelKind::Rhn => rhn::forward(&self.config, tape, params, window),
            ModelKind::Tcn => tcn::forward(&self.config, tape, params, window),
        }
    }

    /// Prediction for one window without keeping the tape.
    pub fn predict(&self, window: &Tensor) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let x = tape.constant(window.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).item())
    }

    /// Variable attention weights of the IMV-LSTM readout for `window`.
    pub fn imv_attention(&self, window: &Tensor) -> Result<Vec<f64>, ModelError> {
        if self.config.kind != ModelKind::ImvLstm {
            return Err(ModelError::Config("attention weights exist only for imv-lstm".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false);
        let x = tape.constant(window.clone());
        let (_, attention) = imv::forward(&self.config, &mut tape, &p, x)?;
        Ok(tape.value(attention).values().to_vec())
    }

    pub fn to_json(&self) -> String {
        let env = Envelope {
            kind: self.config.kind,
            config: self.config.clone(),
            params: self.params.to_json(),
        };
        serde_json::to_string(&env).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        if env.kind != env.config.kind {
            return Err(ModelError::Config("checkpoint kind disagrees with its config".into()));
        }
        let mut model = Model::new(env.config, 0)?;
        model.params.load_json(&env.params)?;
        Ok(model)
    }
}

/// Seeded uniform `±1/sqrt(fan_in)` initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), values).expect("init shape")
    }
}

/// `x · w + b` for a row vector `x`.
pub(crate) fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Row `t` of a `[tau, N]` window as a `[1, N]` row vector.
pub(crate) fn window_row(tape: &mut Tape, window: Var, t: usize) -> Result<Var, AutodiffError> {
    tape.slice(window, 0, t, t + 1)
}

/// Linear head `[1, d] -> [1]`.
pub(crate) fn head(tape: &mut Tape, params: &BoundParams<'_>, features: Var) -> Result<Var, AutodiffError> {
    let y = affine(tape, features, params.var("head.w"), params.var("head.b"))?;
    tape.reshape(y, &[1])
}

pub(crate) fn init_head(params: &mut ParamSet, init: &mut Init, width: usize) {
    params.insert("head.w", init.uniform(&[width, 1], width));
    params.insert("head.b", init.uniform(&[1], width));
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn zero_all(model: &mut Model) {
        for t in model.params_mut().tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_params_predict_head_bias() {
        let window = Tensor::new(vec![12, 3], (0..36).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for kind in ModelKind::ALL {
            let mut cfg = ModelConfig::new(kind, 3, 12);
            cfg.hidden = 4;
            cfg.tcn.channels = 4;
            cfg.tcn.kernel = 3;
            let mut model = Model::new(cfg, 1).unwrap();
            zero_all(&mut model);
            model.params_mut().get_mut("head.b").unwrap().values_mut()[0] = 0.75;
            assert_eq!(model.predict(&window).unwrap(), 0.75, "{kind:?}");
        }
    }

    #[test]
    fn window_shape_is_checked() {
        for kind in ModelKind::ALL {
            let model = Model::new(ModelConfig::new(kind, 2, 8), 0).unwrap();
            let bad = Tensor::zeros(&[7, 2]);
            assert!(matches!(model.predict(&bad), Err(ModelError::WindowShape { .. })));
        }
        assert!(Model::new(ModelConfig::new(ModelKind::Lstm, 2, 0), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in ModelKind::ALL {
            let model = Model::new(ModelConfig::new(kind, 2, 16), 7).unwrap();
            let back = Model::from_json(&model.to_json()).unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn kind_names_parse() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("transformer".parse::<ModelKind>().is_err());
    }
}
