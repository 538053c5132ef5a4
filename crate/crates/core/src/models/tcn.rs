//! Temporal convolutional networks: residual blocks of dilated causal
//! convolutions (dilation `2^l` at level `l`) with several readout heads.

use serde::{Deserialize, Serialize};

use super::{head, init_head, Init, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TcnVariant {
    /// Linear head on the last time step.
    #[default]
    Default,
    /// Softmax attention over the time steps of the last level.
    OutputAttention,
    /// Softmax attention over the last-step summaries of every level.
    LayerwiseAttention,
    /// Parallel towers on the last `tau`, `tau/2` and `tau/4` rows.
    Stack,
    /// A second tower on the time-reversed window.
    Bidirectional,
}

impl TcnVariant {
    pub const ALL: [TcnVariant; 5] = [
        TcnVariant::Default,
        TcnVariant::OutputAttention,
        TcnVariant::LayerwiseAttention,
        TcnVariant::Stack,
        TcnVariant::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TcnVariant::Default => "default",
            TcnVariant::OutputAttention => "output-attention",
            TcnVariant::LayerwiseAttention => "layerwise-attention",
            TcnVariant::Stack => "stack",
            TcnVariant::Bidirectional => "bidirectional",
        }
    }

    fn towers(self) -> usize {
        match self {
            TcnVariant::Stack => 3,
            TcnVariant::Bidirectional => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for TcnVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TcnVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown tcn variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub kernel: usize,
    /// Channel width of every level.
    pub channels: usize,
    /// Number of residual blocks; `None` picks the fewest covering the window.
    pub levels: Option<usize>,
    pub variant: TcnVariant,
    /// Reject configurations whose receptive field is shorter than the window.
    pub enforce_receptive_field: bool,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            kernel: 7,
            channels: 16,
            levels: None,
            variant: TcnVariant::Default,
            enforce_receptive_field: true,
        }
    }
}

/// `1 + sum_l 2 (k - 1) 2^l` over `levels` residual blocks.
pub fn receptive_field(kernel: usize, levels: usize) -> usize {
    1 + 2 * kernel.saturating_sub(1) * ((1usize << levels) - 1)
}

/// Fewest levels (at least one) whose receptive field reaches `window`.
pub fn required_levels(kernel: usize, window: usize) -> usize {
    assert!(kernel >= 2, "kernel must be at least 2");
    let mut levels = 1;
    while receptive_field(kernel, levels) < window {
        levels += 1;
    }
    levels
}

impl TcnConfig {
    pub fn resolved_levels(&self, window: usize) -> usize {
        self.levels.unwrap_or_else(|| required_levels(self.kernel, window))
    }

    pub fn validate(&self, window: usize) -> Result<(), ModelError> {
        if self.kernel < 2 || self.channels == 0 || self.levels == Some(0) {
            return Err(ModelError::Config("tcn needs kernel >= 2, channels >= 1, levels >= 1".into()));
        }
        if self.levels.is_some_and(|l| l > 24) {
            return Err(ModelError::Config("tcn level count is unreasonably large".into()));
        }
        if self.variant == TcnVariant::Stack && window < 4 {
            return Err(ModelError::Config("stacked tcn needs a window of at least 4".into()));
        }
        let levels = self.resolved_levels(window);
        let rf = receptive_field(self.kernel, levels);
        if self.enforce_receptive_field && rf < window {
            return Err(ModelError::ReceptiveField {
                receptive_field: rf,
                window,
                required_levels: required_levels(self.kernel, window),
            });
        }
        Ok(())
    }
}

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> Result<ParamSet, ModelError> {
    let tcn = &cfg.tcn;
    let levels = tcn.resolved_levels(cfg.window);
    let (k, c) = (tcn.kernel, tcn.channels);
    let mut p = ParamSet::new();
    for tower in 0..tcn.variant.towers() {
        for l in 0..levels {
            let inp = if l == 0 { cfg.n_vars } else { c };
            let pre = format!("tcn.{tower}.{l}");
            p.insert(format!("{pre}.conv1.w"), init.uniform(&[c, inp, k], inp * k));
            p.insert(format!("{pre}.conv1.b"), init.uniform(&[c], inp * k));
            p.insert(format!("{pre}.conv2.w"), init.uniform(&[c, c, k], c * k));
            p.insert(format!("{pre}.conv2.b"), init.uniform(&[c], c * k));
            if inp != c {
                p.insert(format!("{pre}.proj.w"), init.uniform(&[c, inp, 1], inp));
                p.insert(format!("{pre}.proj.b"), init.uniform(&[c], inp));
            }
        }
    }
    match tcn.variant {
        TcnVariant::OutputAttention | TcnVariant::LayerwiseAttention => {
            p.insert("tcn.att.w", init.uniform(&[c, 1], c));
            p.insert("tcn.att.b", init.uniform(&[1], c));
        }
        _ => {}
    }
    init_head(&mut p, init, c * tcn.variant.towers());
    Ok(p)
}

/// Runs one tower over `x: [N, L]`; returns the output `[C, L]` of every level.
fn tower(tape: &mut Tape, p: &BoundParams<'_>, idx: usize, levels: usize, x: Var) -> Result<Vec<Var>, AutodiffError> {
    let mut outputs = Vec::with_capacity(levels);
    let mut h = x;
    for l in 0..levels {
        let pre = format!("tcn.{idx}.{l}");
        let dilation = 1 << l;
        let a = tape.conv1d_dilated_causal(h, p.var(&format!("{pre}.conv1.w")), Some(p.var(&format!("{pre}.conv1.b"))), dilation)?;
        let a = tape.relu(a);
        let b = tape.conv1d_dilated_causal(a, p.var(&format!("{pre}.conv2.w")), Some(p.var(&format!("{pre}.conv2.b"))), dilation)?;
        let b = tape.relu(b);
        let residual = if p.contains(&format!("{pre}.proj.w")) {
            tape.conv1d_dilated_causal(h, p.var(&format!("{pre}.proj.w")), Some(p.var(&format!("{pre}.proj.b"))), 1)?
        } else {
            h
        };
        let sum = tape.add(b, residual)?;
        h = tape.relu(sum);
        outputs.push(h);
    }
    Ok(outputs)
}

/// Column `len - 1` of a `[C, len]` level output as a `[1, C]` row.
fn last_step(tape: &mut Tape, h: Var) -> Result<Var, AutodiffError> {
    let len = tape.shape(h)[1];
    let col = tape.slice(h, 1, len - 1, len)?;
    tape.transpose(col)
}

pub(super) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
    let tcn = &cfg.tcn;
    let levels = tcn.resolved_levels(cfg.window);
    let tau = cfg.window;
    let x = tape.transpose(window)?;
    let features = match tcn.variant {
        TcnVariant::Default => {
            let out = tower(tape, p, 0, levels, x)?;
            last_step(tape, out[levels - 1])?
        }
        TcnVariant::OutputAttention => {
            let out = tower(tape, p, 0, levels, x)?;
            let h = out[levels - 1];
            let ht = tape.transpose(h)?;
            let scores = super::affine(tape, ht, p.var("tcn.att.w"), p.var("tcn.att.b"))?;
            let scores = tape.reshape(scores, &[1, tau])?;
            let weights = tape.softmax(scores)?;
            tape.matmul(weights, ht)?
        }
        TcnVariant::LayerwiseAttention => {
            let out = tower(tape, p, 0, levels, x)?;
            let rows = out.iter().map(|&h| last_step(tape, h)).collect::<Result<Vec<_>, _>>()?;
            let summaries = tape.concat(&rows, 0)?;
            let scores = super::affine(tape, summaries, p.var("tcn.att.w"), p.var("tcn.att.b"))?;
            let scores = tape.reshape(scores, &[1, levels])?;
            let weights = tape.softmax(scores)?;
            tape.matmul(weights, summaries)?
        }
        TcnVariant::Stack => {
            let mut parts = Vec::with_capacity(3);
            for (idx, len) in [tau, tau / 2, tau / 4].into_iter().enumerate() {
                let xs = tape.slice(x, 1, tau - len, tau)?;
                let out = tower(tape, p, idx, levels, xs)?;
                parts.push(last_step(tape, out[levels - 1])?);
            }
            tape.concat(&parts, 1)?
        }
        TcnVariant::Bidirectional => {
            let forward = tower(tape, p, 0, levels, x)?;
            let flipped = tape.flip(x, 1)?;
            let backward = tower(tape, p, 1, levels, flipped)?;
            let a = last_step(tape, forward[levels - 1])?;
            let b = last_step(tape, backward[levels - 1])?;
            tape.concat(&[a, b], 1)?
        }
    };
    Ok(head(tape, p, features)?)
}
