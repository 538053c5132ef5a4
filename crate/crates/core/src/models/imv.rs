//! Interpretable multi-variable LSTM: one hidden vector per input variable.
//!
//! The cell keeps `h, c: [N, d]`; every gate applies per-variable blocks
//! `W_k: [d, d]` to `h_k` and `U_k: [d, 1]` to the scalar `x_k`. The readout is
//! softmax attention over the N final hidden vectors followed by a linear head.

use super::{affine, head, init_head, window_row, Init, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Tensor, Var};

const GATES: [&str; 4] = ["i", "j", "f", "o"];

/// Per-gate tensors in gate order `[i, j, f, o]`.
#[derive(Debug, Clone, Copy)]
pub struct ImvWeights {
    /// `[N, d, d]` hidden-to-hidden blocks.
    pub w: [Var; 4],
    /// `[N, d, 1]` input-to-hidden blocks.
    pub u: [Var; 4],
    /// `[N, d]`
    pub b: [Var; 4],
}

/// One cell update. `x: [1, N]` (a window row), `h, c: [N, d]`.
pub fn imv_lstm_step(tape: &mut Tape, w: &ImvWeights, x: Var, h: Var, c: Var) -> Result<(Var, Var), AutodiffError> {
    let n = tape.shape(x)[1];
    let x_col = tape.reshape(x, &[n, 1])?;
    let mut gates = [h; 4];
    for g in 0..4 {
        let wh = tape.block_matvec(w.w[g], h)?;
        let ux = tape.block_matvec(w.u[g], x_col)?;
        let sum = tape.add(wh, ux)?;
        let pre = tape.add(sum, w.b[g])?;
        gates[g] = if g == 1 { tape.tanh(pre) } else { tape.sigmoid(pre) };
    }
    let [i, j, f, o] = gates;
    let keep = tape.mul(c, f)?;
    let write = tape.mul(i, j)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Attention readout over variable-wise hidden vectors `h: [N, d]`.
/// Returns the prediction and the `[1, N]` attention weights.
pub fn imv_readout(tape: &mut Tape, p: &BoundParams<'_>, h: Var) -> Result<(Var, Var), AutodiffError> {
    let n = tape.shape(h)[0];
    let scores = affine(tape, h, p.var("imv.att_w"), p.var("imv.att_b"))?;
    let scores = tape.reshape(scores, &[1, n])?;
    let attention = tape.softmax(scores)?;
    let context = tape.matmul(attention, h)?;
    Ok((head(tape, p, context)?, attention))
}

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> ParamSet {
    let (n, d) = (cfg.n_vars, cfg.hidden);
    let mut p = ParamSet::new();
    for g in GATES {
        p.insert(format!("imv.w_{g}"), init.uniform(&[n, d, d], d + 1));
        p.insert(format!("imv.u_{g}"), init.uniform(&[n, d, 1], d + 1));
        p.insert(format!("imv.b_{g}"), init.uniform(&[n, d], d + 1));
    }
    p.insert("imv.att_w", init.uniform(&[d, 1], d));
    p.insert("imv.att_b", init.uniform(&[1], d));
    init_head(&mut p, init, d);
    p
}

pub(super) fn weights(p: &BoundParams<'_>) -> ImvWeights {
    let pick = |prefix: &str| GATES.map(|g| p.var(&format!("imv.{prefix}_{g}")));
    ImvWeights {
        w: pick("w"),
        u: pick("u"),
        b: pick("b"),
    }
}

pub(super) fn forward(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &BoundParams<'_>,
    window: Var,
) -> Result<(Var, Var), ModelError> {
    let w = weights(p);
    let mut h = tape.constant(Tensor::zeros(&[cfg.n_vars, cfg.hidden]));
    let mut c = h;
    for t in 0..cfg.window {
        let x = window_row(tape, window, t)?;
        (h, c) = imv_lstm_step(tape, &w, x, h, c)?;
    }
    Ok(imv_readout(tape, p, h)?)
}
