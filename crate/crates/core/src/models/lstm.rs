//! Standard LSTM over the window rows, final hidden state into a linear head.

use super::{affine, head, init_head, window_row, Init, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Var};

/// Fused gate weights, gate order `[i, f, g, o]` along the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[N, 4d]`
    pub input: Var,
    /// `[d, 4d]`
    pub recurrent: Var,
    /// `[4d]`
    pub bias: Var,
}

/// One LSTM step on row vectors: `x: [1, N]`, `h, c: [1, d]`.
pub fn lstm_step(tape: &mut Tape, w: LstmWeights, x: Var, h: Var, c: Var) -> Result<(Var, Var), AutodiffError> {
    let d = tape.shape(h)[1];
    let xz = affine(tape, x, w.input, w.bias)?;
    let hz = tape.matmul(h, w.recurrent)?;
    let z = tape.add(xz, hz)?;
    let zi = tape.slice(z, 1, 0, d)?;
    let zf = tape.slice(z, 1, d, 2 * d)?;
    let zg = tape.slice(z, 1, 2 * d, 3 * d)?;
    let zo = tape.slice(z, 1, 3 * d, 4 * d)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> ParamSet {
    let (n, d) = (cfg.n_vars, cfg.hidden);
    let mut p = ParamSet::new();
    p.insert("lstm.w_x", init.uniform(&[n, 4 * d], n));
    p.insert("lstm.w_h", init.uniform(&[d, 4 * d], d));
    p.insert("lstm.b", init.uniform(&[4 * d], d));
    init_head(&mut p, init, d);
    p
}

pub(super) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
    let w = LstmWeights {
        input: p.var("lstm.w_x"),
        recurrent: p.var("lstm.w_h"),
        bias: p.var("lstm.b"),
    };
    let mut h = tape.constant(crate::autodiff::Tensor::zeros(&[1, cfg.hidden]));
    let mut c = h;
    for t in 0..cfg.window {
        let x = window_row(tape, window, t)?;
        (h, c) = lstm_step(tape, w, x, h, c)?;
    }
    Ok(head(tape, p, h)?)
}
