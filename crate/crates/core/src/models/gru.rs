//! Standard GRU over the window rows, final hidden state into a linear head.

use super::{affine, head, init_head, window_row, Init, ModelConfig, ModelError};
use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> ParamSet {
    let (n, d) = (cfg.n_vars, cfg.hidden);
    let mut p = ParamSet::new();
    // gate order [r, z, n]
    p.insert("gru.w_x", init.uniform(&[n, 3 * d], n));
    p.insert("gru.w_h", init.uniform(&[d, 3 * d], d));
    p.insert("gru.b_x", init.uniform(&[3 * d], d));
    p.insert("gru.b_h", init.uniform(&[3 * d], d));
    init_head(&mut p, init, d);
    p
}

pub(super) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
    let d = cfg.hidden;
    let (w_x, w_h, b_x, b_h) = (p.var("gru.w_x"), p.var("gru.w_h"), p.var("gru.b_x"), p.var("gru.b_h"));
    let mut h = tape.constant(Tensor::zeros(&[1, d]));
    for t in 0..cfg.window {
        let x = window_row(tape, window, t)?;
        let xz = affine(tape, x, w_x, b_x)?;
        let hz = affine(tape, h, w_h, b_h)?;
        let xr = tape.slice(xz, 1, 0, d)?;
        let hr = tape.slice(hz, 1, 0, d)?;
        let xu = tape.slice(xz, 1, d, 2 * d)?;
        let hu = tape.slice(hz, 1, d, 2 * d)?;
        let xn = tape.slice(xz, 1, 2 * d, 3 * d)?;
        let hn = tape.slice(hz, 1, 2 * d, 3 * d)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);
        let u_pre = tape.add(xu, hu)?;
        let u = tape.sigmoid(u_pre);
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, gated)?;
        let cand = tape.tanh(n_pre);
        // h = (1 - u) * cand + u * h = cand + u * (h - cand)
        let delta = tape.sub(h, cand)?;
        let carried = tape.mul(u, delta)?;
        h = tape.add(cand, carried)?;
    }
    Ok(head(tape, p, h)?)
}
