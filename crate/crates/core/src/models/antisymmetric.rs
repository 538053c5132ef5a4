//! AntisymmetricRNN: gated forward-Euler steps of an ODE whose recurrent
//! matrix `W - W^T - gamma I` has symmetric part exactly `-gamma I`.

use super::{affine, head, init_head, window_row, Init, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Tensor, Var};

/// `W - W^T - gamma I` for a square `W`.
pub fn effective_recurrent_matrix(w: &Tensor, gamma: f64) -> Tensor {
    let d = w.shape()[0];
    assert_eq!(w.shape(), [d, d], "recurrent matrix must be square");
    let mut out = Tensor::zeros(&[d, d]);
    let v = out.values_mut();
    for i in 0..d {
        for j in 0..d {
            v[i * d + j] = w.at(i, j) - w.at(j, i) - if i == j { gamma } else { 0.0 };
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct AntisymmetricWeights {
    /// Transposed effective matrix `(W - W^T - gamma I)^T`, `[d, d]`, so that
    /// `h · recurrent_t` is `(W - W^T - gamma I) h` for a row vector `h`.
    pub recurrent_t: Var,
    /// `[N, d]`
    pub v_h: Var,
    /// `[N, d]`
    pub v_z: Var,
    pub b_h: Var,
    pub b_z: Var,
}

/// Records `(W - W^T - gamma I)^T` from the raw parameter `W`.
pub fn recurrent_transposed(tape: &mut Tape, w: Var, gamma: f64) -> Result<Var, AutodiffError> {
    let d = tape.shape(w)[0];
    let wt = tape.transpose(w)?;
    let skew = tape.sub(w, wt)?;
    let mut diag = Tensor::zeros(&[d, d]);
    for i in 0..d {
        diag.values_mut()[i * d + i] = gamma;
    }
    let diag = tape.constant(diag);
    let effective = tape.sub(skew, diag)?;
    tape.transpose(effective)
}

/// `z = sigmoid(A h + V_z x + b_z)`, `h' = h + step * z * tanh(A h + V_h x + b_h)`.
pub fn antisymmetric_step(
    tape: &mut Tape,
    w: AntisymmetricWeights,
    step_size: f64,
    x: Var,
    h: Var,
) -> Result<Var, AutodiffError> {
    let ah = tape.matmul(h, w.recurrent_t)?;
    let xz = affine(tape, x, w.v_z, w.b_z)?;
    let z_pre = tape.add(ah, xz)?;
    let z = tape.sigmoid(z_pre);
    let xh = affine(tape, x, w.v_h, w.b_h)?;
    let c_pre = tape.add(ah, xh)?;
    let c = tape.tanh(c_pre);
    let update = tape.mul(z, c)?;
    let update = tape.scale(update, step_size);
    tape.add(h, update)
}

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> ParamSet {
    let (n, d) = (cfg.n_vars, cfg.hidden);
    let mut p = ParamSet::new();
    p.insert("asym.w", init.uniform(&[d, d], d));
    p.insert("asym.v_h", init.uniform(&[n, d], n));
    p.insert("asym.v_z", init.uniform(&[n, d], n));
    p.insert("asym.b_h", init.uniform(&[d], n));
    p.insert("asym.b_z", init.uniform(&[d], n));
    init_head(&mut p, init, d);
    p
}

pub(super) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
    let w = AntisymmetricWeights {
        recurrent_t: recurrent_transposed(tape, p.var("asym.w"), cfg.gamma)?,
        v_h: p.var("asym.v_h"),
        v_z: p.var("asym.v_z"),
        b_h: p.var("asym.b_h"),
        b_z: p.var("asym.b_z"),
    };
    let mut h = tape.constant(Tensor::zeros(&[1, cfg.hidden]));
    for t in 0..cfg.window {
        let x = window_row(tape, window, t)?;
        h = antisymmetric_step(tape, w, cfg.step_size, x, h)?;
    }
    Ok(head(tape, p, h)?)
}
