//! Recurrent highway network: `L` highway micro-layers per time step, with the
//! input injected only into the first.

use super::{affine, head, init_head, window_row, Init, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Tensor, Var};

/// Recurrent maps and biases of one micro-layer.
#[derive(Debug, Clone, Copy)]
pub struct HighwayLayer {
    pub r_h: Var,
    pub r_t: Var,
    pub r_c: Var,
    pub b_h: Var,
    pub b_t: Var,
    pub b_c: Var,
}

#[derive(Debug, Clone)]
pub struct RhnWeights {
    pub w_h: Var,
    pub w_t: Var,
    pub w_c: Var,
    pub layers: Vec<HighwayLayer>,
}

/// One time step: `s_0 = y_prev`, `s_l = h_l * t_l + s_{l-1} * c_l`, `y = s_L`.
pub fn rhn_step(tape: &mut Tape, w: &RhnWeights, x: Var, y_prev: Var) -> Result<Var, AutodiffError> {
    let mut s = y_prev;
    for (l, layer) in w.layers.iter().enumerate() {
        let pre = |tape: &mut Tape, input: Var, rec: Var, b: Var| -> Result<Var, AutodiffError> {
            let r = affine(tape, s, rec, b)?;
            if l == 0 {
                let xi = tape.matmul(x, input)?;
                tape.add(r, xi)
            } else {
                Ok(r)
            }
        };
        let h_pre = pre(tape, w.w_h, layer.r_h, layer.b_h)?;
        let t_pre = pre(tape, w.w_t, layer.r_t, layer.b_t)?;
        let c_pre = pre(tape, w.w_c, layer.r_c, layer.b_c)?;
        let h = tape.tanh(h_pre);
        let t = tape.sigmoid(t_pre);
        let c = tape.sigmoid(c_pre);
        let transformed = tape.mul(h, t)?;
        let carried = tape.mul(s, c)?;
        s = tape.add(transformed, carried)?;
    }
    Ok(s)
}

pub(super) fn init(cfg: &ModelConfig, init: &mut Init) -> ParamSet {
    let (n, d) = (cfg.n_vars, cfg.hidden);
    let mut p = ParamSet::new();
    for g in ["h", "t", "c"] {
        p.insert(format!("rhn.w_{g}"), init.uniform(&[n, d], n + d));
    }
    for l in 0..cfg.rhn_depth {
        for g in ["h", "t", "c"] {
            p.insert(format!("rhn.{l}.r_{g}"), init.uniform(&[d, d], d));
            p.insert(format!("rhn.{l}.b_{g}"), init.uniform(&[d], d));
        }
    }
    init_head(&mut p, init, d);
    p
}

pub(super) fn weights(cfg: &ModelConfig, p: &BoundParams<'_>) -> RhnWeights {
    RhnWeights {
        w_h: p.var("rhn.w_h"),
        w_t: p.var("rhn.w_t"),
        w_c: p.var("rhn.w_c"),
        layers: (0..cfg.rhn_depth)
            .map(|l| HighwayLayer {
                r_h: p.var(&format!("rhn.{l}.r_h")),
                r_t: p.var(&format!("rhn.{l}.r_t")),
                r_c: p.var(&format!("rhn.{l}.r_c")),
                b_h: p.var(&format!("rhn.{l}.b_h")),
                b_t: p.var(&format!("rhn.{l}.b_t")),
                b_c: p.var(&format!("rhn.{l}.b_c")),
            })
            .collect(),
    }
}

pub(super) fn forward(cfg: &ModelConfig, tape: &mut Tape, p: &BoundParams<'_>, window: Var) -> Result<Var, ModelError> {
    let w = weights(cfg, p);
    let mut y = tape.constant(Tensor::zeros(&[1, cfg.hidden]));
    for t in 0..cfg.window {
        let x = window_row(tape, window, t)?;
        y = rhn_step(tape, &w, x, y)?;
    }
    Ok(head(tape, p, y)?)
}
