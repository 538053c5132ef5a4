//! Dense numeric kernels shared by the tape's forward and backward rules.
//!
//! All buffers are row-major. Sequences are laid out `[channels, length]`,
//! filters `[out_channels, in_channels, kernel]`.

/// `out[m, n] += a[m, k] * b[k, n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`
pub fn matmul_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(g_row, b_row);
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`
pub fn matmul_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Shape of one dilated causal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub len: usize,
}

/// Dilated causal convolution,
/// `out[o, s] = bias[o] + sum_c sum_i w[o, c, i] * x[c, s - dilation * i]`
/// with out-of-range (negative) positions reading zero.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        in_channels,
        out_channels,
        kernel,
        dilation,
        len,
    } = g;
    let mut out = vec![0.0; out_channels * len];
    for o in 0..out_channels {
        let out_row = &mut out[o * len..(o + 1) * len];
        if let Some(b) = bias {
            out_row.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..in_channels {
            let x_row = &x[c * len..(c + 1) * len];
            let w_row = &w[(o * in_channels + c) * kernel..(o * in_channels + c + 1) * kernel];
            for (i, &wv) in w_row.iter().enumerate() {
                let shift = dilation * i;
                if shift >= len {
                    break;
                }
                axpy(wv, &x_row[..len - shift], &mut out_row[shift..]);
            }
        }
    }
    out
}

/// Accumulates gradients of [`conv1d_forward`] given the output gradient.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: ConvGeometry,
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let ConvGeometry {
        in_channels,
        out_channels,
        kernel,
        dilation,
        len,
    } = g;
    for o in 0..out_channels {
        let go = &grad_out[o * len..(o + 1) * len];
        for c in 0..in_channels {
            let base = (o * in_channels + c) * kernel;
            let x_row = &x[c * len..(c + 1) * len];
            for i in 0..kernel {
                let shift = dilation * i;
                if shift >= len {
                    break;
                }
                if let Some(gw) = grad_w.as_deref_mut() {
                    gw[base + i] += dot(&go[shift..], &x_row[..len - shift]);
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    axpy(w[base + i], &go[shift..], &mut gx[c * len..c * len + len - shift]);
                }
            }
        }
    }
    if let Some(gb) = grad_bias {
        for o in 0..out_channels {
            gb[o] += grad_out[o * len..(o + 1) * len].iter().sum::<f64>();
        }
    }
}
