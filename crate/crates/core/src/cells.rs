//! Fused GRU and LSTM cell kernels with hand-derived backward passes.
//!
//! Weight layout: the recurrent matrix `w` stacks one `n × n` block per gate.
//! GRU blocks are `[z, r, candidate]`, LSTM blocks are `[i, f, g, o]`. The
//! input projection (`W_x x + b`) is computed outside the cell and passed in as
//! `xp`.

use crate::kernels::{dot, sigmoid};

/// GRU step: `z = σ(xp_z + W_z h)`, `r = σ(xp_r + W_r h)`,
/// `h̃ = tanh(xp_c + W_c (r ⊙ h))`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
///
/// Returns the new state and the saved activations `[z, r, h̃, r⊙h]`.
pub(crate) fn gru_forward(xp: &[f64], h: &[f64], w: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut saved = vec![0.0; 4 * n];
    let (z, rest) = saved.split_at_mut(n);
    let (r, rest) = rest.split_at_mut(n);
    let (c, rh) = rest.split_at_mut(n);
    for i in 0..n {
        z[i] = sigmoid(xp[i] + dot(&w[i * n..(i + 1) * n], h));
        r[i] = sigmoid(xp[n + i] + dot(&w[(n + i) * n..(n + i + 1) * n], h));
        rh[i] = r[i] * h[i];
    }
    for i in 0..n {
        c[i] = (xp[2 * n + i] + dot(&w[(2 * n + i) * n..(2 * n + i + 1) * n], rh)).tanh();
    }
    let out = (0..n).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
    (out, saved)
}

/// Returns `(d xp, d h)` and accumulates the recurrent weight gradient into `dw`.
pub(crate) fn gru_backward(
    g: &[f64],
    h: &[f64],
    w: &[f64],
    saved: &[f64],
    n: usize,
    dw: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (z, rest) = saved.split_at(n);
    let (r, rest) = rest.split_at(n);
    let (c, rh) = rest.split_at(n);

    let mut dxp = vec![0.0; 3 * n];
    let mut dh: Vec<f64> = (0..n).map(|i| g[i] * (1.0 - z[i])).collect();
    for i in 0..n {
        let dz = g[i] * (c[i] - h[i]);
        dxp[i] = dz * z[i] * (1.0 - z[i]);
        dxp[2 * n + i] = g[i] * z[i] * (1.0 - c[i] * c[i]);
    }
    // through W_c (r ⊙ h)
    let mut drh = vec![0.0; n];
    for i in 0..n {
        let da = dxp[2 * n + i];
        let row = &w[(2 * n + i) * n..(2 * n + i + 1) * n];
        for p in 0..n {
            drh[p] += row[p] * da;
        }
    }
    for i in 0..n {
        dh[i] += drh[i] * r[i];
        let dr = drh[i] * h[i];
        dxp[n + i] = dr * r[i] * (1.0 - r[i]);
    }
    for i in 0..2 * n {
        let da = dxp[i];
        let row = &w[i * n..(i + 1) * n];
        for p in 0..n {
            dh[p] += row[p] * da;
        }
    }
    if let Some(dw) = dw {
        for i in 0..3 * n {
            let da = dxp[i];
            if da == 0.0 {
                continue;
            }
            let src = if i < 2 * n { h } else { rh };
            let row = &mut dw[i * n..(i + 1) * n];
            for p in 0..n {
                row[p] += da * src[p];
            }
        }
    }
    (dxp, dh)
}

/// LSTM step over the packed state `[h; c]`:
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`. Returns `[h'; c']` and the saved
/// activations `[i, f, g, o, tanh(c')]`.
pub(crate) fn lstm_forward(
    xp: &[f64],
    state: &[f64],
    w: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (h, c) = state.split_at(n);
    let mut saved = vec![0.0; 5 * n];
    for k in 0..4 * n {
        let a = xp[k] + dot(&w[k * n..(k + 1) * n], h);
        saved[k] = if (2 * n..3 * n).contains(&k) { a.tanh() } else { sigmoid(a) };
    }
    let mut out = vec![0.0; 2 * n];
    for j in 0..n {
        let (i, f, g, o) = (saved[j], saved[n + j], saved[2 * n + j], saved[3 * n + j]);
        let c_new = f * c[j] + i * g;
        let tc = c_new.tanh();
        saved[4 * n + j] = tc;
        out[j] = o * tc;
        out[n + j] = c_new;
    }
    (out, saved)
}

/// Returns `(d xp, d state)` and accumulates into `dw`.
pub(crate) fn lstm_backward(
    gout: &[f64],
    state: &[f64],
    w: &[f64],
    saved: &[f64],
    n: usize,
    dw: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (h, c) = state.split_at(n);
    let mut da = vec![0.0; 4 * n];
    let mut dstate = vec![0.0; 2 * n];
    for j in 0..n {
        let (i, f, g, o, tc) = (
            saved[j],
            saved[n + j],
            saved[2 * n + j],
            saved[3 * n + j],
            saved[4 * n + j],
        );
        let dh_new = gout[j];
        let dc = gout[n + j] + dh_new * o * (1.0 - tc * tc);
        da[j] = dc * g * i * (1.0 - i);
        da[n + j] = dc * c[j] * f * (1.0 - f);
        da[2 * n + j] = dc * i * (1.0 - g * g);
        da[3 * n + j] = dh_new * tc * o * (1.0 - o);
        dstate[n + j] = dc * f;
    }
    for k in 0..4 * n {
        let row = &w[k * n..(k + 1) * n];
        for p in 0..n {
            dstate[p] += row[p] * da[k];
        }
    }
    if let Some(dw) = dw {
        for k in 0..4 * n {
            if da[k] == 0.0 {
                continue;
            }
            let row = &mut dw[k * n..(k + 1) * n];
            for p in 0..n {
                row[p] += da[k] * h[p];
            }
        }
    }
    (da, dstate)
}
