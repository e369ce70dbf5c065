//! Reverse-mode derivatives of one block step, driven by the tapes that
//! [`block_step`](super::block_step) records. Gradients accumulate into a
//! `BlockWeights` of the same shape.

use alloc::vec::Vec;

use super::mix::{BlockTape, ChannelMixTape, LayerNormTape, TimeMixTape};
use super::weights::{BlockWeights, ChannelMixWeights, LayerNorm, TimeMixWeights};
use crate::params::Params;
use crate::tensor::{dot, Matrix, Vector};

/// Gradient with respect to the recurrent carry of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStateGrad {
    pub wkv: Vec<Matrix>,
    pub tm_shift: Vector,
    pub cm_shift: Vector,
}

impl LayerStateGrad {
    pub fn zeros(n_heads: usize, head_size: usize) -> Self {
        let d = n_heads * head_size;
        LayerStateGrad {
            wkv: (0..n_heads).map(|_| Matrix::zeros(head_size, head_size)).collect(),
            tm_shift: Vector::zeros(d),
            cm_shift: Vector::zeros(d),
        }
    }
}

/// A copy of `like` with every parameter set to zero.
pub fn zeroed<P: Params + Clone>(like: &P) -> P {
    let mut z = like.clone();
    z.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x = 0.0));
    z
}

/// Backward of `(x - mean) * inv_std` given the normalized values.
fn normalize_backward(normalized: &[f64], inv_std: f64, d_norm: &[f64]) -> Vec<f64> {
    let n = normalized.len() as f64;
    let mean_d = d_norm.iter().sum::<f64>() / n;
    let mean_dn = dot(d_norm, normalized) / n;
    d_norm
        .iter()
        .zip(normalized)
        .map(|(d, z)| inv_std * (d - mean_d - z * mean_dn))
        .collect()
}

pub fn layer_norm_backward(ln: &LayerNorm, tape: &LayerNormTape, d_out: &[f64], grad: &mut LayerNorm) -> Vector {
    let mut d_norm = Vec::with_capacity(d_out.len());
    for i in 0..d_out.len() {
        grad.gain[i] += d_out[i] * tape.normalized[i];
        grad.bias[i] += d_out[i];
        d_norm.push(d_out[i] * ln.gain[i]);
    }
    normalize_backward(&tape.normalized, tape.inv_std, &d_norm).into()
}

/// Splits the gradient of `x + (prev - x) ⊙ mix` into its three inputs.
fn token_shift_backward(
    d_shifted: &[f64],
    x: &[f64],
    prev: &[f64],
    mix: &[f64],
    d_x: &mut [f64],
    d_prev: &mut [f64],
    d_mix: &mut [f64],
) {
    for i in 0..d_shifted.len() {
        let g = d_shifted[i];
        d_mix[i] += g * (prev[i] - x[i]);
        d_x[i] += g * (1.0 - mix[i]);
        d_prev[i] += g * mix[i];
    }
}

/// Backward of one time-mix step. `carry` holds the gradient flowing into
/// the state this step produced; on return it holds the gradient for the
/// state the step consumed. Returns the gradient of the step input.
pub fn time_mix_backward(
    tm: &TimeMixWeights,
    tape: &TimeMixTape,
    d_out: &[f64],
    carry: &mut LayerStateGrad,
    grad: &mut TimeMixWeights,
) -> Vector {
    let d = d_out.len();
    let n_heads = tape.state_new.len();
    let s = d / n_heads;

    grad.output.add_outer(1.0, d_out, &tape.gn_out);
    let d_gn_out = tm.output.matvec_t(d_out);

    let mut d_r = Vector::zeros(d);
    let mut d_k = Vector::zeros(d);
    let mut d_v = Vector::zeros(d);
    let mut d_w = Vector::zeros(d);
    let mut d_kappa = Vector::zeros(d);
    let mut d_a = Vector::zeros(d);

    for h in 0..n_heads {
        let span = h * s..(h + 1) * s;
        let mut d_norm = Vec::with_capacity(s);
        for j in span.clone() {
            grad.gn_gain[j] += d_gn_out[j] * tape.gn_normalized[j];
            d_norm.push(d_gn_out[j] * tm.gn_gain[j]);
        }
        let d_o = normalize_backward(&tape.gn_normalized[span.clone()], tape.gn_inv_std[h], &d_norm);

        // o = S_new r
        let r = &tape.r[span.clone()];
        let s_new = &tape.state_new[h];
        let g = &mut carry.wkv[h];
        g.add_outer(1.0, &d_o, r);
        d_r[span.clone()].copy_from_slice(&s_new.matvec_t(&d_o));

        // S_new = S_prev ⊙ w (per column) - (S_prev κ̂)(a ⊙ κ̂)ᵀ + v kᵀ
        let s_prev = &tape.state_prev[h];
        let w = &tape.w[span.clone()];
        let kh = &tape.kappa_hat[span.clone()];
        let a = &tape.a[span.clone()];
        let k = &tape.k[span.clone()];
        let v = &tape.v[span.clone()];
        let b: Vec<f64> = a.iter().zip(kh).map(|(a, k)| a * k).collect();
        let sk = s_prev.matvec(kh);
        let gb = g.matvec(&b);
        let d_b: Vec<f64> = g.matvec_t(&sk).iter().map(|x| -x).collect();
        let mut d_kh: Vec<f64> = s_prev.matvec_t(&gb).iter().map(|x| -x).collect();
        for j in 0..s {
            d_kh[j] += d_b[j] * a[j];
            d_a[h * s + j] = d_b[j] * kh[j];
        }
        d_v[span.clone()].copy_from_slice(&g.matvec(k));
        d_k[span.clone()].copy_from_slice(&g.matvec_t(v));
        let mut d_prev = Matrix::zeros(s, s);
        for i in 0..s {
            for j in 0..s {
                let gij = g.get(i, j);
                d_w[h * s + j] += gij * s_prev.get(i, j);
                d_prev.set(i, j, gij * w[j] - gb[i] * kh[j]);
            }
        }
        *g = d_prev;

        // κ̂ = κ / ‖κ‖
        let proj = dot(kh, &d_kh);
        let norm = tape.kappa_norm[h];
        for j in 0..s {
            d_kappa[h * s + j] = (d_kh[j] - kh[j] * proj) / norm;
        }
    }

    // Sigmoid gates.
    let d_zw: Vec<f64> = (0..d).map(|i| d_w[i] * tape.w[i] * (1.0 - tape.w[i])).collect();
    let d_za: Vec<f64> = (0..d).map(|i| d_a[i] * tape.a[i] * (1.0 - tape.a[i])).collect();
    for i in 0..d {
        grad.decay_bias[i] += d_zw[i];
        grad.kappa_bias[i] += d_kappa[i];
        grad.in_context_bias[i] += d_za[i];
    }

    let projections: [(&Matrix, &mut Matrix, &[f64]); 6] = [
        (&tm.receptance, &mut grad.receptance, &d_r[..]),
        (&tm.key, &mut grad.key, &d_k[..]),
        (&tm.value, &mut grad.value, &d_v[..]),
        (&tm.decay, &mut grad.decay, &d_zw[..]),
        (&tm.kappa, &mut grad.kappa, &d_kappa[..]),
        (&tm.in_context_rate, &mut grad.in_context_rate, &d_za[..]),
    ];
    let mixes = [&tm.mix_r, &tm.mix_k, &tm.mix_v, &tm.mix_w, &tm.mix_kappa, &tm.mix_a];
    let mut d_x = Vector::zeros(d);
    let mut d_prev_shift = Vector::zeros(d);
    let mut d_mixes: [Vec<f64>; 6] = Default::default();
    for (idx, (m, gm, dz)) in projections.into_iter().enumerate() {
        gm.add_outer(1.0, dz, &tape.shifted[idx]);
        let d_shifted = m.matvec_t(dz);
        d_mixes[idx] = alloc::vec![0.0; d];
        token_shift_backward(
            &d_shifted,
            &tape.x,
            &tape.prev,
            mixes[idx],
            &mut d_x,
            &mut d_prev_shift,
            &mut d_mixes[idx],
        );
    }
    let grad_mixes = [
        &mut grad.mix_r,
        &mut grad.mix_k,
        &mut grad.mix_v,
        &mut grad.mix_w,
        &mut grad.mix_kappa,
        &mut grad.mix_a,
    ];
    for (gm, dm) in grad_mixes.into_iter().zip(&d_mixes) {
        for (g, x) in gm.iter_mut().zip(dm) {
            *g += x;
        }
    }

    // This step wrote tm_shift = x, so the incoming shift gradient lands on x.
    for i in 0..d {
        d_x[i] += carry.tm_shift[i];
    }
    carry.tm_shift = d_prev_shift;
    d_x
}

/// Backward of one channel-mix step; same carry convention as
/// [`time_mix_backward`].
pub fn channel_mix_backward(
    cm: &ChannelMixWeights,
    tape: &ChannelMixTape,
    d_out: &[f64],
    carry: &mut LayerStateGrad,
    grad: &mut ChannelMixWeights,
) -> Vector {
    grad.down.add_outer(1.0, d_out, &tape.act);
    let d_act = cm.down.matvec_t(d_out);
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(tape.pre.iter())
        .map(|(g, &u)| g * 2.0 * u.max(0.0))
        .collect();
    grad.up.add_outer(1.0, &d_pre, &tape.shifted);
    let d_shifted = cm.up.matvec_t(&d_pre);
    let d = d_out.len();
    let mut d_x = Vector::zeros(d);
    let mut d_prev = Vector::zeros(d);
    token_shift_backward(
        &d_shifted,
        &tape.x,
        &tape.prev,
        &cm.mix,
        &mut d_x,
        &mut d_prev,
        &mut grad.mix,
    );
    for i in 0..d {
        d_x[i] += carry.cm_shift[i];
    }
    carry.cm_shift = d_prev;
    d_x
}

/// Backward of [`block_step`](super::block_step). Returns the gradient of
/// the block input and updates `carry` to refer to the consumed state.
pub fn block_backward(
    block: &BlockWeights,
    tape: &BlockTape,
    d_out: &[f64],
    carry: &mut LayerStateGrad,
    grad: &mut BlockWeights,
) -> Vector {
    let d_h2 = channel_mix_backward(
        &block.channel_mix,
        &tape.channel_mix,
        d_out,
        carry,
        &mut grad.channel_mix,
    );
    let mut d_x1 = layer_norm_backward(&block.ln2, &tape.ln2, &d_h2, &mut grad.ln2);
    for (a, b) in d_x1.iter_mut().zip(d_out) {
        *a += b;
    }
    let d_h1 = time_mix_backward(&block.time_mix, &tape.time_mix, &d_x1, carry, &mut grad.time_mix);
    let mut d_x = layer_norm_backward(&block.ln1, &tape.ln1, &d_h1, &mut grad.ln1);
    for (a, b) in d_x.iter_mut().zip(d_x1.iter()) {
        *a += b;
    }
    d_x
}
