//! One-token steps: layer norm, time mixing, channel mixing, and the block
//! that chains them. Each step can record a tape of its intermediates; the
//! reranker's backward pass consumes those tapes.

use alloc::vec::Vec;

use super::ops::state_update_structured;
use super::state::LayerState;
use super::weights::{BlockWeights, ChannelMixWeights, LayerNorm, TimeMixWeights};
use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, Matrix, Vector};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct LayerNormTape {
    pub normalized: Vector,
    pub inv_std: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TimeMixTape {
    pub x: Vector,
    pub prev: Vector,
    /// Token-shifted inputs in projection order: r, k, v, w, κ, a.
    pub shifted: [Vector; 6],
    pub r: Vector,
    pub k: Vector,
    pub v: Vector,
    pub w: Vector,
    pub kappa_norm: Vec<f64>,
    pub kappa_hat: Vector,
    pub a: Vector,
    pub state_prev: Vec<Matrix>,
    pub state_new: Vec<Matrix>,
    pub gn_normalized: Vector,
    pub gn_inv_std: Vec<f64>,
    pub gn_out: Vector,
}

#[derive(Debug, Clone, Default)]
pub struct ChannelMixTape {
    pub x: Vector,
    pub prev: Vector,
    pub shifted: Vector,
    pub pre: Vector,
    pub act: Vector,
}

#[derive(Debug, Clone, Default)]
pub struct BlockTape {
    pub ln1: LayerNormTape,
    pub time_mix: TimeMixTape,
    pub ln2: LayerNormTape,
    pub channel_mix: ChannelMixTape,
}

fn mean_inv_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LN_EPS))
}

pub fn layer_norm(x: &[f64], ln: &LayerNorm, tape: Option<&mut LayerNormTape>) -> Vector {
    let (mean, inv_std) = mean_inv_std(x);
    let normalized: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(ln.gain.iter().zip(ln.bias.iter()))
        .map(|(n, (g, b))| n * g + b)
        .collect::<Vec<_>>();
    if let Some(t) = tape {
        t.normalized = normalized.into();
        t.inv_std = inv_std;
    }
    out.into()
}

/// `x + (prev - x) ⊙ mix`.
fn token_shift(x: &[f64], diff: &[f64], mix: &[f64]) -> Vector {
    x.iter()
        .zip(diff)
        .zip(mix)
        .map(|((x, d), m)| x + d * m)
        .collect::<Vec<_>>()
        .into()
}

/// Time mixing for one (already normalized) token.
///
/// Updates every head's matrix state and sets `state.tm_shift = x`.
pub fn time_mix_step(
    tm: &TimeMixWeights,
    state: &mut LayerState,
    x: &[f64],
    tape: Option<&mut TimeMixTape>,
) -> Result<Vector> {
    let n_heads = state.n_heads();
    let s = state.head_size();
    let diff: Vec<f64> = state.tm_shift.iter().zip(x).map(|(p, x)| p - x).collect();
    let shifted = [
        token_shift(x, &diff, &tm.mix_r),
        token_shift(x, &diff, &tm.mix_k),
        token_shift(x, &diff, &tm.mix_v),
        token_shift(x, &diff, &tm.mix_w),
        token_shift(x, &diff, &tm.mix_kappa),
        token_shift(x, &diff, &tm.mix_a),
    ];
    let r = tm.receptance.matvec(&shifted[0]);
    let k = tm.key.matvec(&shifted[1]);
    let v = tm.value.matvec(&shifted[2]);
    let mut w = tm.decay.matvec(&shifted[3]);
    for (wi, b) in w.iter_mut().zip(tm.decay_bias.iter()) {
        *wi = sigmoid(*wi + b);
    }
    let mut kappa_hat = tm.kappa.matvec(&shifted[4]);
    for (ki, b) in kappa_hat.iter_mut().zip(tm.kappa_bias.iter()) {
        *ki += b;
    }
    let mut a = tm.in_context_rate.matvec(&shifted[5]);
    for (ai, b) in a.iter_mut().zip(tm.in_context_bias.iter()) {
        *ai = sigmoid(*ai + b);
    }

    let recording = tape.is_some();
    let prev = if recording {
        state.tm_shift.clone()
    } else {
        Vector::default()
    };
    let mut kappa_norm = Vec::with_capacity(n_heads);
    let mut state_prev = Vec::new();
    let mut gn_normalized = Vector::zeros(if recording { x.len() } else { 0 });
    let mut gn_inv_std = Vec::new();
    let mut gn_out = Vector::zeros(x.len());
    for h in 0..n_heads {
        let span = h * s..(h + 1) * s;
        let kh = &mut kappa_hat[span.clone()];
        let norm = libm::sqrt(dot(kh, kh));
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NumericFault("kappa normalization"));
        }
        kh.iter_mut().for_each(|z| *z /= norm);
        kappa_norm.push(norm);
        if recording {
            state_prev.push(state.wkv[h].clone());
        }
        state_update_structured(
            &mut state.wkv[h],
            &w[span.clone()],
            &kappa_hat[span.clone()],
            &a[span.clone()],
            &v[span.clone()],
            &k[span.clone()],
        );
        let o = state.wkv[h].matvec(&r[span.clone()]);
        let (mean, inv_std) = mean_inv_std(&o);
        for (j, oj) in o.iter().enumerate() {
            let nj = (oj - mean) * inv_std;
            if recording {
                gn_normalized[h * s + j] = nj;
            }
            gn_out[h * s + j] = nj * tm.gn_gain[h * s + j];
        }
        if recording {
            gn_inv_std.push(inv_std);
        }
    }
    let y = tm.output.matvec(&gn_out);
    if !y.is_finite() || !state.wkv.iter().all(Matrix::is_finite) {
        return Err(Error::NumericFault("time mix"));
    }
    state.tm_shift = Vector::from(x);
    if let Some(t) = tape {
        *t = TimeMixTape {
            x: Vector::from(x),
            prev,
            shifted,
            r,
            k,
            v,
            w,
            kappa_norm,
            kappa_hat,
            a,
            state_prev,
            state_new: state.wkv.clone(),
            gn_normalized,
            gn_inv_std,
            gn_out,
        };
    }
    Ok(y)
}

/// Squared-ReLU channel mixing for one (already normalized) token.
pub fn channel_mix_step(
    cm: &ChannelMixWeights,
    state: &mut LayerState,
    x: &[f64],
    tape: Option<&mut ChannelMixTape>,
) -> Result<Vector> {
    let diff: Vec<f64> = state.cm_shift.iter().zip(x).map(|(p, x)| p - x).collect();
    let shifted = token_shift(x, &diff, &cm.mix);
    let pre = cm.up.matvec(&shifted);
    let act: Vector = pre
        .iter()
        .map(|&u| {
            let r = u.max(0.0);
            r * r
        })
        .collect::<Vec<_>>()
        .into();
    let y = cm.down.matvec(&act);
    if !y.is_finite() {
        return Err(Error::NumericFault("channel mix"));
    }
    if let Some(t) = tape {
        *t = ChannelMixTape {
            x: Vector::from(x),
            prev: state.cm_shift.clone(),
            shifted,
            pre,
            act,
        };
    }
    state.cm_shift = Vector::from(x);
    Ok(y)
}

/// Pre-norm residual block: `x + TM(LN1 x)`, then `+ CM(LN2 ·)`.
pub fn block_step(
    block: &BlockWeights,
    state: &mut LayerState,
    x: &[f64],
    mut tape: Option<&mut BlockTape>,
) -> Result<Vector> {
    let h1 = layer_norm(x, &block.ln1, tape.as_deref_mut().map(|t| &mut t.ln1));
    let y1 = time_mix_step(
        &block.time_mix,
        state,
        &h1,
        tape.as_deref_mut().map(|t| &mut t.time_mix),
    )?;
    let x1: Vec<f64> = x.iter().zip(y1.iter()).map(|(a, b)| a + b).collect();
    let h2 = layer_norm(&x1, &block.ln2, tape.as_deref_mut().map(|t| &mut t.ln2));
    let y2 = channel_mix_step(&block.channel_mix, state, &h2, tape.map(|t| &mut t.channel_mix))?;
    Ok(x1.iter().zip(y2.iter()).map(|(a, b)| a + b).collect::<Vec<_>>().into())
}
