use alloc::{format, vec::Vec};

use super::mix::{block_step, layer_norm};
use super::state::StateStack;
use super::weights::ModelWeights;
use super::Token;
use crate::error::{Error, Result};
use crate::tensor::Vector;

/// Work counters for forward passes. Callers own one and pass it down, so
/// concurrent passes never share counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Calls to [`forward_sequence`] / [`advance`].
    pub passes: u64,
    /// Tokens pushed through the full layer stack.
    pub recurrent_steps: u64,
}

impl ForwardStats {
    pub fn merge(&mut self, other: &ForwardStats) {
        self.passes += other.passes;
        self.recurrent_steps += other.recurrent_steps;
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-layer (post norm) vector for every token.
    pub hidden: Vec<Vector>,
    /// The subset of `hidden` at EOS positions, in order.
    pub eos_hidden: Vec<Vector>,
    pub final_state: StateStack,
}

/// Run `tokens` left to right through every layer.
///
/// Starts from `initial` when given (it must be a full-depth stack produced
/// by these weights), otherwise from all-zero states.
pub fn forward_sequence(
    weights: &ModelWeights,
    tokens: &[Token],
    initial: Option<&StateStack>,
    stats: &mut ForwardStats,
) -> Result<ForwardOutput> {
    let mut hidden = Vec::with_capacity(tokens.len());
    let mut eos_hidden = Vec::new();
    let eos = weights.config().eos_id;
    let final_state = run(weights, tokens, initial, stats, |tok, h| {
        if tok == eos {
            eos_hidden.push(h.clone());
        }
        hidden.push(h);
    })?;
    Ok(ForwardOutput {
        hidden,
        eos_hidden,
        final_state,
    })
}

/// Like [`forward_sequence`] but only returns the final state; skips the
/// output norm entirely.
pub fn advance(
    weights: &ModelWeights,
    tokens: &[Token],
    initial: Option<&StateStack>,
    stats: &mut ForwardStats,
) -> Result<StateStack> {
    run_inner(weights, tokens, initial, stats, None::<fn(Token, Vector)>)
}

fn run(
    weights: &ModelWeights,
    tokens: &[Token],
    initial: Option<&StateStack>,
    stats: &mut ForwardStats,
    sink: impl FnMut(Token, Vector),
) -> Result<StateStack> {
    run_inner(weights, tokens, initial, stats, Some(sink))
}

fn run_inner<F: FnMut(Token, Vector)>(
    weights: &ModelWeights,
    tokens: &[Token],
    initial: Option<&StateStack>,
    stats: &mut ForwardStats,
    mut sink: Option<F>,
) -> Result<StateStack> {
    let cfg = weights.config();
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut stack = match initial {
        Some(init) => {
            if init.fingerprint() != weights.fingerprint() {
                return Err(Error::FingerprintMismatch {
                    expected: weights.fingerprint(),
                    found: init.fingerprint(),
                });
            }
            if !init.is_full() || init.n_layers() != cfg.n_layers {
                return Err(Error::PartialStack {
                    have: init.layer_indices().len(),
                    need: cfg.n_layers,
                });
            }
            init.clone()
        }
        None => StateStack::zeros(cfg, weights.fingerprint()),
    };
    let start = stack.token_count();
    stats.passes += 1;
    for (offset, &tok) in tokens.iter().enumerate() {
        let position = start + offset as u64;
        let mut x = Vector::from(weights.embedding().row(tok as usize));
        for (layer, (block, state)) in weights.blocks().iter().zip(stack.states_mut().iter_mut()).enumerate() {
            x = block_step(block, state, &x, None).map_err(|e| match e {
                Error::NumericFault(what) => Error::Numeric {
                    what,
                    layer,
                    token: position,
                },
                other => other,
            })?;
        }
        if let Some(sink) = sink.as_mut() {
            sink(tok, layer_norm(&x, weights.ln_out(), None));
        }
        stats.recurrent_steps += 1;
    }
    stack.set_token_count(start + tokens.len() as u64);
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rwkv::{block_step, extract_states, ModelConfig};
    use crate::tensor::Rng;

    fn tiny() -> ModelWeights {
        ModelWeights::init(ModelConfig::tiny(), 7).unwrap()
    }

    fn random_tokens(rng: &mut Rng, n: usize) -> Vec<Token> {
        (0..n).map(|_| rng.below(256) as Token).collect()
    }

    fn bits(v: &[Vector]) -> Vec<u64> {
        v.iter().flat_map(|x| x.iter().map(|f| f.to_bits())).collect()
    }

    #[test]
    fn resume_is_bit_identical() {
        let w = tiny();
        let mut rng = Rng::new(1);
        let doc = random_tokens(&mut rng, 57);
        let query = random_tokens(&mut rng, 9);
        let mut joint = doc.clone();
        joint.extend_from_slice(&query);
        let mut stats = ForwardStats::default();
        let full = forward_sequence(&w, &joint, None, &mut stats).unwrap();
        let cached = forward_sequence(&w, &doc, None, &mut stats).unwrap().final_state;
        let resumed = forward_sequence(&w, &query, Some(&cached), &mut stats).unwrap();
        assert!(full.final_state.bit_identical(&resumed.final_state));
        assert_eq!(bits(&full.hidden[doc.len()..]), bits(&resumed.hidden));
        assert_eq!(resumed.final_state.token_count(), 66);
    }

    #[test]
    fn zero_injection_equals_fresh_start() {
        let w = tiny();
        let toks = [1, 2, 3, 200];
        let zero = StateStack::zeros(w.config(), w.fingerprint());
        let mut s = ForwardStats::default();
        let a = forward_sequence(&w, &toks, None, &mut s).unwrap();
        let b = forward_sequence(&w, &toks, Some(&zero), &mut s).unwrap();
        assert!(a.final_state.bit_identical(&b.final_state));
        assert_eq!(bits(&a.hidden), bits(&b.hidden));
    }

    #[test]
    fn matches_stepwise_composition() {
        let w = ModelWeights::init(ModelConfig::new(2, 2, 4), 3).unwrap();
        let toks = [10u32, 20, 256];
        let out = forward_sequence(&w, &toks, None, &mut ForwardStats::default()).unwrap();
        let mut states = StateStack::zeros(w.config(), w.fingerprint());
        for (t, &tok) in toks.iter().enumerate() {
            let mut x = Vector::from(w.embedding().row(tok as usize));
            for (l, block) in w.blocks().iter().enumerate() {
                x = block_step(block, &mut states.states_mut()[l], &x, None).unwrap();
            }
            let h = layer_norm(&x, w.ln_out(), None);
            assert_eq!(h, out.hidden[t]);
        }
        assert_eq!(out.eos_hidden, alloc::vec![out.hidden[2].clone()]);
    }

    #[test]
    fn advance_agrees_with_forward() {
        let w = tiny();
        let toks: Vec<Token> = (0..40).collect();
        let mut s = ForwardStats::default();
        let a = advance(&w, &toks, None, &mut s).unwrap();
        let b = forward_sequence(&w, &toks, None, &mut s).unwrap().final_state;
        assert!(a.bit_identical(&b));
        assert_eq!(
            s,
            ForwardStats {
                passes: 2,
                recurrent_steps: 80
            }
        );
    }

    #[test]
    fn rejects_bad_initial_states() {
        let w = tiny();
        let mut s = ForwardStats::default();
        let other = ModelWeights::init(ModelConfig::tiny(), 8).unwrap();
        let foreign = StateStack::zeros(other.config(), other.fingerprint());
        assert!(matches!(
            forward_sequence(&w, &[1], Some(&foreign), &mut s),
            Err(Error::FingerprintMismatch { .. })
        ));
        let full = StateStack::zeros(w.config(), w.fingerprint());
        let partial = extract_states(&full, &[0, 2]).unwrap();
        assert_eq!(
            forward_sequence(&w, &[1], Some(&partial), &mut s).unwrap_err(),
            Error::PartialStack { have: 2, need: 4 }
        );
        assert_eq!(
            forward_sequence(&w, &[], None, &mut s).unwrap_err(),
            Error::EmptySequence
        );
        assert!(matches!(
            forward_sequence(&w, &[999], None, &mut s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn numeric_errors_name_layer_and_token() {
        let w = ModelWeights::init(ModelConfig::new(2, 1, 4), 1).unwrap();
        let blocks: Vec<_> = w
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut b = b.clone();
                if i == 1 {
                    b.time_mix.output.data_mut()[0] = f64::NAN;
                }
                b
            })
            .collect();
        let bad = ModelWeights::from_parts(*w.config(), w.embedding().clone(), blocks, w.ln_out().clone()).unwrap();
        let err = forward_sequence(&bad, &[5, 6], None, &mut ForwardStats::default()).unwrap_err();
        assert_eq!(
            err,
            Error::Numeric {
                what: "time mix",
                layer: 1,
                token: 0
            }
        );
    }

    #[test]
    fn state_size_is_independent_of_length() {
        let w = tiny();
        let mut s = ForwardStats::default();
        let short = advance(&w, &[1; 10], None, &mut s).unwrap();
        let long = advance(&w, &[1; 1000], None, &mut s).unwrap();
        assert_eq!(short.value_count(), long.value_count());
        // L · (H·S² + 2·d) = 4 · (4·256 + 128)
        assert_eq!(short.value_count(), 4 * (4 * 256 + 128));
    }

    #[test]
    fn long_random_sequence_stays_bounded() {
        let w = tiny();
        let mut rng = Rng::new(5);
        let toks = random_tokens(&mut rng, 4096);
        let st = advance(&w, &toks, None, &mut ForwardStats::default()).unwrap();
        let peak = st.states().iter().fold(0.0, |m, l| f64::max(m, l.max_abs()));
        assert!(st.is_finite());
        assert!(peak < 1e6, "peak state entry {peak}");
    }
}
