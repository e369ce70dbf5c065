use alloc::{format, vec::Vec};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Fnv64, Params};
use crate::tensor::{Matrix, Rng, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vector,
    pub bias: Vector,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: Vector::from(alloc::vec![1.0; d]),
            bias: Vector::zeros(d),
        }
    }
}

/// Time-mix parameters. Projection order matters: it is the file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMixWeights {
    pub mix_r: Vector,
    pub mix_k: Vector,
    pub mix_v: Vector,
    pub mix_w: Vector,
    pub mix_kappa: Vector,
    pub mix_a: Vector,
    pub receptance: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub decay: Matrix,
    pub decay_bias: Vector,
    pub kappa: Matrix,
    pub kappa_bias: Vector,
    pub in_context_rate: Matrix,
    pub in_context_bias: Vector,
    /// Per-head group-norm gain on the readout.
    pub gn_gain: Vector,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixWeights {
    pub mix: Vector,
    pub up: Matrix,
    pub down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub time_mix: TimeMixWeights,
    pub ln2: LayerNorm,
    pub channel_mix: ChannelMixWeights,
}

impl BlockWeights {
    /// Random block of width `d` with channel-mix width `d_ff`.
    pub fn init(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / libm::sqrt(d as f64);
        let mix = |rng: &mut Rng| Vector::from((0..d).map(|_| rng.uniform()).collect::<Vec<_>>());
        let time_mix = TimeMixWeights {
            mix_r: mix(rng),
            mix_k: mix(rng),
            mix_v: mix(rng),
            mix_w: mix(rng),
            mix_kappa: mix(rng),
            mix_a: mix(rng),
            receptance: rng.matrix(d, d, s),
            key: rng.matrix(d, d, s),
            value: rng.matrix(d, d, s),
            decay: rng.matrix(d, d, s),
            // sigmoid(1..3) keeps per-channel decay in roughly (0.73, 0.95).
            decay_bias: Vector::from((0..d).map(|_| rng.uniform_in(1.0, 3.0)).collect::<Vec<_>>()),
            kappa: rng.matrix(d, d, s),
            kappa_bias: rng.vector(d, 1.0),
            in_context_rate: rng.matrix(d, d, s),
            in_context_bias: rng.vector(d, 1.0),
            gn_gain: Vector::from(alloc::vec![1.0; d]),
            output: rng.matrix(d, d, s),
        };
        let channel_mix = ChannelMixWeights {
            mix: mix(rng),
            up: rng.matrix(d_ff, d, s),
            down: rng.matrix(d, d_ff, 1.0 / libm::sqrt(d_ff as f64)),
        };
        BlockWeights {
            ln1: LayerNorm::identity(d),
            time_mix,
            ln2: LayerNorm::identity(d),
            channel_mix,
        }
    }

    pub fn width(&self) -> usize {
        self.ln1.gain.dim()
    }

    fn check(&self, d: usize, d_ff: usize) -> Result<()> {
        let mut ok = true;
        for v in [
            &self.ln1.gain,
            &self.ln1.bias,
            &self.ln2.gain,
            &self.ln2.bias,
            &self.time_mix.mix_r,
            &self.time_mix.mix_k,
            &self.time_mix.mix_v,
            &self.time_mix.mix_w,
            &self.time_mix.mix_kappa,
            &self.time_mix.mix_a,
            &self.time_mix.decay_bias,
            &self.time_mix.kappa_bias,
            &self.time_mix.in_context_bias,
            &self.time_mix.gn_gain,
            &self.channel_mix.mix,
        ] {
            ok &= v.dim() == d;
        }
        for m in [
            &self.time_mix.receptance,
            &self.time_mix.key,
            &self.time_mix.value,
            &self.time_mix.decay,
            &self.time_mix.kappa,
            &self.time_mix.in_context_rate,
            &self.time_mix.output,
        ] {
            ok &= m.shape() == (d, d);
        }
        ok &= self.channel_mix.up.shape() == (d_ff, d);
        ok &= self.channel_mix.down.shape() == (d, d_ff);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("block weights inconsistent with width {d}")))
        }
    }
}

impl Params for BlockWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        let tm = &self.time_mix;
        f(&self.ln1.gain);
        f(&self.ln1.bias);
        f(&tm.mix_r);
        f(&tm.mix_k);
        f(&tm.mix_v);
        f(&tm.mix_w);
        f(&tm.mix_kappa);
        f(&tm.mix_a);
        f(tm.receptance.data());
        f(tm.key.data());
        f(tm.value.data());
        f(tm.decay.data());
        f(&tm.decay_bias);
        f(tm.kappa.data());
        f(&tm.kappa_bias);
        f(tm.in_context_rate.data());
        f(&tm.in_context_bias);
        f(&tm.gn_gain);
        f(tm.output.data());
        f(&self.ln2.gain);
        f(&self.ln2.bias);
        f(&self.channel_mix.mix);
        f(self.channel_mix.up.data());
        f(self.channel_mix.down.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        let tm = &mut self.time_mix;
        f(&mut self.ln1.gain);
        f(&mut self.ln1.bias);
        f(&mut tm.mix_r);
        f(&mut tm.mix_k);
        f(&mut tm.mix_v);
        f(&mut tm.mix_w);
        f(&mut tm.mix_kappa);
        f(&mut tm.mix_a);
        f(tm.receptance.data_mut());
        f(tm.key.data_mut());
        f(tm.value.data_mut());
        f(tm.decay.data_mut());
        f(&mut tm.decay_bias);
        f(tm.kappa.data_mut());
        f(&mut tm.kappa_bias);
        f(tm.in_context_rate.data_mut());
        f(&mut tm.in_context_bias);
        f(&mut tm.gn_gain);
        f(tm.output.data_mut());
        f(&mut self.ln2.gain);
        f(&mut self.ln2.bias);
        f(&mut self.channel_mix.mix);
        f(self.channel_mix.up.data_mut());
        f(self.channel_mix.down.data_mut());
    }
}

/// Backbone weights. The fingerprint (config + weight checksum) is kept in
/// sync with the values; it stamps every state the model produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: Matrix,
    blocks: Vec<BlockWeights>,
    ln_out: LayerNorm,
    fingerprint: u64,
}

impl ModelWeights {
    /// Deterministic random initialization from `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let embedding = rng.matrix(config.vocab_size, d, 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::init(d, config.d_ff(), &mut rng))
            .collect();
        let mut w = ModelWeights {
            config,
            embedding,
            blocks,
            ln_out: LayerNorm::identity(d),
            fingerprint: 0,
        };
        w.round_to_precision();
        w.refresh_fingerprint();
        Ok(w)
    }

    /// Assemble from loaded tensors, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Matrix,
        blocks: Vec<BlockWeights>,
        ln_out: LayerNorm,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if embedding.shape() != (config.vocab_size, d) {
            return Err(Error::Shape(format!(
                "embedding {:?}, expected ({}, {d})",
                embedding.shape(),
                config.vocab_size
            )));
        }
        if blocks.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} blocks for {} layers",
                blocks.len(),
                config.n_layers
            )));
        }
        for b in &blocks {
            b.check(d, config.d_ff())?;
        }
        if ln_out.gain.dim() != d || ln_out.bias.dim() != d {
            return Err(Error::Shape("final layer norm width".into()));
        }
        let mut w = ModelWeights {
            config,
            embedding,
            blocks,
            ln_out,
            fingerprint: 0,
        };
        w.refresh_fingerprint();
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn ln_out(&self) -> &LayerNorm {
        &self.ln_out
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn round_to_precision(&mut self) {
        let p = self.config.precision;
        self.visit_mut(&mut |t| t.iter_mut().for_each(|x| *x = p.round(*x)));
    }

    fn refresh_fingerprint(&mut self) {
        let mut h = Fnv64::new();
        self.config.hash_into(&mut h);
        h.write_u64(self.checksum());
        self.fingerprint = h.finish();
    }

    fn visit_raw_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.embedding.data_mut());
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.ln_out.gain);
        f(&mut self.ln_out.bias);
    }
}

impl Params for ModelWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.embedding.data());
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.ln_out.gain);
        f(&self.ln_out.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.visit_raw_mut(f);
        self.refresh_fingerprint();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::tiny();
        let a = ModelWeights::init(c, 7).unwrap();
        let b = ModelWeights::init(c, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.checksum(), ModelWeights::init(c, 8).unwrap().checksum());
    }

    #[test]
    fn golden_checksum_tiny_seed7() {
        let w = ModelWeights::init(ModelConfig::tiny(), 7).unwrap();
        assert_eq!(w.checksum(), GOLDEN_TINY_SEED7);
    }

    const GOLDEN_TINY_SEED7: u64 = 4510571266777689965;

    #[test]
    fn f32_precision_rounds_weights() {
        let mut c = ModelConfig::tiny();
        c.precision = crate::tensor::Precision::F32;
        let w = ModelWeights::init(c, 7).unwrap();
        let mut all_f32 = true;
        w.visit(&mut |t| all_f32 &= t.iter().all(|&x| x as f32 as f64 == x));
        assert!(all_f32);
    }

    #[test]
    fn mutation_refreshes_fingerprint() {
        let mut w = ModelWeights::init(ModelConfig::tiny(), 1).unwrap();
        let before = w.fingerprint();
        w.with_param_mut(0, &mut |x| *x += 1.0);
        assert_ne!(before, w.fingerprint());
    }

    #[test]
    fn from_parts_rejects_bad_shapes() {
        let w = ModelWeights::init(ModelConfig::tiny(), 1).unwrap();
        let r = ModelWeights::from_parts(
            *w.config(),
            Matrix::zeros(3, 3),
            w.blocks().to_vec(),
            w.ln_out().clone(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
