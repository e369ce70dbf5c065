//! State-based reranker: scores a (document, query) pair from the state the
//! backbone reaches after reading the document and then the query.
//!
//! Each selected layer's flattened matrix state is projected to one width
//! `d_r` token; the short depth-ordered token sequence runs through small
//! recurrent blocks, is mean-pooled, and a linear head plus sigmoid gives
//! the relevance probability.

use alloc::{format, string::String, vec::Vec};
use core::slice;

use crate::embedder::insert_eos;
use crate::error::{Error, Result};
use crate::params::{Fnv64, Params};
use crate::rwkv::{
    advance, block_backward, block_step, extract_states, zeroed, BlockTape, BlockWeights, ForwardStats, LayerState,
    LayerStateGrad, ModelConfig, ModelWeights, StateStack, Token,
};
use crate::state_store::{select_layers, CacheEntry, LayerSelection};
use crate::tensor::{dot, sigmoid, Matrix, Rng, Vector};

pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RerankerConfig {
    /// Depth of the backbone whose states are consumed.
    pub source_layers: usize,
    pub source_heads: usize,
    pub source_head_size: usize,
    /// Resolved backbone layers read by the reranker, strictly increasing.
    pub layers: Vec<usize>,
    pub n_heads: usize,
    pub head_size: usize,
    pub n_mix_blocks: usize,
}

impl RerankerConfig {
    /// Internal width 16 (two heads of 8) and one mixing block.
    pub fn new(source: &ModelConfig, selection: &LayerSelection) -> Result<Self> {
        let cfg = RerankerConfig {
            source_layers: source.n_layers,
            source_heads: source.n_heads,
            source_head_size: source.head_size,
            layers: select_layers(source.n_layers, selection)?,
            n_heads: 2,
            head_size: 8,
            n_mix_blocks: 1,
        };
        Ok(cfg)
    }

    pub fn d_r(&self) -> usize {
        self.n_heads * self.head_size
    }

    /// Length of one flattened layer state.
    pub fn state_width(&self) -> usize {
        self.source_heads * self.source_head_size * self.source_head_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_r() == 0 || self.n_mix_blocks == 0 || self.state_width() == 0 {
            return Err(Error::InvalidArgument("reranker dimensions must be >= 1".into()));
        }
        select_layers(self.source_layers, &LayerSelection::Explicit(self.layers.clone()))?;
        Ok(())
    }

    pub fn hash_into(&self, h: &mut Fnv64) {
        for x in [
            self.source_layers,
            self.source_heads,
            self.source_head_size,
            self.n_heads,
            self.head_size,
            self.n_mix_blocks,
            self.layers.len(),
        ] {
            h.write_u64(x as u64);
        }
        for &l in &self.layers {
            h.write_u64(l as u64);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerWeights {
    config: RerankerConfig,
    /// One `d_r × (H·S²)` projection per selected layer.
    pub projections: Vec<Matrix>,
    pub blocks: Vec<BlockWeights>,
    pub head: Vector,
    pub head_bias: f64,
}

impl RerankerWeights {
    /// Random projections and blocks; the ranking head starts at zero so an
    /// untrained reranker outputs 0.5 everywhere.
    pub fn init(config: RerankerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d_r = config.d_r();
        let scale = 1.0 / libm::sqrt(config.state_width() as f64);
        let projections = config
            .layers
            .iter()
            .map(|_| rng.matrix(d_r, config.state_width(), scale))
            .collect();
        let blocks = (0..config.n_mix_blocks)
            .map(|_| BlockWeights::init(d_r, 4 * d_r, &mut rng))
            .collect();
        Ok(RerankerWeights {
            config,
            projections,
            blocks,
            head: Vector::zeros(d_r),
            head_bias: 0.0,
        })
    }

    pub fn from_parts(
        config: RerankerConfig,
        projections: Vec<Matrix>,
        blocks: Vec<BlockWeights>,
        head: Vector,
        head_bias: f64,
    ) -> Result<Self> {
        config.validate()?;
        let d_r = config.d_r();
        let ok = projections.len() == config.layers.len()
            && projections.iter().all(|p| p.shape() == (d_r, config.state_width()))
            && blocks.len() == config.n_mix_blocks
            && blocks.iter().all(|b| b.width() == d_r)
            && head.dim() == d_r;
        if !ok {
            return Err(Error::Shape("reranker tensors disagree with config".into()));
        }
        Ok(RerankerWeights {
            config,
            projections,
            blocks,
            head,
            head_bias,
        })
    }

    pub fn config(&self) -> &RerankerConfig {
        &self.config
    }
}

impl Params for RerankerWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for p in &self.projections {
            f(p.data());
        }
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.head);
        f(slice::from_ref(&self.head_bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in &mut self.projections {
            f(p.data_mut());
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.head);
        f(slice::from_mut(&mut self.head_bias));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum RerankMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RerankResult {
    pub doc_id: String,
    pub probability: f64,
    pub mode: RerankMode,
}

#[derive(Default)]
struct ScoreTape {
    inputs: Vec<Vec<f64>>,
    /// `blocks[t][b]`
    blocks: Vec<Vec<BlockTape>>,
    pooled: Vector,
}

fn check_stack(rw: &RerankerWeights, stack: &StateStack) -> Result<()> {
    let cfg = &rw.config;
    if stack.layer_indices() != cfg.layers.as_slice() {
        return Err(Error::InvalidArgument(format!(
            "state layers {:?} do not match reranker layers {:?}",
            stack.layer_indices(),
            cfg.layers
        )));
    }
    let shape_ok = stack
        .states()
        .iter()
        .all(|s| s.n_heads() == cfg.source_heads && s.head_size() == cfg.source_head_size);
    if !shape_ok || stack.n_layers() != cfg.source_layers {
        return Err(Error::Shape("state shape does not match reranker source".into()));
    }
    if !stack.is_finite() {
        return Err(Error::NumericFault("reranker input state"));
    }
    Ok(())
}

fn forward(rw: &RerankerWeights, stack: &StateStack, mut tape: Option<&mut ScoreTape>) -> Result<f64> {
    check_stack(rw, stack)?;
    let cfg = &rw.config;
    let d_r = cfg.d_r();
    let mut states: Vec<LayerState> = (0..cfg.n_mix_blocks)
        .map(|_| LayerState::zeros(cfg.n_heads, cfg.head_size))
        .collect();
    let mut pooled = Vector::zeros(d_r);
    for (proj, layer) in rw.projections.iter().zip(stack.states()) {
        let flat = layer.flatten_wkv();
        let mut x = proj.matvec(&flat);
        let mut tapes = Vec::new();
        for (block, st) in rw.blocks.iter().zip(states.iter_mut()) {
            let mut bt = tape.is_some().then(BlockTape::default);
            x = block_step(block, st, &x, bt.as_mut())?;
            tapes.extend(bt);
        }
        for (p, xi) in pooled.iter_mut().zip(x.iter()) {
            *p += xi;
        }
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.push(flat);
            t.blocks.push(tapes);
        }
    }
    let n = cfg.layers.len() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    let logit = dot(&rw.head, &pooled) + rw.head_bias;
    if !logit.is_finite() {
        return Err(Error::NumericFault("reranker logit"));
    }
    if let Some(t) = tape {
        t.pooled = pooled;
    }
    Ok(logit)
}

/// Pre-sigmoid relevance score.
pub fn score_logit(rw: &RerankerWeights, stack: &StateStack) -> Result<f64> {
    forward(rw, stack, None)
}

/// Relevance probability for a stack holding exactly the reranker's layers.
pub fn score_from_state(rw: &RerankerWeights, stack: &StateStack) -> Result<f64> {
    Ok(sigmoid(score_logit(rw, stack)?))
}

/// Logit and its gradient with respect to every reranker parameter, scaled
/// by `d_logit`, accumulated into `grad`.
fn logit_backward(rw: &RerankerWeights, stack: &StateStack, d_logit: f64, grad: &mut RerankerWeights) -> Result<f64> {
    let mut tape = ScoreTape::default();
    let logit = forward(rw, stack, Some(&mut tape))?;
    let cfg = &rw.config;
    for (g, p) in grad.head.iter_mut().zip(tape.pooled.iter()) {
        *g += d_logit * p;
    }
    grad.head_bias += d_logit;
    let k = cfg.layers.len();
    let d_top: Vec<f64> = rw.head.iter().map(|h| d_logit * h / k as f64).collect();
    let mut carries: Vec<LayerStateGrad> = (0..cfg.n_mix_blocks)
        .map(|_| LayerStateGrad::zeros(cfg.n_heads, cfg.head_size))
        .collect();
    for t in (0..k).rev() {
        let mut d_x = Vector::from(d_top.clone());
        for b in (0..cfg.n_mix_blocks).rev() {
            d_x = block_backward(
                &rw.blocks[b],
                &tape.blocks[t][b],
                &d_x,
                &mut carries[b],
                &mut grad.blocks[b],
            );
        }
        grad.projections[t].add_outer(1.0, &d_x, &tape.inputs[t]);
    }
    Ok(logit)
}

/// `−[y ln s + (1−y) ln(1−s)]` with `s` clamped to `[ε, 1−ε]`.
pub fn bce_loss(y: f64, s: f64) -> f64 {
    let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * libm::log(s) + (1.0 - y) * libm::log(1.0 - s))
}

/// Derivative of `bce_loss(y, sigmoid(z))` with respect to `z`.
pub fn bce_grad_logit(y: f64, z: f64) -> f64 {
    sigmoid(z) - y
}

/// Mean BCE over `batch` and its parameter gradient.
pub fn batch_loss_and_grad(rw: &RerankerWeights, batch: &[(&StateStack, f64)]) -> Result<(f64, RerankerWeights)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = zeroed(rw);
    let mut total = 0.0;
    for &(stack, y) in batch {
        let z = score_logit(rw, stack)?;
        total += bce_loss(y, sigmoid(z));
        logit_backward(rw, stack, bce_grad_logit(y, z) / n, &mut grad)?;
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankerTrainOptions {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RerankerTrainOptions {
    fn default() -> Self {
        RerankerTrainOptions {
            lr: 0.05,
            steps: 500,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mini-batch gradient descent on the reranker only. Examples are visited
/// in a seeded shuffled order, reshuffled each pass. Returns the trained
/// weights and the loss of every step's batch before its update.
pub fn train_reranker(
    rw: &RerankerWeights,
    examples: &[(StateStack, f64)],
    opts: RerankerTrainOptions,
) -> Result<(RerankerWeights, Vec<f64>)> {
    if examples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two training examples".into()));
    }
    if !examples.iter().any(|e| e.1 == 1.0) || !examples.iter().any(|e| e.1 == 0.0) {
        return Err(Error::InvalidArgument(
            "training labels must include both 0 and 1".into(),
        ));
    }
    if let Some(bad) = examples.iter().find(|e| e.1 != 0.0 && e.1 != 1.0) {
        return Err(Error::InvalidArgument(format!("label {} is not 0 or 1", bad.1)));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut rw = rw.clone();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(examples.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let (s, y) = &examples[order[cursor]];
            batch.push((s, *y));
            cursor += 1;
        }
        let (loss, grad) = batch_loss_and_grad(&rw, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        if opts.lr != 0.0 {
            rw.sgd_step(&grad, opts.lr);
            if !rw.all_finite() {
                return Err(Error::Diverged { step });
            }
        }
    }
    Ok((rw, losses))
}

fn check_source(model: &ModelWeights, rw: &RerankerWeights) -> Result<()> {
    let (m, r) = (model.config(), rw.config());
    if m.n_layers != r.source_layers || m.n_heads != r.source_heads || m.head_size != r.source_head_size {
        return Err(Error::Shape("reranker was built for a different backbone shape".into()));
    }
    Ok(())
}

/// Resume from the cached document state, read only the query, score the
/// selected layers of the resulting state.
pub fn score_offline(
    model: &ModelWeights,
    entry: &CacheEntry,
    query: &[Token],
    rw: &RerankerWeights,
    stats: &mut ForwardStats,
) -> Result<RerankResult> {
    let stack = offline_state(model, &entry.state, query, rw, stats)?;
    Ok(RerankResult {
        doc_id: entry.doc_id.clone(),
        probability: score_from_state(rw, &stack)?,
        mode: RerankMode::Offline,
    })
}

/// Selected layers of the state after `query` is appended to `cached`.
pub fn offline_state(
    model: &ModelWeights,
    cached: &StateStack,
    query: &[Token],
    rw: &RerankerWeights,
    stats: &mut ForwardStats,
) -> Result<StateStack> {
    check_source(model, rw)?;
    if query.is_empty() {
        return Err(Error::InvalidArgument("query must be non-empty".into()));
    }
    let after = advance(model, query, Some(cached), stats)?;
    extract_states(&after, &rw.config.layers)
}

/// Selected layers of the state after reading the document (with its EOS
/// tokens, as during indexing) and then the query, from zero.
pub fn online_state(
    model: &ModelWeights,
    doc: &[Token],
    query: &[Token],
    rw: &RerankerWeights,
    stats: &mut ForwardStats,
) -> Result<StateStack> {
    check_source(model, rw)?;
    if query.is_empty() {
        return Err(Error::InvalidArgument("query must be non-empty".into()));
    }
    let cfg = model.config();
    let mut seq = insert_eos(doc, cfg.k_eos, cfg.eos_id);
    seq.extend_from_slice(query);
    let after = advance(model, &seq, None, stats)?;
    extract_states(&after, &rw.config.layers)
}

/// Joint pass over document and query from a zero state.
pub fn score_online(
    model: &ModelWeights,
    doc_id: &str,
    doc: &[Token],
    query: &[Token],
    rw: &RerankerWeights,
    stats: &mut ForwardStats,
) -> Result<RerankResult> {
    let stack = online_state(model, doc, query, rw, stats)?;
    Ok(RerankResult {
        doc_id: doc_id.into(),
        probability: score_from_state(rw, &stack)?,
        mode: RerankMode::Online,
    })
}
