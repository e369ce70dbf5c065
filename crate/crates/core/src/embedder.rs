//! Embedding head on top of the backbone, plus the contrastive objective.
//!
//! `embed` appends EOS tokens, averages their final hidden vectors, passes
//! the mean through a two-layer tanh head and L2-normalizes. The same pass
//! returns the full-depth state stack, which is what gets cached.

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rwkv::{forward_sequence, ForwardStats, ModelWeights, StateStack, Token};
use crate::tensor::{dot, l2_normalize, Matrix, Rng, Vector};

pub const DEFAULT_TAU: f64 = 0.05;

/// `tokens` followed by `k_eos` copies of `eos_id`.
pub fn insert_eos(tokens: &[Token], k_eos: usize, eos_id: Token) -> Vec<Token> {
    let mut out = Vec::with_capacity(tokens.len() + k_eos);
    out.extend_from_slice(tokens);
    out.extend(core::iter::repeat_n(eos_id, k_eos));
    out
}

/// Arithmetic mean of the EOS hidden vectors.
pub fn pool_eos(eos_hidden: &[Vector]) -> Result<Vector> {
    let first = eos_hidden
        .first()
        .ok_or_else(|| Error::InvalidArgument("no EOS hidden vectors to pool".into()))?;
    let mut acc = Vector::zeros(first.dim());
    for h in eos_hidden {
        if h.dim() != acc.dim() {
            return Err(Error::Shape(format!("pooling {} and {}", h.dim(), acc.dim())));
        }
        for (a, x) in acc.iter_mut().zip(h.iter()) {
            *a += x;
        }
    }
    let n = eos_hidden.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `z = W2 tanh(W1 p + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHeadWeights {
    pub hidden: Matrix,
    pub hidden_bias: Vector,
    pub out: Matrix,
    pub out_bias: Vector,
}

impl EmbeddingHeadWeights {
    pub fn init(d_model: usize, d_emb: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let s = 1.0 / libm::sqrt(d_model as f64);
        EmbeddingHeadWeights {
            hidden: rng.matrix(d_model, d_model, s),
            hidden_bias: Vector::zeros(d_model),
            out: rng.matrix(d_emb, d_model, s),
            out_bias: Vector::zeros(d_emb),
        }
    }

    pub fn d_model(&self) -> usize {
        self.hidden.cols()
    }

    pub fn d_emb(&self) -> usize {
        self.out.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let e = self.d_emb();
        if self.hidden.shape() != (d, d)
            || self.hidden_bias.dim() != d
            || self.out.shape() != (e, d)
            || self.out_bias.dim() != e
        {
            return Err(Error::Shape("embedding head tensors disagree".into()));
        }
        Ok(())
    }

    /// Returns the pre-normalization output and the tanh activations.
    fn project(&self, pooled: &[f64]) -> (Vector, Vector) {
        let mut h = self.hidden.matvec(pooled);
        for (x, b) in h.iter_mut().zip(self.hidden_bias.iter()) {
            *x = libm::tanh(*x + b);
        }
        let mut z = self.out.matvec(&h);
        for (x, b) in z.iter_mut().zip(self.out_bias.iter()) {
            *x += b;
        }
        (z, h)
    }

    /// Pooled vector to unit embedding.
    pub fn apply(&self, pooled: &[f64]) -> Result<Embedding> {
        if pooled.len() != self.d_model() {
            return Err(Error::Shape(format!(
                "pooled width {} vs head input {}",
                pooled.len(),
                self.d_model()
            )));
        }
        let (z, _) = self.project(pooled);
        Ok(Embedding {
            values: l2_normalize(&z)?,
            normalized: true,
        })
    }
}

impl Params for EmbeddingHeadWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.hidden.data());
        f(&self.hidden_bias);
        f(self.out.data());
        f(&self.out_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.hidden.data_mut());
        f(&mut self.hidden_bias);
        f(self.out.data_mut());
        f(&mut self.out_bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vector,
    pub normalized: bool,
}

/// Square matrix of similarities `s(q_i, d_j)` with positives on the
/// diagonal, plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    scores: Matrix,
    tau: f64,
}

impl SimMatrix {
    pub fn new(scores: Matrix, tau: f64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 || tau.is_infinite() {
            return Err(Error::InvalidArgument(format!("temperature must be > 0 (got {tau})")));
        }
        if scores.rows() != scores.cols() || scores.rows() == 0 {
            return Err(Error::Shape(format!(
                "similarity matrix must be square and non-empty, got {:?}",
                scores.shape()
            )));
        }
        if !scores.data().iter().all(|s| (-1.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("similarities must lie in [-1, 1]".into()));
        }
        Ok(SimMatrix { scores, tau })
    }

    pub fn batch(&self) -> usize {
        self.scores.rows()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }
}

fn log_sum_exp(row: &[f64], tau: f64) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
    m + libm::log(row.iter().map(|&s| libm::exp(s / tau - m)).sum::<f64>())
}

/// `-1/B Σ_i log(exp(s_ii/τ) / Σ_j exp(s_ij/τ))`, via log-sum-exp.
pub fn infonce_loss(sims: &SimMatrix) -> f64 {
    let b = sims.batch();
    let tau = sims.tau;
    let total: f64 = (0..b)
        .map(|i| {
            let row = sims.scores.row(i);
            log_sum_exp(row, tau) - row[i] / tau
        })
        .sum();
    total / b as f64
}

/// `∂L/∂s_ij = (softmax_i(s/τ)_j - [i = j]) / (B τ)`.
pub fn infonce_grad(sims: &SimMatrix) -> Matrix {
    let b = sims.batch();
    let tau = sims.tau;
    let mut g = Matrix::zeros(b, b);
    for i in 0..b {
        let row = sims.scores.row(i);
        let lse = log_sum_exp(row, tau);
        for j in 0..b {
            let p = libm::exp(row[j] / tau - lse);
            let target = if i == j { 1.0 } else { 0.0 };
            g.set(i, j, (p - target) / (b as f64 * tau));
        }
    }
    g
}

/// Embed `tokens`, returning the unit embedding and the full-depth state
/// reached after the trailing EOS tokens.
pub fn embed(
    model: &ModelWeights,
    head: &EmbeddingHeadWeights,
    tokens: &[Token],
    stats: &mut ForwardStats,
) -> Result<(Embedding, StateStack)> {
    let (pooled, state) = pooled_hidden(model, tokens, stats)?;
    Ok((head.apply(&pooled)?, state))
}

/// EOS-pooled final hidden vector and the final state.
pub fn pooled_hidden(model: &ModelWeights, tokens: &[Token], stats: &mut ForwardStats) -> Result<(Vector, StateStack)> {
    let cfg = model.config();
    let seq = insert_eos(tokens, cfg.k_eos, cfg.eos_id);
    let out = forward_sequence(model, &seq, None, stats)?;
    Ok((pool_eos(&out.eos_hidden)?, out.final_state))
}

/// Query/document token pairs; row `i` of the batch is a positive pair and
/// every other document is an in-batch negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub queries: Vec<Vec<Token>>,
    pub docs: Vec<Vec<Token>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTrainOptions {
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for HeadTrainOptions {
    fn default() -> Self {
        HeadTrainOptions {
            tau: DEFAULT_TAU,
            lr: 0.05,
            steps: 200,
        }
    }
}

/// Pooled backbone outputs for one batch; the backbone is frozen so these
/// are computed once.
#[derive(Debug, Clone)]
pub struct PooledBatch {
    pub queries: Vec<Vector>,
    pub docs: Vec<Vector>,
}

impl PooledBatch {
    pub fn from_tokens(model: &ModelWeights, batch: &PairBatch, stats: &mut ForwardStats) -> Result<Self> {
        if batch.queries.len() != batch.docs.len() {
            return Err(Error::Shape(format!(
                "{} queries vs {} documents",
                batch.queries.len(),
                batch.docs.len()
            )));
        }
        let pool = |toks: &Vec<Token>, stats: &mut ForwardStats| pooled_hidden(model, toks, stats).map(|p| p.0);
        Ok(PooledBatch {
            queries: batch.queries.iter().map(|q| pool(q, stats)).collect::<Result<_>>()?,
            docs: batch.docs.iter().map(|d| pool(d, stats)).collect::<Result<_>>()?,
        })
    }
}

/// InfoNCE loss of the head on one pooled batch, and its gradient with
/// respect to every head parameter.
pub fn head_loss_and_grad(
    head: &EmbeddingHeadWeights,
    batch: &PooledBatch,
    tau: f64,
) -> Result<(f64, EmbeddingHeadWeights)> {
    let b = batch.queries.len();
    if b < 2 || batch.docs.len() != b {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs >= 2 aligned pairs (got {b})"
        )));
    }
    struct Fwd {
        input: Vector,
        act: Vector,
        z_norm: f64,
        unit: Vector,
    }
    let run = |p: &Vector| -> Result<Fwd> {
        let (z, act) = head.project(p);
        let z_norm = z.norm();
        Ok(Fwd {
            input: p.clone(),
            act,
            z_norm,
            unit: l2_normalize(&z)?,
        })
    };
    let qs: Vec<Fwd> = batch.queries.iter().map(run).collect::<Result<_>>()?;
    let ds: Vec<Fwd> = batch.docs.iter().map(run).collect::<Result<_>>()?;

    let mut scores = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            scores.set(i, j, dot(&qs[i].unit, &ds[j].unit).clamp(-1.0, 1.0));
        }
    }
    let sims = SimMatrix::new(scores, tau)?;
    let loss = infonce_loss(&sims);
    let g = infonce_grad(&sims);

    let mut grad = EmbeddingHeadWeights {
        hidden: Matrix::zeros(head.hidden.rows(), head.hidden.cols()),
        hidden_bias: Vector::zeros(head.hidden_bias.dim()),
        out: Matrix::zeros(head.out.rows(), head.out.cols()),
        out_bias: Vector::zeros(head.out_bias.dim()),
    };
    let e = head.d_emb();
    let mut backprop = |f: &Fwd, d_unit: &[f64]| {
        // Through the normalization: (I - ê êᵀ) / ‖z‖.
        let proj = dot(&f.unit, d_unit);
        let dz: Vec<f64> = (0..e).map(|k| (d_unit[k] - f.unit[k] * proj) / f.z_norm).collect();
        grad.out.add_outer(1.0, &dz, &f.act);
        for (gb, x) in grad.out_bias.iter_mut().zip(&dz) {
            *gb += x;
        }
        let dh = head.out.matvec_t(&dz);
        let du: Vec<f64> = dh.iter().zip(f.act.iter()).map(|(d, h)| d * (1.0 - h * h)).collect();
        grad.hidden.add_outer(1.0, &du, &f.input);
        for (gb, x) in grad.hidden_bias.iter_mut().zip(&du) {
            *gb += x;
        }
    };
    for i in 0..b {
        let mut d_q = Vector::zeros(e);
        for j in 0..b {
            crate::tensor::axpy(g.get(i, j), &ds[j].unit, &mut d_q);
        }
        backprop(&qs[i], &d_q);
    }
    for j in 0..b {
        let mut d_d = Vector::zeros(e);
        for i in 0..b {
            crate::tensor::axpy(g.get(i, j), &qs[i].unit, &mut d_d);
        }
        backprop(&ds[j], &d_d);
    }
    Ok((loss, grad))
}

/// Gradient descent on the head only, cycling through `batches`.
///
/// Returns the trained head and the loss observed at every step (before
/// that step's update), followed by the loss on the first batch after the
/// last update, so the first and last entries are directly comparable.
pub fn train_head_toy(
    model: &ModelWeights,
    head: &EmbeddingHeadWeights,
    batches: &[PairBatch],
    opts: HeadTrainOptions,
    stats: &mut ForwardStats,
) -> Result<(EmbeddingHeadWeights, Vec<f64>)> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no training batches".into()));
    }
    head.validate()?;
    let pooled: Vec<PooledBatch> = batches
        .iter()
        .map(|b| PooledBatch::from_tokens(model, b, stats))
        .collect::<Result<_>>()?;
    let mut head = head.clone();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..opts.steps {
        let (loss, grad) = head_loss_and_grad(&head, &pooled[step % pooled.len()], opts.tau)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        if opts.lr != 0.0 {
            head.sgd_step(&grad, opts.lr);
        }
        if !head.all_finite() {
            return Err(Error::Diverged { step });
        }
    }
    let (final_loss, _) = head_loss_and_grad(&head, &pooled[0], opts.tau)?;
    losses.push(final_loss);
    Ok((head, losses))
}
