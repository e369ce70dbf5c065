//! Reranking latency benchmark: offline (cached state + query), online
//! (document and query from zero) and a quadratic attention reference.
//!
//! Memory columns are analytic byte counts, not measured allocations.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use staterank_core::embedder::{embed, insert_eos, EmbeddingHeadWeights};
use staterank_core::reranker::{score_offline, score_online, RerankerConfig, RerankerWeights};
use staterank_core::rwkv::{advance, ForwardStats, ModelConfig, ModelWeights, StateStack, Token, BYTE_VOCAB};
use staterank_core::state_store::{memory_report, CacheEntry, LayerSelection};
use staterank_core::tensor::{dot, sigmoid, Matrix, Rng, Vector};

use crate::error::{Error, Result};
use crate::formats::cache::{write_cache, CacheLayout, CacheReader};
use crate::formats::Dtype;
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Offline,
    Online,
    Quadratic,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Offline => "offline",
            BenchMode::Online => "online",
            BenchMode::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub layers: LayerSelection,
    pub doc_lens: Vec<usize>,
    pub query_len: usize,
    /// Pairs per offline/online measurement.
    pub batch: usize,
    /// Pairs per quadratic measurement; each pair costs O(T²).
    pub quadratic_batch: usize,
    pub modes: Vec<BenchMode>,
    /// Best-of-N timing.
    pub repeats: usize,
    pub seed: u64,
    /// Once exceeded, remaining measurements are skipped.
    pub time_budget: Option<Duration>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::tiny(),
            layers: LayerSelection::Full,
            doc_lens: vec![512, 1024, 2048, 4096],
            query_len: 64,
            batch: 100,
            quadratic_batch: 4,
            modes: vec![BenchMode::Offline, BenchMode::Online, BenchMode::Quadratic],
            repeats: 3,
            seed: 0,
            time_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub doc_len: usize,
    pub total_ms: f64,
    pub embed_ms: f64,
    pub rerank_ms: f64,
    pub state_bytes: u64,
    pub kv_bytes_model: u64,
    pub throughput_pairs_per_s: f64,
    /// Pairs in one timed run.
    pub pairs: usize,
    /// Recurrent steps taken by one timed run (0 for the quadratic scorer).
    pub recurrent_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `(mode, doc_len)` pairs dropped because the time budget ran out.
    pub skipped: Vec<(BenchMode, usize)>,
}

impl BenchReport {
    pub fn row(&self, mode: BenchMode, doc_len: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode && r.doc_len == doc_len)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mode,doc_len,total_ms,embed_ms,rerank_ms,state_bytes,kv_bytes_model,throughput_pairs_per_s\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.3},{:.3},{:.3},{},{},{:.2}",
                r.mode.name(),
                r.doc_len,
                r.total_ms,
                r.embed_ms,
                r.rerank_ms,
                r.state_bytes,
                r.kv_bytes_model,
                r.throughput_pairs_per_s
            );
        }
        s
    }
}

/// Single-head causal softmax attention over the whole sequence at the
/// backbone width, mean-pooled into a logit. Cost grows with T².
#[derive(Debug, Clone)]
pub struct QuadraticScorer {
    embedding: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    head: Vector,
}

impl QuadraticScorer {
    pub fn new(d_model: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let s = 1.0 / (d_model as f64).sqrt();
        QuadraticScorer {
            embedding: rng.matrix(vocab, d_model, 1.0),
            wq: rng.matrix(d_model, d_model, s),
            wk: rng.matrix(d_model, d_model, s),
            wv: rng.matrix(d_model, d_model, s),
            head: rng.vector(d_model, s),
        }
    }

    pub fn score(&self, tokens: &[Token]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(staterank_core::Error::EmptySequence.into());
        }
        let d = self.head.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut qs = Vec::with_capacity(tokens.len());
        let mut ks = Vec::with_capacity(tokens.len());
        let mut vs = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.embedding.rows() {
                return Err(Error::Data(format!("token {t} outside vocabulary")));
            }
            let x = self.embedding.row(t as usize);
            qs.push(self.wq.matvec(x));
            ks.push(self.wk.matvec(x));
            vs.push(self.wv.matvec(x));
        }
        let mut pooled = vec![0.0; d];
        let mut weights = Vec::with_capacity(tokens.len());
        for (i, q) in qs.iter().enumerate() {
            weights.clear();
            weights.extend(ks[..=i].iter().map(|k| dot(q, k) * scale));
            let m = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - m).exp();
                z += *w;
            }
            for (w, v) in weights.iter().zip(&vs) {
                let a = w / z;
                for (p, x) in pooled.iter_mut().zip(v.iter()) {
                    *p += a * x;
                }
            }
        }
        let n = tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(sigmoid(dot(&self.head, &pooled)))
    }
}

fn random_tokens(rng: &mut Rng, n: usize) -> Vec<Token> {
    (0..n).map(|_| rng.below(256) as Token).collect()
}

/// Best wall time of `repeats` runs of `f`, plus the last run's output.
fn best_of<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Duration, T)> {
    let mut best = Duration::MAX;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let v = f()?;
        best = best.min(t0.elapsed());
        out = Some(v);
    }
    Ok((best, out.expect("at least one run")))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Cached document states for every length in `lens` (ascending), built by
/// extending one document per pair instead of re-encoding each prefix.
fn prefix_states(model: &ModelWeights, docs: &[Vec<Token>], lens: &[usize]) -> Result<Vec<Vec<StateStack>>> {
    let cfg = model.config();
    let eos = vec![cfg.eos_id; cfg.k_eos];
    let mut per_len = vec![Vec::with_capacity(docs.len()); lens.len()];
    let mut stats = ForwardStats::default();
    for doc in docs {
        let mut prefix: Option<StateStack> = None;
        let mut done = 0;
        for (li, &len) in lens.iter().enumerate() {
            prefix = Some(advance(model, &doc[done..len], prefix.as_ref(), &mut stats)?);
            done = len;
            per_len[li].push(advance(model, &eos, prefix.as_ref(), &mut stats)?);
        }
    }
    Ok(per_len)
}

struct Scratch(PathBuf);

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let started = Instant::now();
    let mut lens = cfg.doc_lens.clone();
    lens.sort_unstable();
    lens.dedup();
    if lens.first() == Some(&0) || cfg.query_len == 0 || cfg.batch == 0 {
        return Err(Error::Data("doc lengths, query length and batch must be >= 1".into()));
    }
    let mut modes = cfg.modes.clone();
    modes.sort_unstable();
    modes.dedup();

    let model = ModelWeights::init(cfg.model, cfg.seed)?;
    let head = EmbeddingHeadWeights::init(cfg.model.d_model, cfg.model.d_model, cfg.seed);
    let rw = RerankerWeights::init(RerankerConfig::new(&cfg.model, &cfg.layers)?, cfg.seed)?;
    let quad = QuadraticScorer::new(cfg.model.d_model, BYTE_VOCAB, cfg.seed);
    let max_len = *lens.last().unwrap_or(&0);
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let docs: Vec<Vec<Token>> = (0..cfg.batch).map(|_| random_tokens(&mut rng, max_len)).collect();
    let queries: Vec<Vec<Token>> = (0..cfg.batch).map(|_| random_tokens(&mut rng, cfg.query_len)).collect();

    let (embed_time, _) = best_of(cfg.repeats, || {
        let mut s = ForwardStats::default();
        Ok(embed(&model, &head, &queries[0], &mut s)?)
    })?;
    let embed_ms = ms(embed_time);

    let states = if modes.contains(&BenchMode::Offline) {
        prefix_states(&model, &docs, &lens)?
    } else {
        Vec::new()
    };

    let m = &cfg.model;
    let b = Dtype::F64.bytes() as u64;
    let mut report = BenchReport {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for &mode in &modes {
        for (li, &len) in lens.iter().enumerate() {
            if cfg.time_budget.is_some_and(|budget| started.elapsed() > budget) {
                report.skipped.push((mode, len));
                continue;
            }
            let mem = memory_report(
                m.n_layers as u64,
                m.n_heads as u64,
                m.head_size as u64,
                m.d_model as u64,
                len as u64,
                b,
                None,
            )?;
            let (elapsed, pairs, steps) = match mode {
                BenchMode::Offline => {
                    let path = fsio::scratch_dir().join(format!("staterank-bench-{}-{len}.scr", std::process::id()));
                    let _guard = Scratch(path.clone());
                    let entries = states[li]
                        .iter()
                        .enumerate()
                        .map(|(i, st)| Ok(CacheEntry::new(format!("d{i}"), st.clone(), None)?))
                        .collect::<Result<Vec<_>>>()?;
                    write_cache(&path, &CacheLayout::for_model(&model, Dtype::F64, 0), &entries)?;
                    drop(entries);
                    let (t, steps) = best_of(cfg.repeats, || {
                        let mut reader = CacheReader::open(&path)?;
                        let mut s = ForwardStats::default();
                        for (i, q) in queries.iter().enumerate() {
                            let entry = reader.get(&format!("d{i}"))?;
                            score_offline(&model, &entry, q, &rw, &mut s)?;
                        }
                        Ok(s.recurrent_steps)
                    })?;
                    (t, cfg.batch, steps)
                }
                BenchMode::Online => {
                    let (t, steps) = best_of(cfg.repeats, || {
                        let mut s = ForwardStats::default();
                        for (d, q) in docs.iter().zip(&queries) {
                            score_online(&model, "d", &d[..len], q, &rw, &mut s)?;
                        }
                        Ok(s.recurrent_steps)
                    })?;
                    (t, cfg.batch, steps)
                }
                BenchMode::Quadratic => {
                    let n = cfg.quadratic_batch.clamp(1, cfg.batch);
                    let (t, _) = best_of(cfg.repeats, || {
                        for (d, q) in docs.iter().zip(&queries).take(n) {
                            let mut seq = insert_eos(&d[..len], m.k_eos, m.eos_id);
                            seq.extend_from_slice(q);
                            quad.score(&seq)?;
                        }
                        Ok(())
                    })?;
                    (t, n, 0)
                }
            };
            let rerank_ms = ms(elapsed);
            let total_ms = embed_ms + rerank_ms;
            report.rows.push(BenchRow {
                mode,
                doc_len: len,
                total_ms,
                embed_ms,
                rerank_ms,
                state_bytes: if mode == BenchMode::Quadratic {
                    0
                } else {
                    mem.bytes_state
                },
                kv_bytes_model: mem.bytes_kv,
                throughput_pairs_per_s: pairs as f64 / (total_ms / 1e3),
                pairs,
                recurrent_steps: steps,
            });
        }
    }
    Ok(report)
}
