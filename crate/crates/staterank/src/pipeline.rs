//! Two-stage retrieval: index once, retrieve by cosine, rerank from states.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use staterank_core::embedder::{embed, Embedding, EmbeddingHeadWeights};
use staterank_core::reranker::{score_offline, score_online, RerankMode, RerankResult, RerankerWeights};
use staterank_core::rwkv::{byte_tokens, ForwardStats, ModelWeights, Token};
use staterank_core::state_store::CacheEntry;
use staterank_core::tensor::cosine;

use crate::corpus::{write_embeddings, CorpusRecord};
use crate::error::{Error, Result};
use crate::formats::cache::{write_cache, CacheLayout, CacheReader};
use crate::formats::Dtype;

/// Work done by a pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Forward passes that read document tokens.
    pub doc_forward_passes: u64,
    /// Forward passes that read only query tokens.
    pub query_forward_passes: u64,
    pub recurrent_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub documents: usize,
    pub cache_bytes: u64,
    pub stats: PipelineStats,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))
}

/// Encode every document once, writing its full-depth state and embedding
/// to `cache_path` and the embeddings to `embeddings_path`.
///
/// Output is independent of `workers`. On failure neither file is left
/// behind.
pub fn build_index(
    corpus: &[CorpusRecord],
    model: &ModelWeights,
    head: &EmbeddingHeadWeights,
    cache_path: &Path,
    embeddings_path: &Path,
    dtype: Dtype,
    workers: usize,
) -> Result<IndexSummary> {
    let encoded: Vec<(CacheEntry, ForwardStats)> = pool(workers)?.install(|| {
        corpus
            .par_iter()
            .map(|rec| {
                let mut stats = ForwardStats::default();
                let (emb, state) = embed(model, head, &byte_tokens(&rec.text), &mut stats)?;
                Ok((CacheEntry::new(rec.id.clone(), state, Some(emb))?, stats))
            })
            .collect::<Result<_>>()
    })?;
    let mut stats = PipelineStats::default();
    for (_, s) in &encoded {
        stats.doc_forward_passes += s.passes;
        stats.recurrent_steps += s.recurrent_steps;
    }
    let entries: Vec<CacheEntry> = encoded.into_iter().map(|(e, _)| e).collect();
    let rows: Vec<(String, Embedding)> = entries
        .iter()
        .map(|e| (e.doc_id.clone(), e.embedding.clone().expect("embed always yields one")))
        .collect();

    let layout = CacheLayout::for_model(model, dtype, head.d_emb());
    let written = write_cache(cache_path, &layout, &entries).and_then(|bytes| {
        write_embeddings(embeddings_path, &rows)?;
        Ok(bytes)
    });
    match written {
        Ok(cache_bytes) => Ok(IndexSummary {
            documents: entries.len(),
            cache_bytes,
            stats,
        }),
        Err(e) => {
            let _ = std::fs::remove_file(cache_path);
            let _ = std::fs::remove_file(embeddings_path);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub k: usize,
}

/// Embed query text with the same head used for documents.
pub fn embed_query(
    model: &ModelWeights,
    head: &EmbeddingHeadWeights,
    text: &str,
    stats: &mut PipelineStats,
) -> Result<Embedding> {
    let mut fs = ForwardStats::default();
    let (emb, _) = embed(model, head, &byte_tokens(text), &mut fs)?;
    stats.query_forward_passes += fs.passes;
    stats.recurrent_steps += fs.recurrent_steps;
    Ok(emb)
}

/// Exact top-`k` by cosine; ties go to the smaller doc id.
pub fn retrieve(query_id: &str, query: &Embedding, index: &[(String, Embedding)], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Data("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Data("embedding index is empty".into()));
    }
    let mut hits = index
        .iter()
        .map(|(id, e)| {
            Ok(Hit {
                doc_id: id.clone(),
                score: cosine(&query.values, &e.values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    hits.truncate(k);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        hits,
        k,
    })
}

/// Where reranking gets document information from.
pub enum Candidates<'a> {
    /// Cached states; document text is never consulted.
    Offline(&'a mut CacheReader),
    /// Document text, re-read jointly with the query.
    Online(&'a HashMap<String, String>),
}

/// Sort by probability, highest first, then by doc id.
pub fn sort_results(results: &mut [RerankResult]) {
    results.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

/// Rescore the retrieved candidates. Only candidate membership is taken
/// from `result`; its cosine scores play no part.
pub fn rerank_stage(
    result: &RetrievalResult,
    query: &[Token],
    candidates: Candidates<'_>,
    model: &ModelWeights,
    rw: &RerankerWeights,
    workers: usize,
    stats: &mut PipelineStats,
) -> Result<Vec<RerankResult>> {
    let ids: Vec<&str> = result.hits.iter().map(|h| h.doc_id.as_str()).collect();
    let scored: Vec<(RerankResult, ForwardStats)> = match candidates {
        Candidates::Offline(reader) => {
            let entries = ids.iter().map(|id| reader.get(id)).collect::<Result<Vec<_>>>()?;
            pool(workers)?.install(|| {
                entries
                    .par_iter()
                    .map(|e| {
                        let mut fs = ForwardStats::default();
                        Ok((score_offline(model, e, query, rw, &mut fs)?, fs))
                    })
                    .collect::<Result<_>>()
            })?
        }
        Candidates::Online(texts) => {
            let docs = ids
                .iter()
                .map(|id| {
                    texts
                        .get(*id)
                        .map(|t| (*id, byte_tokens(t)))
                        .ok_or_else(|| Error::NotFound(id.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            pool(workers)?.install(|| {
                docs.par_iter()
                    .map(|(id, doc)| {
                        let mut fs = ForwardStats::default();
                        Ok((score_online(model, id, doc, query, rw, &mut fs)?, fs))
                    })
                    .collect::<Result<_>>()
            })?
        }
    };
    let mut out = Vec::with_capacity(scored.len());
    for (r, fs) in scored {
        match r.mode {
            RerankMode::Offline => stats.query_forward_passes += fs.passes,
            RerankMode::Online => stats.doc_forward_passes += fs.passes,
        }
        stats.recurrent_steps += fs.recurrent_steps;
        out.push(r);
    }
    sort_results(&mut out);
    Ok(out)
}
