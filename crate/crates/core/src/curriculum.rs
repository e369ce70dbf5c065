//! Domain-aware batch scheduling for contrastive training.
//!
//! Every micro-batch is drawn from a single domain, so its in-batch
//! negatives are same-domain documents, and simulated workers that train
//! in the same step are given different domains.

use alloc::{
    collections::{BTreeMap, BTreeSet},
    format,
    string::String,
    vec::Vec,
};

use crate::embedder::SimMatrix;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Matrix, Rng, Vector};

/// Sample ids grouped by domain, each list in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    domains: BTreeMap<String, Vec<String>>,
}

impl DomainCorpus {
    pub fn domains(&self) -> &BTreeMap<String, Vec<String>> {
        &self.domains
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }
}

/// Group `(id, domain)` records by domain.
pub fn partition_by_domain<I, S, D>(records: I) -> Result<DomainCorpus>
where
    I: IntoIterator<Item = (S, D)>,
    S: Into<String>,
    D: Into<String>,
{
    let mut domains: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, domain) in records {
        let (id, domain) = (id.into(), domain.into());
        if domain.is_empty() {
            return Err(Error::InvalidArgument(format!("sample {id} has an empty domain tag")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::InvalidArgument(format!("sample {id} listed twice")));
        }
        domains.entry(domain).or_default().push(id);
    }
    if domains.is_empty() {
        return Err(Error::InvalidArgument("no records to partition".into()));
    }
    Ok(DomainCorpus { domains })
}

/// One worker's share of a step.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Slot {
    pub domain: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanFlags {
    /// Fewer domains than workers, so some steps repeat a domain.
    pub degenerate: bool,
    /// Samples left unused when their domain could no longer fill a batch.
    pub dropped: usize,
}

/// One epoch of steps; `steps[s][w]` is worker `w`'s batch at step `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurriculumPlan {
    pub steps: Vec<Vec<Slot>>,
    pub flags: PlanFlags,
}

/// Build one epoch of single-domain batches for `n_workers` workers.
///
/// Each domain's samples are shuffled and consumed without replacement.
/// Domains are visited in a seeded random order; each step hands the next
/// `n_workers` domains in that rotation to the workers. A domain that can
/// no longer fill a batch is retired and its leftovers dropped. The epoch
/// ends when fewer than `n_workers` domains remain (or, with fewer domains
/// than workers, when the step can no longer be filled).
pub fn build_plan(corpus: &DomainCorpus, n_workers: usize, batch: usize, seed: u64) -> Result<CurriculumPlan> {
    if n_workers == 0 {
        return Err(Error::InvalidArgument("need at least one worker".into()));
    }
    if batch < 2 {
        return Err(Error::InvalidArgument(
            "batch size must be >= 2 to have in-batch negatives".into(),
        ));
    }
    let largest = corpus.domains.values().map(Vec::len).max().unwrap_or(0);
    if largest < batch {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} exceeds the largest domain ({largest} samples)"
        )));
    }

    let mut rng = Rng::new(seed);
    let mut pools: Vec<(String, Vec<String>)> = corpus
        .domains
        .iter()
        .map(|(d, ids)| {
            let mut ids = ids.clone();
            rng.shuffle(&mut ids);
            (d.clone(), ids)
        })
        .collect();
    rng.shuffle(&mut pools);
    // Samples are taken from the back of each shuffled pool.
    let degenerate = pools.len() < n_workers;
    let mut steps = Vec::new();
    let mut cursor = 0usize;
    loop {
        let active: Vec<usize> = (0..pools.len()).filter(|&i| pools[i].1.len() >= batch).collect();
        if active.is_empty() {
            break;
        }
        let start = cursor % active.len();
        let chosen: Vec<usize> = if degenerate {
            // Round-robin with repeats; only commit if every worker is fed.
            let mut remaining: Vec<usize> = pools.iter().map(|p| p.1.len()).collect();
            let mut picks = Vec::with_capacity(n_workers);
            let mut probe = start;
            let mut misses = 0;
            while picks.len() < n_workers && misses < active.len() {
                let d = active[probe % active.len()];
                probe += 1;
                if remaining[d] >= batch {
                    remaining[d] -= batch;
                    picks.push(d);
                    misses = 0;
                } else {
                    misses += 1;
                }
            }
            if picks.len() < n_workers {
                break;
            }
            picks
        } else {
            if active.len() < n_workers {
                break;
            }
            (0..n_workers).map(|i| active[(start + i) % active.len()]).collect()
        };
        let step = chosen
            .iter()
            .map(|&d| {
                let pool = &mut pools[d].1;
                let ids = pool.split_off(pool.len() - batch);
                Slot {
                    domain: pools[d].0.clone(),
                    ids,
                }
            })
            .collect();
        steps.push(step);
        cursor = start + n_workers;
    }
    let dropped = pools.iter().map(|p| p.1.len()).sum();
    Ok(CurriculumPlan {
        steps,
        flags: PlanFlags { degenerate, dropped },
    })
}

/// Query and document embeddings of one training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbeddings {
    pub query: Vector,
    pub doc: Vector,
}

/// Cosine similarities between every query and every document in `slot`,
/// positives on the diagonal.
pub fn assemble_sim_batch(slot: &Slot, embeddings: &BTreeMap<String, PairEmbeddings>, tau: f64) -> Result<SimMatrix> {
    let b = slot.ids.len();
    if b < 2 {
        return Err(Error::InvalidArgument("a similarity batch needs >= 2 pairs".into()));
    }
    let pairs: Vec<&PairEmbeddings> = slot
        .ids
        .iter()
        .map(|id| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no embedding for sample {id}")))
        })
        .collect::<Result<_>>()?;
    let mut m = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            m.set(i, j, cosine(&pairs[i].query, &pairs[j].doc)?);
        }
    }
    SimMatrix::new(m, tau)
}
