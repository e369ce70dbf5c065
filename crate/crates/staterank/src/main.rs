use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use staterank::bench::{run_bench, BenchConfig, BenchMode};
use staterank::config::{require, RunConfig};
use staterank::corpus::{ingest, read_embeddings, read_jsonl, write_jsonl, CorpusRecord, TrainingPair};
use staterank::formats::cache::{read_cache, write_cache, CacheLayout, CacheReader};
use staterank::formats::weights::{load_head, load_model, load_reranker, save_head, save_model, save_reranker};
use staterank::formats::Dtype;
use staterank::pipeline::{
    build_index, embed_query, rerank_stage, retrieve, Candidates, PipelineStats, RetrievalResult,
};
use staterank::{fsio, Error};
use staterank_core::curriculum::{build_plan, partition_by_domain};
use staterank_core::embedder::{pooled_hidden, EmbeddingHeadWeights};
use staterank_core::reranker::{
    offline_state, online_state, score_from_state, train_reranker, RerankMode, RerankResult, RerankerConfig,
    RerankerTrainOptions, RerankerWeights,
};
use staterank_core::rwkv::{byte_tokens, ForwardStats, ModelConfig, ModelWeights};
use staterank_core::state_store::{
    memory_report, reference_models, select_layers, CacheEntry, LayerSelection, MemoryReport,
};
use staterank_core::tensor::{Precision, Rng};

#[derive(Parser)]
#[command(
    name = "staterank",
    version,
    about = "Two-stage retrieval with reusable recurrent states"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Layer selection: preset name, `full`, `uniform:K`, `top-heavy:K` or a comma list.
    #[arg(long, global = true)]
    layers: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    head: Option<PathBuf>,
    #[arg(long, global = true)]
    reranker: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Offline,
    Online,
}

#[derive(Subcommand)]
enum Command {
    /// Create seeded model, embedding head and reranker weight files.
    Init {
        #[arg(long, default_value_t = 4)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 16)]
        head_size: usize,
        /// Embedding width; defaults to the model width.
        #[arg(long)]
        d_emb: Option<usize>,
    },
    /// Validate a JSONL corpus and print its record count.
    Ingest { corpus: PathBuf },
    /// Encode every document once; write the state cache and embeddings.
    Index { corpus: PathBuf },
    /// Exact cosine top-k over the embeddings file.
    Retrieve {
        #[command(flatten)]
        queries: QueryArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerank retrieval results from cached states (offline) or document text (online).
    Rerank {
        #[command(flatten)]
        queries: QueryArgs,
        /// JSONL written by `retrieve`.
        #[arg(long)]
        retrieval: PathBuf,
        /// Corpus JSONL; required in online mode.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reranker on labelled query/document pairs.
    TrainReranker {
        pairs: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Time offline, online and quadratic reranking on synthetic documents.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048, 4096])]
        doc_lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        query_len: usize,
        #[arg(long, default_value_t = 100)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        quadratic_batch: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [BenchMode::Offline, BenchMode::Online, BenchMode::Quadratic])]
        modes: Vec<BenchMode>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Skip remaining measurements after this many seconds.
        #[arg(long)]
        time_budget_s: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-document state versus KV-cache bytes.
    Memcalc {
        /// Print the five reference model sizes at 2000 tokens, 2 bytes per value.
        #[arg(long = "paper-table")]
        reference: bool,
        #[arg(short = 'L', long, default_value_t = 24)]
        n_layers: u64,
        #[arg(short = 'H', long, default_value_t = 16)]
        n_heads: u64,
        #[arg(short = 'S', long, default_value_t = 64)]
        head_size: u64,
        #[arg(short = 'd', long)]
        d_model: Option<u64>,
        #[arg(short = 'T', long, default_value_t = 2000)]
        tokens: u64,
        #[arg(short = 'b', long, default_value_t = 2)]
        bytes: u64,
        /// Number of cached layers; defaults to all.
        #[arg(long)]
        selected: Option<u64>,
    },
    /// Build a domain-aware batch plan for a corpus with `domain` fields.
    CurriculumSim {
        corpus: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick end-to-end consistency checks.
    Selftest,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct QueryArgs {
    /// A single query; its id is `q`.
    #[arg(long)]
    query: Option<String>,
    /// JSONL of `{"id", "text"}` queries.
    #[arg(long)]
    queries: Option<PathBuf>,
}

impl QueryArgs {
    fn load(&self) -> staterank::Result<Vec<CorpusRecord>> {
        match (&self.query, &self.queries) {
            (Some(q), _) => Ok(vec![CorpusRecord {
                id: "q".into(),
                text: q.clone(),
                domain: None,
            }]),
            (None, Some(p)) => ingest(p),
            (None, None) => unreachable!("clap enforces one of --query/--queries"),
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<staterank_core::Error> for Failure {
    fn from(e: staterank_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn settings(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut c = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(p) = g.precision {
        c.precision = match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
        };
    }
    if let Some(m) = g.mode {
        c.mode = match m {
            ModeArg::Offline => RerankMode::Offline,
            ModeArg::Online => RerankMode::Online,
        };
    }
    if let Some(l) = &g.layers {
        c.layers = l.clone();
    }
    if let Some(w) = g.workers {
        if w == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        c.workers = w;
    }
    for (slot, flag) in [
        (&mut c.model, &g.model),
        (&mut c.head, &g.head),
        (&mut c.reranker, &g.reranker),
        (&mut c.cache, &g.cache),
        (&mut c.embeddings, &g.embeddings),
    ] {
        if let Some(p) = flag {
            *slot = p.clone();
        }
    }
    Ok(c)
}

fn selection(c: &RunConfig) -> Result<LayerSelection, Failure> {
    LayerSelection::parse(&c.layers).map_err(|e| Failure::Usage(e.to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> staterank::Result<()> {
    match out {
        Some(p) => fsio::write_atomic(p, text.as_bytes()),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn emit_jsonl<T: Serialize>(out: Option<&Path>, rows: &[T]) -> staterank::Result<()> {
    match out {
        Some(p) => write_jsonl(p, rows),
        None => {
            let mut s = String::new();
            for r in rows {
                s.push_str(&to_json(r));
                s.push('\n');
            }
            emit(None, &s)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn memcalc_table(rows: &[(String, MemoryReport)]) -> String {
    let mut s = format!(
        "{:<8} {:>4} {:>6} {:>4} {:>4} {:>12} {:>12} {:>8}\n",
        "model", "L", "d", "H", "S", "state_MB", "kv_MB", "ratio"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<8} {:>4} {:>6} {:>4} {:>4} {:>12} {:>12} {:>8}\n",
            name,
            r.n_layers,
            r.d_model,
            r.n_heads,
            r.head_size,
            r.state_mb(),
            r.kv_mb(),
            r.ratio_string()
        ));
    }
    s
}

fn cmd_init(c: &RunConfig, n_layers: usize, n_heads: usize, head_size: usize, d_emb: Option<usize>) -> Outcome {
    let mut mc = ModelConfig::new(n_layers, n_heads, head_size);
    mc.precision = c.precision;
    mc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let model = ModelWeights::init(mc, c.seed)?;
    let head = EmbeddingHeadWeights::init(mc.d_model, d_emb.unwrap_or(mc.d_model), c.seed);
    let rw = RerankerWeights::init(RerankerConfig::new(&mc, &selection(c)?)?, c.seed)?;
    let dtype = Dtype::from(c.precision);
    save_model(&c.model, &model)?;
    save_head(&c.head, &head, dtype)?;
    save_reranker(&c.reranker, &rw, dtype)?;
    emit(
        None,
        &format!(
            "{}\n",
            to_json(&serde_json::json!({
                "model": c.model, "head": c.head, "reranker": c.reranker,
                "fingerprint": format!("{:#018x}", model.fingerprint()),
                "reranker_layers": rw.config().layers,
            }))
        ),
    )?;
    Ok(())
}

fn cmd_index(c: &RunConfig, corpus: &Path) -> Outcome {
    let records = ingest(corpus)?;
    let model = load_model(require(&c.model)?)?;
    let head = load_head(require(&c.head)?)?;
    let summary = build_index(
        &records,
        &model,
        &head,
        &c.cache,
        &c.embeddings,
        Dtype::from(c.precision),
        c.workers,
    )?;
    emit(None, &format!("{}\n", to_json(&summary)))?;
    Ok(())
}

fn cmd_retrieve(c: &RunConfig, queries: &QueryArgs, k: Option<usize>, out: Option<&Path>) -> Outcome {
    let k = k.unwrap_or(c.k);
    if k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let model = load_model(require(&c.model)?)?;
    let head = load_head(require(&c.head)?)?;
    let index = read_embeddings(require(&c.embeddings)?)?;
    let mut stats = PipelineStats::default();
    let results = queries
        .load()?
        .iter()
        .map(|q| {
            let e = embed_query(&model, &head, &q.text, &mut stats)?;
            retrieve(&q.id, &e, &index, k)
        })
        .collect::<staterank::Result<Vec<_>>>()?;
    emit_jsonl(out, &results)?;
    Ok(())
}

#[derive(Serialize)]
struct RerankOutput {
    query_id: String,
    results: Vec<RerankResult>,
    stats: PipelineStats,
}

fn cmd_rerank(
    c: &RunConfig,
    queries: &QueryArgs,
    retrieval: &Path,
    corpus: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    let model = load_model(require(&c.model)?)?;
    let rw = load_reranker(require(&c.reranker)?)?;
    if c.layers != "full" {
        let wanted = select_layers(model.config().n_layers, &selection(c)?)?;
        if wanted != rw.config().layers {
            return Err(Failure::Usage(format!(
                "--layers resolves to {wanted:?} but the reranker was built for {:?}",
                rw.config().layers
            )));
        }
    }
    let queries: HashMap<String, String> = queries.load()?.into_iter().map(|r| (r.id, r.text)).collect();
    let results: Vec<RetrievalResult> = read_jsonl(retrieval)?;
    let mut reader = None;
    let mut texts = HashMap::new();
    match c.mode {
        RerankMode::Offline => reader = Some(CacheReader::open(require(&c.cache)?)?),
        RerankMode::Online => {
            let p = corpus.ok_or_else(|| Failure::Usage("online mode needs --corpus".into()))?;
            texts = ingest(p)?.into_iter().map(|r| (r.id, r.text)).collect();
        }
    }
    if let Some(r) = &reader {
        let found = r.header().layout.fingerprint;
        if found != model.fingerprint() {
            return Err(staterank_core::Error::FingerprintMismatch {
                expected: model.fingerprint(),
                found,
            }
            .into());
        }
    }
    let mut rows = Vec::new();
    for res in &results {
        let text = queries
            .get(&res.query_id)
            .ok_or_else(|| Error::Data(format!("no query text for '{}'", res.query_id)))?;
        let mut stats = PipelineStats::default();
        let cands = match reader.as_mut() {
            Some(r) => Candidates::Offline(r),
            None => Candidates::Online(&texts),
        };
        let ranked = rerank_stage(res, &byte_tokens(text), cands, &model, &rw, c.workers, &mut stats)?;
        rows.push(RerankOutput {
            query_id: res.query_id.clone(),
            results: ranked,
            stats,
        });
    }
    emit_jsonl(out, &rows)?;
    Ok(())
}

fn cmd_train(c: &RunConfig, pairs: &Path, steps: usize, lr: f64, batch_size: usize) -> Outcome {
    let model = load_model(require(&c.model)?)?;
    let pairs: Vec<TrainingPair> = read_jsonl(pairs)?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()).into());
    }
    let rw = match c.reranker.is_file() {
        true => load_reranker(&c.reranker)?,
        false => RerankerWeights::init(RerankerConfig::new(model.config(), &selection(c)?)?, c.seed)?,
    };
    let mut stats = ForwardStats::default();
    let mut data = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (_, doc_state) = pooled_hidden(&model, &byte_tokens(&p.doc), &mut stats)?;
        data.push((
            offline_state(&model, &doc_state, &byte_tokens(&p.query), &rw, &mut stats)?,
            p.label,
        ));
    }
    let opts = RerankerTrainOptions {
        lr,
        steps,
        batch_size,
        seed: c.seed,
    };
    let (trained, losses) = train_reranker(&rw, &data, opts)?;
    save_reranker(&c.reranker, &trained, Dtype::from(c.precision))?;
    emit(
        None,
        &format!(
            "{}\n",
            to_json(&serde_json::json!({
                "pairs": data.len(),
                "steps": losses.len(),
                "first_loss": losses.first(),
                "last_loss": losses.last(),
                "reranker": c.reranker,
            }))
        ),
    )?;
    Ok(())
}

fn cmd_curriculum(c: &RunConfig, corpus: &Path, batch: usize, out: Option<&Path>) -> Outcome {
    let records = ingest(corpus)?;
    let tagged = records
        .iter()
        .map(|r| {
            r.domain
                .as_deref()
                .map(|d| (r.id.as_str(), d))
                .ok_or_else(|| Error::Data(format!("record '{}' has no domain", r.id)))
        })
        .collect::<staterank::Result<Vec<_>>>()?;
    let dc = partition_by_domain(tagged)?;
    let plan = build_plan(&dc, c.workers, batch, c.seed)?;
    let counts: BTreeMap<&str, usize> = dc.domains().iter().map(|(k, v)| (k.as_str(), v.len())).collect();
    let doc = serde_json::json!({
        "workers": c.workers,
        "batch": batch,
        "seed": c.seed,
        "domains": counts,
        "plan": plan,
    });
    let text = serde_json::to_string_pretty(&doc).expect("plain data serializes") + "\n";
    emit(out, &text)?;
    Ok(())
}

fn selftest(c: &RunConfig) -> Outcome {
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failures += usize::from(!ok);
    };

    let table = reference_models();
    let states: Vec<String> = table.iter().map(|(_, r)| r.state_mb()).collect();
    let kvs: Vec<String> = table.iter().map(|(_, r)| r.kv_mb()).collect();
    check(
        "memory table",
        states == ["1.12", "3.00", "6.00", "10.00", "16.00"]
            && kvs == ["70.31", "187.50", "375.00", "625.00", "1000.00"]
            && table.iter().all(|(_, r)| r.ratio_string() == "62.5"),
    );

    let model = ModelWeights::init(ModelConfig::new(2, 2, 8), c.seed)?;
    let rw = RerankerWeights::init(RerankerConfig::new(model.config(), &LayerSelection::Full)?, c.seed)?;
    let mut rng = Rng::new(c.seed);
    let doc: Vec<u32> = (0..200).map(|_| rng.below(256) as u32).collect();
    let query: Vec<u32> = (0..16).map(|_| rng.below(256) as u32).collect();
    let mut stats = ForwardStats::default();
    let (_, doc_state) = pooled_hidden(&model, &doc, &mut stats)?;
    let before = stats.recurrent_steps;
    let off = offline_state(&model, &doc_state, &query, &rw, &mut stats)?;
    let offline_steps = stats.recurrent_steps - before;
    let on = online_state(&model, &doc, &query, &rw, &mut stats)?;
    check(
        "offline equals online",
        off.bit_identical(&on) && score_from_state(&rw, &off)? == score_from_state(&rw, &on)?,
    );
    check("offline reads only the query", offline_steps == query.len() as u64);

    let path = fsio::scratch_dir().join(format!("staterank-selftest-{}.scr", std::process::id()));
    let entry = CacheEntry::new("doc", doc_state.clone(), None)?;
    let layout = CacheLayout::for_model(&model, Dtype::F64, 0);
    let written = write_cache(&path, &layout, std::slice::from_ref(&entry));
    let round = written.is_ok() && read_cache(&path).map(|(_, e)| e == [entry]).unwrap_or(false);
    let _ = std::fs::remove_file(&path);
    check("cache round trip", round);

    if failures == 0 {
        Ok(())
    } else {
        Err(Error::Data(format!("{failures} selftest check(s) failed")).into())
    }
}

fn run(cli: Cli) -> Outcome {
    let c = settings(&cli.global)?;
    match cli.command {
        Command::Init {
            n_layers,
            n_heads,
            head_size,
            d_emb,
        } => cmd_init(&c, n_layers, n_heads, head_size, d_emb),
        Command::Ingest { corpus } => {
            let records = ingest(&corpus)?;
            let domains: std::collections::BTreeSet<_> = records.iter().filter_map(|r| r.domain.as_deref()).collect();
            emit(
                None,
                &format!(
                    "{}\n",
                    to_json(&serde_json::json!({"records": records.len(), "domains": domains.len()}))
                ),
            )?;
            Ok(())
        }
        Command::Index { corpus } => cmd_index(&c, &corpus),
        Command::Retrieve { queries, k, out } => cmd_retrieve(&c, &queries, k, out.as_deref()),
        Command::Rerank {
            queries,
            retrieval,
            corpus,
            out,
        } => cmd_rerank(&c, &queries, &retrieval, corpus.as_deref(), out.as_deref()),
        Command::TrainReranker {
            pairs,
            steps,
            lr,
            batch_size,
        } => cmd_train(&c, &pairs, steps, lr, batch_size),
        Command::Bench {
            doc_lens,
            query_len,
            batch,
            quadratic_batch,
            modes,
            repeats,
            time_budget_s,
            out,
        } => {
            let budget = match time_budget_s {
                Some(s) if !(s.is_finite() && s >= 0.0) => {
                    return Err(Failure::Usage("--time-budget-s must be a non-negative number".into()))
                }
                s => s.map(Duration::from_secs_f64),
            };
            let cfg = BenchConfig {
                layers: selection(&c)?,
                doc_lens,
                query_len,
                batch,
                quadratic_batch,
                modes,
                repeats,
                seed: c.seed,
                time_budget: budget,
                ..BenchConfig::default()
            };
            let report = run_bench(&cfg)?;
            for (m, l) in &report.skipped {
                eprintln!("skipped {} at doc_len {l}: time budget exhausted", m.name());
            }
            emit(out.as_deref(), &report.to_csv())?;
            Ok(())
        }
        Command::Memcalc {
            reference,
            n_layers,
            n_heads,
            head_size,
            d_model,
            tokens,
            bytes,
            selected,
        } => {
            let rows: Vec<(String, MemoryReport)> = if reference {
                reference_models()
                    .into_iter()
                    .map(|(n, r)| (n.to_string(), r))
                    .collect()
            } else {
                let d = d_model.unwrap_or(n_heads * head_size);
                vec![(
                    "custom".into(),
                    memory_report(n_layers, n_heads, head_size, d, tokens, bytes, selected)?,
                )]
            };
            emit(None, &memcalc_table(&rows))?;
            Ok(())
        }
        Command::CurriculumSim { corpus, batch, out } => cmd_curriculum(&c, &corpus, batch, out.as_deref()),
        Command::Selftest => selftest(&c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
