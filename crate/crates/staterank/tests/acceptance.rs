//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p staterank --test acceptance`.
#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, HashSet};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use staterank::bench::{run_bench, BenchConfig, BenchMode};
use staterank::corpus::CorpusRecord;
use staterank::formats::cache::{read_cache, read_entry, write_cache, CacheLayout, CacheReader};
use staterank::formats::Dtype;
use staterank::pipeline::{build_index, rerank_stage, Candidates, Hit, PipelineStats, RetrievalResult};
use staterank_core::curriculum::{build_plan, partition_by_domain};
use staterank_core::embedder::{
    embed, infonce_grad, infonce_loss, insert_eos, Embedding, EmbeddingHeadWeights, SimMatrix,
};
use staterank_core::reranker::{
    batch_loss_and_grad, bce_grad_logit, bce_loss, score_from_state, score_offline, train_reranker, RerankerConfig,
    RerankerTrainOptions, RerankerWeights,
};
use staterank_core::rwkv::{
    advance, byte_tokens, extract_states, state_update, state_update_structured, transition_matrix, ForwardStats,
    LayerState, ModelConfig, ModelWeights, StateStack, Token,
};
use staterank_core::state_store::{memory_report, reference_models, select_layers, CacheEntry, LayerSelection};
use staterank_core::tensor::{sigmoid, Matrix, Rng};
use staterank_core::Params;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Relative error with a floor on the denominator, so that two tiny values
/// are compared on an absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

// 1 ------------------------------------------------------------------------

fn memory_table() -> Check {
    let want_state = ["1.12", "3.00", "6.00", "10.00", "16.00"];
    let want_kv = ["70.31", "187.50", "375.00", "625.00", "1000.00"];
    let table = reference_models();
    ensure(table.len() == 5, || format!("{} rows", table.len()))?;
    for (i, (name, r)) in table.iter().enumerate() {
        ensure(r.state_mb() == want_state[i] && r.kv_mb() == want_kv[i], || {
            format!("{name}: state {} kv {}", r.state_mb(), r.kv_mb())
        })?;
        ensure(*r.ratio.numer() == 125 && *r.ratio.denom() == 2, || {
            format!("{name}: ratio {}", r.ratio)
        })?;
    }
    let out = Command::new(env!("CARGO_BIN_EXE_staterank"))
        .args(["memcalc", "--paper-table"])
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || "memcalc exited with failure".into())?;
    let text = String::from_utf8(out.stdout).map_err(e2s)?;
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    ensure(rows.len() == 5, || format!("CLI printed {} rows", rows.len()))?;
    for (i, r) in rows.iter().enumerate() {
        ensure(r[5] == want_state[i] && r[6] == want_kv[i] && r[7] == "62.5", || {
            format!("CLI row {r:?}")
        })?;
    }
    Ok("5 rows, ratio 125/2".into())
}

// 2 ------------------------------------------------------------------------

fn footprint_ratio() -> Check {
    let mut rng = Rng::new(2);
    for _ in 0..20 {
        let l = 1 + rng.below(48);
        let h = 1 + rng.below(64);
        let s = [8, 16, 32, 64, 128][rng.below(5) as usize];
        let t = 1 + rng.below(100_000);
        let b = [1, 2, 4, 8][rng.below(4) as usize];
        let r = memory_report(l, h, s, h * s, t, b, None).map_err(e2s)?;
        // kv/state == 2T/S  <=>  kv·S == 2T·state, in exact integers.
        ensure(
            r.bytes_kv as u128 * s as u128 == 2 * t as u128 * r.bytes_state as u128,
            || format!("L={l} H={h} S={s} T={t}: {} vs {}", r.bytes_kv, r.bytes_state),
        )?;
        ensure(
            *r.ratio.numer() as u128 * s as u128 == 2 * t as u128 * *r.ratio.denom() as u128,
            || format!("ratio {} != 2*{t}/{s}", r.ratio),
        )?;
    }
    Ok("20 configs".into())
}

// 3 ------------------------------------------------------------------------

fn random_tokens(rng: &mut Rng, n: usize) -> Vec<Token> {
    (0..n).map(|_| rng.below(256) as Token).collect()
}

fn offline_online() -> Check {
    let cfg = ModelConfig::tiny();
    let mut rng = Rng::new(3);
    let mut total_doc = 0;
    for trial in 0..100u64 {
        let model = ModelWeights::init(cfg, 1000 + trial).map_err(e2s)?;
        let head = EmbeddingHeadWeights::init(cfg.d_model, cfg.d_model, trial);
        let sel = [
            LayerSelection::Full,
            LayerSelection::UniformGeneric(2),
            LayerSelection::TopHeavy(1),
        ][trial as usize % 3]
            .clone();
        let mut rw = RerankerWeights::init(RerankerConfig::new(&cfg, &sel).map_err(e2s)?, trial).map_err(e2s)?;
        rw.head = rng.vector(rw.head.dim(), 1.0);
        rw.head_bias = rng.uniform_in(-1.0, 1.0);

        let doc_len = rng.below(2049) as usize;
        let q_len = 1 + rng.below(64) as usize;
        total_doc += doc_len;
        let doc = random_tokens(&mut rng, doc_len);
        let query = random_tokens(&mut rng, q_len);

        let mut stats = ForwardStats::default();
        let (_, cached) = embed(&model, &head, &doc, &mut stats).map_err(e2s)?;
        let resumed = advance(&model, &query, Some(&cached), &mut stats).map_err(e2s)?;
        let mut joint = insert_eos(&doc, cfg.k_eos, cfg.eos_id);
        joint.extend_from_slice(&query);
        let fresh = advance(&model, &joint, None, &mut stats).map_err(e2s)?;
        ensure(resumed.bit_identical(&fresh), || {
            format!("trial {trial}: final states differ")
        })?;

        let layers = &rw.config().layers;
        let a = extract_states(&resumed, layers).map_err(e2s)?;
        let b = extract_states(&fresh, layers).map_err(e2s)?;
        ensure(a.bit_identical(&b), || {
            format!("trial {trial}: extracted states differ")
        })?;
        let pa = score_from_state(&rw, &a).map_err(e2s)?;
        let pb = score_from_state(&rw, &b).map_err(e2s)?;
        ensure(pa.to_bits() == pb.to_bits(), || format!("trial {trial}: {pa} vs {pb}"))?;
    }
    Ok(format!("100 triples, {total_doc} document tokens"))
}

// 4 ------------------------------------------------------------------------

type Dense = Vec<Vec<f64>>;

fn dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let p = b[0].len();
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..b.len() {
            for j in 0..p {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v = rng.vector(n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn recurrence_oracle() -> Check {
    const T: usize = 8;
    const S: usize = 8;
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s0 = rng.matrix(S, S, 1.0);
        let mut steps = Vec::new();
        for _ in 0..T {
            let w: Vec<f64> = (0..S).map(|_| rng.uniform_in(0.05, 1.0)).collect();
            let kh = unit(&mut rng, S);
            let a: Vec<f64> = (0..S).map(|_| rng.uniform()).collect();
            let v = rng.vector(S, 1.0).to_vec();
            let k = rng.vector(S, 1.0).to_vec();
            steps.push((w, kh, a, v, k));
        }
        let mut dense_rec = s0.clone();
        let mut fast = s0.clone();
        let mut ws = Vec::new();
        for (w, kh, a, v, k) in &steps {
            let wm = transition_matrix(w, kh, a).map_err(e2s)?;
            dense_rec = state_update(&dense_rec, &wm, v, k).map_err(e2s)?;
            state_update_structured(&mut fast, w, kh, a, v, k);
            // Oracle transition built from the definition.
            let mut wd = vec![vec![0.0; S]; S];
            for i in 0..S {
                for j in 0..S {
                    wd[i][j] = if i == j { w[i] } else { 0.0 } - kh[i] * a[j] * kh[j];
                }
            }
            ws.push(wd);
        }
        // S_T = S0·W1…WT + Σ_t v_t k_tᵀ · W_{t+1}…W_T
        let mut closed = dense(&s0);
        for w in &ws {
            closed = mul(&closed, w);
        }
        for (t, (_, _, _, v, k)) in steps.iter().enumerate() {
            let mut term: Dense = v.iter().map(|vi| k.iter().map(|kj| vi * kj).collect()).collect();
            for w in &ws[t + 1..] {
                term = mul(&term, w);
            }
            for i in 0..S {
                for j in 0..S {
                    closed[i][j] += term[i][j];
                }
            }
        }
        for i in 0..S {
            for j in 0..S {
                worst = worst.max((dense_rec.get(i, j) - closed[i][j]).abs());
                worst = worst.max((fast.get(i, j) - closed[i][j]).abs());
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max abs diff {worst:e}"))?;

    let mut e1 = vec![0.0; 4];
    e1[0] = 1.0;
    let w = vec![0.5; 4];
    let zero = vec![0.0; 4];
    let wm = transition_matrix(&w, &e1, &zero).map_err(e2s)?;
    let mut s = Matrix::identity(4);
    let mut fast = Matrix::identity(4);
    for _ in 0..3 {
        s = state_update(&s, &wm, &zero, &e1).map_err(e2s)?;
        state_update_structured(&mut fast, &w, &e1, &zero, &zero, &e1);
    }
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 0.125 } else { 0.0 };
            ensure(
                (s.get(i, j) - want).abs() <= 1e-15 && (fast.get(i, j) - want).abs() <= 1e-15,
                || format!("decay case entry ({i},{j}) = {}", s.get(i, j)),
            )?;
        }
    }
    Ok(format!("max abs diff {worst:.2e}"))
}

// 5 ------------------------------------------------------------------------

fn gradient_checks() -> Check {
    const H: f64 = 1e-6;
    let mut rng = Rng::new(5);

    // InfoNCE with respect to the similarity entries.
    let mut worst_nce: f64 = 0.0;
    for _ in 0..5 {
        let b = 2 + rng.below(4) as usize;
        let data: Vec<f64> = (0..b * b).map(|_| rng.uniform_in(-0.9, 0.9)).collect();
        let tau = 0.5;
        let sims = SimMatrix::new(Matrix::from_vec(b, b, data.clone()).map_err(e2s)?, tau).map_err(e2s)?;
        let g = infonce_grad(&sims);
        for idx in 0..b * b {
            let at = |delta: f64| -> Result<f64, String> {
                let mut d = data.clone();
                d[idx] += delta;
                Ok(infonce_loss(
                    &SimMatrix::new(Matrix::from_vec(b, b, d).map_err(e2s)?, tau).map_err(e2s)?,
                ))
            };
            let fd = (at(H)? - at(-H)?) / (2.0 * H);
            worst_nce = worst_nce.max(rel_err(fd, g.data()[idx]));
        }
    }
    ensure(worst_nce <= 1e-5, || format!("infonce rel err {worst_nce:e}"))?;

    let mut worst_bce: f64 = 0.0;
    for &y in &[0.0, 1.0, 0.3] {
        for i in 0..17 {
            let z = -4.0 + 0.5 * i as f64;
            let fd = (bce_loss(y, sigmoid(z + H)) - bce_loss(y, sigmoid(z - H))) / (2.0 * H);
            worst_bce = worst_bce.max(rel_err(fd, bce_grad_logit(y, z)));
        }
    }
    ensure(worst_bce <= 1e-5, || format!("bce rel err {worst_bce:e}"))?;

    // Every reranker parameter, through the projections, mixing block and head.
    let cfg = ModelConfig::tiny();
    let mut rw = RerankerWeights::init(
        RerankerConfig::new(&cfg, &LayerSelection::Explicit(vec![0, 3])).map_err(e2s)?,
        5,
    )
    .map_err(e2s)?;
    rw.head = rng.vector(rw.head.dim(), 1.0);
    rw.head_bias = 0.1;
    let states: Vec<StateStack> = (0..3)
        .map(|_| {
            let layers = (0..2)
                .map(|_| LayerState {
                    wkv: (0..cfg.n_heads)
                        .map(|_| rng.matrix(cfg.head_size, cfg.head_size, 0.5))
                        .collect(),
                    tm_shift: rng.vector(cfg.d_model, 1.0),
                    cm_shift: rng.vector(cfg.d_model, 1.0),
                })
                .collect();
            StateStack::new(cfg.n_layers, vec![0, 3], layers, 0, 10).unwrap()
        })
        .collect();
    let batch: Vec<(&StateStack, f64)> = states.iter().zip([1.0, 0.0, 1.0]).collect();
    let (_, grad) = batch_loss_and_grad(&rw, &batch).map_err(e2s)?;
    let flat = grad.flatten();
    let loss = |w: &RerankerWeights| batch_loss_and_grad(w, &batch).map(|r| r.0).map_err(e2s);
    let mut probe = rw.clone();
    let mut worst_rr: f64 = 0.0;
    for (idx, &g) in flat.iter().enumerate() {
        let mut orig = 0.0;
        probe.with_param_mut(idx, &mut |x| {
            orig = *x;
            *x = orig + H;
        });
        let up = loss(&probe)?;
        probe.with_param_mut(idx, &mut |x| *x = orig - H);
        let down = loss(&probe)?;
        probe.with_param_mut(idx, &mut |x| *x = orig);
        let e = rel_err((up - down) / (2.0 * H), g);
        ensure(e <= 1e-4, || {
            format!("reranker param {idx}: analytic {g:e}, rel err {e:e}")
        })?;
        worst_rr = worst_rr.max(e);
    }
    Ok(format!(
        "infonce {worst_nce:.1e}, bce {worst_bce:.1e}, reranker {} params {worst_rr:.1e}",
        flat.len()
    ))
}

// 6 ------------------------------------------------------------------------

fn loss_goldens() -> Check {
    let sims = SimMatrix::new(Matrix::from_vec(3, 3, vec![0.4; 9]).map_err(e2s)?, 0.05).map_err(e2s)?;
    let l = infonce_loss(&sims);
    ensure((l - 3f64.ln()).abs() <= 1e-12, || format!("infonce {l} vs ln 3"))?;
    let b = bce_loss(1.0, 0.5);
    ensure((b - 2f64.ln()).abs() <= 1e-12, || format!("bce {b} vs ln 2"))?;
    Ok(format!(
        "ln3 err {:.1e}, ln2 err {:.1e}",
        (l - 3f64.ln()).abs(),
        (b - 2f64.ln()).abs()
    ))
}

// 7 ------------------------------------------------------------------------

fn presets() -> Check {
    let expected: [(&str, usize, &[usize]); 9] = [
        ("12L-top-heavy-3", 12, &[9, 10, 11]),
        ("12L-uniform-3a", 12, &[0, 5, 11]),
        ("12L-uniform-3b", 12, &[1, 6, 10]),
        ("12L-top-heavy-6", 12, &[6, 7, 8, 9, 10, 11]),
        ("12L-uniform-6", 12, &[0, 3, 5, 7, 9, 11]),
        ("24L-top-heavy-1", 24, &[23]),
        ("24L-uniform-3", 24, &[1, 11, 22]),
        ("24L-top-heavy-6", 24, &[18, 19, 20, 21, 22, 23]),
        ("24L-uniform-6", 24, &[1, 6, 11, 15, 19, 22]),
    ];
    for (name, depth, want) in expected {
        let sel = LayerSelection::parse(name).map_err(e2s)?;
        let got = select_layers(depth, &sel).map_err(e2s)?;
        ensure(got == want, || format!("{name}: {got:?}"))?;
    }
    Ok("9 presets".into())
}

// 8 ------------------------------------------------------------------------

fn curriculum() -> Check {
    let mut rng = Rng::new(8);
    let mut steps_seen = 0;
    for case in 0..200 {
        let k = 1 + rng.below(16) as usize;
        let n = 1 + rng.below(8) as usize;
        let b = 2 + rng.below(5) as usize;
        let mut records = Vec::new();
        let mut sizes: Vec<usize> = (0..k).map(|_| 1 + rng.below(30) as usize).collect();
        sizes[0] = sizes[0].max(b);
        for (d, &sz) in sizes.iter().enumerate() {
            for i in 0..sz {
                records.push((format!("s{d}-{i}"), format!("dom{d}")));
            }
        }
        rng.shuffle(&mut records);
        let corpus = partition_by_domain(records.iter().map(|(i, d)| (i.as_str(), d.as_str()))).map_err(e2s)?;
        let domain_of: BTreeMap<&str, &str> = records.iter().map(|(i, d)| (i.as_str(), d.as_str())).collect();
        let seed = rng.next_u64();
        let plan = build_plan(&corpus, n, b, seed).map_err(e2s)?;
        let again = build_plan(&corpus, n, b, seed).map_err(e2s)?;
        ensure(plan == again, || format!("case {case}: plan not deterministic"))?;
        ensure(plan.flags.degenerate == (k < n), || {
            format!("case {case}: degenerate flag")
        })?;
        let mut used = HashSet::new();
        for (s, step) in plan.steps.iter().enumerate() {
            ensure(step.len() == n, || {
                format!("case {case} step {s}: {} slots", step.len())
            })?;
            if k >= n {
                let doms: HashSet<&str> = step.iter().map(|sl| sl.domain.as_str()).collect();
                ensure(doms.len() == n, || {
                    format!("case {case} step {s}: workers share a domain")
                })?;
            }
            for slot in step {
                ensure(slot.ids.len() == b, || {
                    format!("case {case}: batch of {}", slot.ids.len())
                })?;
                for id in &slot.ids {
                    ensure(domain_of.get(id.as_str()) == Some(&slot.domain.as_str()), || {
                        format!("case {case}: {id} in a {} batch", slot.domain)
                    })?;
                    ensure(used.insert(id.clone()) || k < n, || {
                        format!("case {case}: {id} used twice")
                    })?;
                }
            }
        }
        if k >= n {
            ensure(used.len() + plan.flags.dropped == corpus.n_samples(), || {
                format!("case {case}: samples unaccounted")
            })?;
        }
        steps_seen += plan.steps.len();
    }
    Ok(format!("200 corpora, {steps_seen} steps"))
}

// 9 ------------------------------------------------------------------------

fn constant_cost() -> Check {
    let cfg = BenchConfig {
        model: ModelConfig::tiny(),
        doc_lens: vec![512, 4096],
        query_len: 64,
        batch: 100,
        quadratic_batch: 2,
        modes: vec![BenchMode::Offline, BenchMode::Quadratic],
        repeats: 3,
        ..BenchConfig::default()
    };
    let r = run_bench(&cfg).map_err(e2s)?;
    let row = |m, l| r.row(m, l).ok_or_else(|| format!("missing {m:?} row at {l}"));
    for l in [512, 4096] {
        let steps = row(BenchMode::Offline, l)?.recurrent_steps;
        ensure(steps == 100 * 64, || {
            format!("offline at {l}: {steps} steps for 100 pairs")
        })?;
    }

    // The same exact count for single cached documents of both lengths.
    let model = ModelWeights::init(cfg.model, 9).map_err(e2s)?;
    let rw =
        RerankerWeights::init(RerankerConfig::new(&cfg.model, &LayerSelection::Full).map_err(e2s)?, 9).map_err(e2s)?;
    let mut rng = Rng::new(9);
    let query = random_tokens(&mut rng, 64);
    for len in [512, 4096] {
        let doc = random_tokens(&mut rng, len);
        let mut s = ForwardStats::default();
        let cached = advance(&model, &insert_eos(&doc, 4, cfg.model.eos_id), None, &mut s).map_err(e2s)?;
        let entry = CacheEntry::new("d", cached, None).map_err(e2s)?;
        let mut s = ForwardStats::default();
        score_offline(&model, &entry, &query, &rw, &mut s).map_err(e2s)?;
        ensure(s.recurrent_steps == 64 && s.passes == 1, || format!("doc {len}: {s:?}"))?;
    }

    let t512 = row(BenchMode::Offline, 512)?.throughput_pairs_per_s;
    let t4096 = row(BenchMode::Offline, 4096)?.throughput_pairs_per_s;
    let flat = t4096 / t512;
    ensure(flat >= 0.85, || {
        format!("offline throughput {t4096:.1} vs {t512:.1} pairs/s ({flat:.3})")
    })?;
    let q = row(BenchMode::Quadratic, 4096)?.rerank_ms / row(BenchMode::Quadratic, 512)?.rerank_ms;
    ensure(q >= 10.0, || format!("quadratic time ratio {q:.2}"))?;
    Ok(format!(
        "offline {t512:.1} -> {t4096:.1} pairs/s ({flat:.3}), quadratic x{q:.1}"
    ))
}

// 10 -----------------------------------------------------------------------

fn cache_round_trip() -> Check {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(cfg, 10).map_err(e2s)?;
    let mut rng = Rng::new(10);
    let emb_dim = 24;
    let entries: Vec<CacheEntry> = (0..50)
        .map(|i| {
            let states = (0..cfg.n_layers)
                .map(|_| LayerState {
                    wkv: (0..cfg.n_heads)
                        .map(|_| rng.matrix(cfg.head_size, cfg.head_size, 3.0))
                        .collect(),
                    tm_shift: rng.vector(cfg.d_model, 1.0),
                    cm_shift: rng.vector(cfg.d_model, 1.0),
                })
                .collect();
            let st = StateStack::new(
                cfg.n_layers,
                (0..cfg.n_layers).collect(),
                states,
                model.fingerprint(),
                rng.below(9999),
            )
            .unwrap();
            let emb = Embedding {
                values: rng.vector(emb_dim, 1.0),
                normalized: true,
            };
            CacheEntry::new(format!("entry-{i}-{}", "x".repeat(i % 7)), st, Some(emb)).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("cache.scr");
    let layout = CacheLayout::for_model(&model, Dtype::F64, emb_dim);
    let size = write_cache(&path, &layout, &entries).map_err(e2s)?;

    let (header, back) = read_cache(&path).map_err(e2s)?;
    for (a, b) in entries.iter().zip(&back) {
        let same_emb = a.embedding.as_ref().unwrap().values.iter().map(|x| x.to_bits()).eq(b
            .embedding
            .as_ref()
            .unwrap()
            .values
            .iter()
            .map(|x| x.to_bits()));
        ensure(
            a.doc_id == b.doc_id && a.state.bit_identical(&b.state) && same_emb && a.token_count == b.token_count,
            || format!("{} differs after round trip", a.doc_id),
        )?;
    }
    let point = read_entry(&path, "entry-31-xxx", Some(&model)).map_err(e2s)?;
    ensure(point.state.bit_identical(&entries[31].state), || {
        "point read differs".into()
    })?;

    // Size from the layout definition, independently of the reader.
    let (l, h, s, d) = (cfg.n_layers, cfg.n_heads, cfg.head_size, cfg.d_model);
    let fixed = 4 + 2 + 2 + 8 + 2 + 2 + 2 + 4 + 4 + 2 + 2 * l + 1 + 8;
    let table: usize = entries.iter().map(|e| 4 + e.doc_id.len() + 8).sum();
    let entry = 8 + (emb_dim + l * (h * s * s + 2 * d)) * 8;
    let predicted = (fixed + table + entries.len() * entry + 4) as u64;
    let on_disk = std::fs::metadata(&path).map_err(e2s)?.len();
    ensure(
        predicted == on_disk && size == on_disk && header.expected_file_len() == on_disk,
        || {
            format!(
                "predicted {predicted}, header {}, file {on_disk}",
                header.expected_file_len()
            )
        },
    )?;

    let mut bytes = std::fs::read(&path).map_err(e2s)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).map_err(e2s)?;
    match read_cache(&path) {
        Err(staterank::Error::Crc { .. }) => {}
        other => return Err(format!("corrupted file gave {:?}", other.map(|_| ()))),
    }
    Ok(format!("50 entries, {on_disk} bytes"))
}

// 11 -----------------------------------------------------------------------

fn separable(
    cfg: &ModelConfig,
    layers: &[usize],
    patterns: &[Vec<Matrix>],
    n: usize,
    rng: &mut Rng,
) -> Vec<(StateStack, f64)> {
    (0..n)
        .map(|i| {
            let label = (i % 2) as f64;
            let sign = if label == 1.0 { 1.0 } else { -1.0 };
            let states = patterns
                .iter()
                .map(|heads| {
                    let mut st = LayerState::zeros(cfg.n_heads, cfg.head_size);
                    for (m, p) in st.wkv.iter_mut().zip(heads) {
                        let noise = rng.matrix(cfg.head_size, cfg.head_size, 0.5);
                        for (k, x) in m.data_mut().iter_mut().enumerate() {
                            *x = sign * p.data()[k] + noise.data()[k];
                        }
                    }
                    st
                })
                .collect();
            (
                StateStack::new(cfg.n_layers, layers.to_vec(), states, 0, 0).unwrap(),
                label,
            )
        })
        .collect()
}

fn toy_training() -> Check {
    let cfg = ModelConfig::tiny();
    let layers = [0, 2];
    let rw = RerankerWeights::init(
        RerankerConfig::new(&cfg, &LayerSelection::Explicit(layers.to_vec())).map_err(e2s)?,
        11,
    )
    .map_err(e2s)?;
    let mut rng = Rng::new(11);
    let patterns: Vec<Vec<Matrix>> = (0..layers.len())
        .map(|_| {
            (0..cfg.n_heads)
                .map(|_| rng.matrix(cfg.head_size, cfg.head_size, 0.3))
                .collect()
        })
        .collect();
    let train = separable(&cfg, &layers, &patterns, 200, &mut rng);
    let test = separable(&cfg, &layers, &patterns, 200, &mut rng);
    let opts = RerankerTrainOptions {
        lr: 0.05,
        steps: 500,
        batch_size: 16,
        seed: 1,
    };
    let (trained, losses) = train_reranker(&rw, &train, opts).map_err(e2s)?;
    let correct = test
        .iter()
        .filter(|(s, y)| {
            score_from_state(&trained, s)
                .map(|p| (p >= 0.5) == (*y == 1.0))
                .unwrap_or(false)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    ensure(acc >= 0.95, || format!("held-out accuracy {acc:.3}"))?;

    let (frozen, _) = train_reranker(&rw, &train, RerankerTrainOptions { lr: 0.0, ..opts }).map_err(e2s)?;
    let same = rw
        .flatten()
        .iter()
        .map(|x| x.to_bits())
        .eq(frozen.flatten().iter().map(|x| x.to_bits()));
    ensure(same, || "lr=0 changed the weights".into())?;
    Ok(format!(
        "accuracy {acc:.3}, loss {:.3} -> {:.3}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    ))
}

// 12 -----------------------------------------------------------------------

fn single_encoding() -> Check {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(cfg, 12).map_err(e2s)?;
    let head = EmbeddingHeadWeights::init(cfg.d_model, 32, 12);
    let rw = RerankerWeights::init(
        RerankerConfig::new(&cfg, &LayerSelection::UniformGeneric(2)).map_err(e2s)?,
        12,
    )
    .map_err(e2s)?;
    let mut rng = Rng::new(12);
    let corpus: Vec<CorpusRecord> = (0..25)
        .map(|i| {
            let len = rng.below(300) as usize;
            let text: String = (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
            CorpusRecord {
                id: format!("doc-{i:02}"),
                text,
                domain: None,
            }
        })
        .collect();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let cache = dir.path().join("c.scr");
    let summary = build_index(
        &corpus,
        &model,
        &head,
        &cache,
        &dir.path().join("e.jsonl"),
        Dtype::F64,
        2,
    )
    .map_err(e2s)?;
    ensure(summary.stats.doc_forward_passes == corpus.len() as u64, || {
        format!(
            "{} passes for {} documents",
            summary.stats.doc_forward_passes,
            corpus.len()
        )
    })?;

    let query = byte_tokens("which document mentions the answer");
    let result = RetrievalResult {
        query_id: "q".into(),
        hits: corpus
            .iter()
            .take(10)
            .map(|d| Hit {
                doc_id: d.id.clone(),
                score: 0.0,
            })
            .collect(),
        k: 10,
    };
    let mut reader = CacheReader::open(&cache).map_err(e2s)?;
    let mut stats = PipelineStats::default();
    let ranked = rerank_stage(
        &result,
        &query,
        Candidates::Offline(&mut reader),
        &model,
        &rw,
        1,
        &mut stats,
    )
    .map_err(e2s)?;
    ensure(ranked.len() == 10, || format!("{} results", ranked.len()))?;
    ensure(stats.doc_forward_passes == 0, || {
        format!("{} document passes during rerank", stats.doc_forward_passes)
    })?;
    ensure(stats.recurrent_steps == 10 * query.len() as u64, || {
        format!("{} steps", stats.recurrent_steps)
    })?;
    Ok(format!(
        "{} documents encoded once; rerank: 0 document passes, {} steps",
        corpus.len(),
        stats.recurrent_steps
    ))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Duration, fn() -> Check);
    let criteria: [Criterion; 12] = [
        ("memory table reproduction", Duration::from_secs(1), memory_table),
        ("footprint ratio identity", Duration::from_secs(1), footprint_ratio),
        (
            "offline = online bit-equivalence",
            Duration::from_secs(120),
            offline_online,
        ),
        ("recurrence oracle", Duration::from_secs(10), recurrence_oracle),
        ("gradient checks", Duration::from_secs(60), gradient_checks),
        ("loss golden values", Duration::from_secs(1), loss_goldens),
        ("layer-selection presets", Duration::from_secs(1), presets),
        ("curriculum invariants", Duration::from_secs(30), curriculum),
        (
            "constant-cost offline reranking",
            Duration::from_secs(300),
            constant_cost,
        ),
        (
            "cache round-trip and format stability",
            Duration::from_secs(10),
            cache_round_trip,
        ),
        ("toy reranker training", Duration::from_secs(120), toy_training),
        ("single-encoding guarantee", Duration::from_secs(60), single_encoding),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(_) if took > *limit => Err(format!("took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
