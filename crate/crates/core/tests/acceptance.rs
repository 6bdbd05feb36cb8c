//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! reports one PASS/FAIL line; exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 8`.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kblam_core::adapters::{AdapterSet, PackedTokens, TokenStore};
use kblam_core::embed::{encode_triples, HashNgram};
use kblam_core::eval::{
    self, bench_scaling, bm25_document, bm25_scorer, bm25_tripwire, eval_refusal, eval_retrieval, eval_retrieval_with,
    refusal_samples, retrieval_samples, RetrievalResult, ScalingConfig,
};
use kblam_core::kb::{synthesize_kb, KnowledgeBase, KnowledgeTriple, SynthesisConfig, REFUSAL_PREFIX};
use kblam_core::model::{
    pretrain_base, tokenizer, KnowledgeContext, Model, ModelConfig, PretrainConfig, TransformerWeights,
};
use kblam_core::tensor::Tensor;
use kblam_core::train::{self, pretraining_corpus, sample_loss, window_means, BatchSpec, TrainConfig};

const EMBED_DIM: usize = 256;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = TransformerWeights::init(&cfg, &mut rng);
    Model::new(cfg, w).unwrap()
}

fn adapters_for(model: &Model, seed: u64) -> AdapterSet {
    AdapterSet::init(
        &model.config,
        &model.weights,
        EMBED_DIM,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn kb(seed: u64, names: usize) -> KnowledgeBase {
    synthesize_kb(&SynthesisConfig {
        seed,
        num_names: names,
        ..SynthesisConfig::default()
    })
    .unwrap()
}

fn random_prompt(rng: &mut impl Rng, max_len: usize) -> Vec<u32> {
    let n = rng.random_range(1..=max_len);
    let mut t = vec![tokenizer::BOS];
    t.extend((1..n).map(|_| rng.random_range(0..tokenizer::VOCAB_SIZE as u32)));
    t
}

// ---------------------------------------------------------------------------
// Reference decoder: straightforward loops over the weights, no shared
// kernels. Returns logits and, per layer and head, the pre-softmax knowledge
// scores (unshifted) and causal prompt scores.

struct Reference {
    logits: Vec<Vec<f64>>,
    kb_scores: Vec<Vec<Vec<Vec<f64>>>>,
    prompt_scores: Vec<Vec<Vec<Vec<f64>>>>,
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    assert_eq!(x.len(), rows);
    (0..cols).map(|j| (0..rows).map(|i| x[i] * w.at(i, j)).sum()).collect()
}

fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * g).collect()
}

fn rotate(x: &mut [f64], pos: usize, heads: usize, base: f64) {
    let hd = x.len() / heads;
    for h in 0..heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 * base.powf(-((2 * i) as f64) / hd as f64);
            let (a, b) = (x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
            x[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
            x[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn reference_forward(model: &Model, tokens: &[u32], kb: Option<KnowledgeContext<'_>>) -> Reference {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, hn) = (cfg.dim, cfg.heads);
    let hd = d / hn;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = tokens.len();
    let m = kb.map_or(0, |k| k.count());
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| w.tok_emb.row(t as usize).to_vec()).collect();
    let mut kb_scores = Vec::new();
    let mut prompt_scores = Vec::new();
    for (l, lw) in w.layers.iter().enumerate() {
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, lw.attn_norm.data(), cfg.norm_eps)).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wq)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vecmat(r, &lw.wv)).collect();
        for i in 0..n {
            rotate(&mut q[i], i, hn, cfg.rope_base);
            rotate(&mut k[i], i, hn, cfg.rope_base);
        }
        let use_kb = m > 0 && l % cfg.inject_every == 0;
        let qk: Vec<Vec<f64>> = if use_kb {
            h.iter().map(|r| vecmat(r, &kb.unwrap().query_heads[l])).collect()
        } else {
            Vec::new()
        };
        let shift = if use_kb && cfg.scale_enabled {
            cfg.scale_c.ln() - (m as f64).ln()
        } else {
            0.0
        };
        let mut attn = vec![vec![0.0; d]; n];
        let mut layer_kb = Vec::new();
        let mut layer_prompt = Vec::new();
        for head in 0..hn {
            let cols = head * hd..(head + 1) * hd;
            let dot = |a: &[f64], b: &[f64]| cols.clone().map(|c| a[c] * b[c]).sum::<f64>() * scale;
            let mut head_kb = Vec::new();
            let mut head_prompt = Vec::new();
            for i in 0..n {
                let ks: Vec<f64> = if use_kb {
                    let kt = &kb.unwrap().keys[l];
                    (0..m).map(|j| dot(&qk[i], kt.row(j))).collect()
                } else {
                    Vec::new()
                };
                let ps: Vec<f64> = (0..=i).map(|t| dot(&q[i], &k[t])).collect();
                let all: Vec<f64> = ks.iter().map(|s| s + shift).chain(ps.iter().copied()).collect();
                let mx = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = all.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    let mut acc = 0.0;
                    for j in 0..ks.len() {
                        acc += e[j] / z * kb.unwrap().values[l].at(j, c);
                    }
                    for t in 0..=i {
                        acc += e[ks.len() + t] / z * v[t][c];
                    }
                    attn[i][c] = acc;
                }
                head_kb.push(ks);
                head_prompt.push(ps);
            }
            layer_kb.push(head_kb);
            layer_prompt.push(head_prompt);
        }
        kb_scores.push(layer_kb);
        prompt_scores.push(layer_prompt);
        for i in 0..n {
            let o = vecmat(&attn[i], &lw.wo);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let hf = rms(&x[i], lw.ffn_norm.data(), cfg.norm_eps);
            let f: Vec<f64> = vecmat(&hf, &lw.w1)
                .into_iter()
                .map(|z| z / (1.0 + (-z).exp()))
                .collect();
            let f = vecmat(&f, &lw.w2);
            x[i].iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
    }
    let logits = x
        .iter()
        .map(|r| vecmat(&rms(r, w.final_norm.data(), cfg.norm_eps), &w.head))
        .collect();
    Reference {
        logits,
        kb_scores,
        prompt_scores,
    }
}

fn max_abs_vs_reference(out: &Tensor, reference: &[Vec<f64>]) -> f64 {
    reference
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| (out.at(i, j) - v).abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let model = random_model(ModelConfig::default(), 11);
    let adapters = adapters_for(&model, 12);
    let empty = PackedTokens::pack(std::iter::empty(), model.config.layers, model.config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let prompt = random_prompt(&mut rng, 48);
        let reference = reference_forward(&model, &prompt, None);
        let with_empty = model.forward(&prompt, Some(empty.context(&adapters)), false).unwrap();
        let without = model.forward(&prompt, None, false).unwrap();
        worst = worst
            .max(max_abs_vs_reference(&with_empty.logits, &reference.logits))
            .max(max_abs_vs_reference(&without.logits, &reference.logits));
    }
    check(
        worst <= 1e-12,
        format!("max |logit - base logit| over 50 prompts = {worst:.3e} (tol 1e-12)"),
    )
}

fn criterion_2() -> Outcome {
    let model = random_model(ModelConfig::default(), 21);
    let adapters = adapters_for(&model, 22);
    let base = kb(23, 11);
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let store = TokenStore::build(&base, &backend, &adapters).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let positions: Vec<usize> = (0..32).collect();
    let prompt = tokenizer::prompt("What is the purpose of Amber Harbor and Nova Citadel?");
    let packed = store.packed_subset(&positions);
    let reference = model
        .forward(&prompt, Some(packed.context(&adapters)), false)
        .unwrap()
        .logits;
    let scale = reference.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut perm = positions.clone();
        perm.shuffle(&mut rng);
        let packed = store.packed_subset(&perm);
        let out = model
            .forward(&prompt, Some(packed.context(&adapters)), false)
            .unwrap()
            .logits;
        worst = worst.max(out.max_abs_diff(&reference) / scale);
    }
    check(
        worst <= 1e-6,
        format!("max relative logit change over 20 permutations of M=32 = {worst:.3e} (tol 1e-6)"),
    )
}

fn criterion_3() -> Outcome {
    let model = random_model(ModelConfig::default(), 31);
    let adapters = adapters_for(&model, 32);
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let mut base = kb(33, 22).subset(&(0..64).collect::<Vec<_>>()).unwrap();
    let mut store = TokenStore::build(&base, &backend, &adapters).unwrap();
    let target = base.triples()[17].clone();
    let before = store.encode_calls();
    store
        .upsert_triple(
            &mut base,
            &backend,
            &adapters,
            KnowledgeTriple::new(
                &target.name,
                &target.property,
                "a freshly painted lighthouse for counting gulls",
            )
            .unwrap(),
        )
        .unwrap();
    let calls = store.encode_calls() - before;
    let fresh = TokenStore::build(&base, &backend, &adapters).unwrap();
    let prompt = tokenizer::prompt(&format!("What is the {} of {}?", target.property, target.name));
    let (a, b) = (store.packed(), fresh.packed());
    let gen_a = model.generate(&prompt, Some(a.context(&adapters)), 64).unwrap();
    let gen_b = model.generate(&prompt, Some(b.context(&adapters)), 64).unwrap();
    let la = model
        .forward(&prompt, Some(a.context(&adapters)), false)
        .unwrap()
        .logits;
    let lb = model
        .forward(&prompt, Some(b.context(&adapters)), false)
        .unwrap()
        .logits;
    let bits_equal = la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        calls == 1 && gen_a == gen_b && bits_equal && store == fresh && base.len() == 64,
        format!(
            "encode calls = {calls}, generation identical = {}, logits bit-identical = {bits_equal}, tokens equal = {}",
            gen_a == gen_b,
            store == fresh
        ),
    )
}

fn criterion_4() -> Outcome {
    let model = random_model(ModelConfig::default(), 41);
    let adapters = adapters_for(&model, 42);
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let one = kb(43, 1);
    let store = TokenStore::build(&one, &backend, &adapters).unwrap();
    let prompt = tokenizer::prompt("Describe the purpose of Nova Citadel.");
    let cfg = &model.config;
    let single = store.packed_subset(&[0]);
    let reference = reference_forward(&model, &prompt, Some(single.context(&adapters)));
    let mut spread: f64 = 0.0;
    let mut closed_gap: f64 = 0.0;
    let mut first: Option<Vec<f64>> = None;
    for m in [1usize, 2, 8, 64, 512] {
        let packed = store.packed_subset(&vec![0; m]);
        let out = model.forward(&prompt, Some(packed.context(&adapters)), true).unwrap();
        let mut masses = Vec::new();
        for trace in out.traces.unwrap() {
            for h in 0..trace.heads {
                for r in 0..trace.n {
                    let mass: f64 = (0..trace.m).map(|j| trace.kb_prob(h, r, j)).sum();
                    masses.push(mass);
                    let w_kb = reference.kb_scores[trace.layer][h][r][0];
                    let prompt_sum: f64 = reference.prompt_scores[trace.layer][h][r].iter().map(|w| w.exp()).sum();
                    let closed = cfg.scale_c * w_kb.exp() / (cfg.scale_c * w_kb.exp() + prompt_sum);
                    closed_gap = closed_gap.max((mass - closed).abs());
                }
            }
        }
        match &first {
            None => first = Some(masses),
            Some(f) => spread = f.iter().zip(&masses).map(|(a, b)| (a - b).abs()).fold(spread, f64::max),
        }
    }
    check(
        spread < 1e-9 && closed_gap < 1e-9,
        format!("KB mass spread across M in {{1,2,8,64,512}} = {spread:.3e}, max gap to closed form = {closed_gap:.3e} (tol 1e-9)"),
    )
}

fn criterion_5() -> Outcome {
    let model = random_model(ModelConfig::default(), 51);
    let mut adapters = adapters_for(&model, 52);
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let base = kb(53, 3);
    let bases = encode_triples(&backend, base.triples()).unwrap();
    let refs: Vec<_> = bases.iter().collect();
    let t = &base.triples()[4];
    let q = format!("What is the {} of {}?", t.property, t.name);
    let a = format!("The {} of {} is {}", t.property, t.name, t.value);
    let (_, grads) = sample_loss(&model, &adapters, &refs, &q, &a, true, true).unwrap();
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let n_tensors = grads.len();
    for ti in 0..n_tensors {
        for _ in 0..6 {
            let idx = rng.random_range(0..grads[ti].len());
            let orig = adapters.tensors_mut()[ti].data()[idx];
            let mut loss_at = |delta: f64| {
                adapters.tensors_mut()[ti].data_mut()[idx] = orig + delta;
                let (l, _) = sample_loss(&model, &adapters, &refs, &q, &a, true, false).unwrap();
                adapters.tensors_mut()[ti].data_mut()[idx] = orig;
                l
            };
            // Five-point central stencil: truncation error O(h^4).
            let fd = (-loss_at(2.0 * h) + 8.0 * loss_at(h) - 8.0 * loss_at(-h) + loss_at(-2.0 * h)) / (12.0 * h);
            let g = grads[ti][idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(
        worst <= 1e-4,
        format!("max relative error over {checked} adapter coordinates (L=4, D=64) = {worst:.3e} (tol 1e-4)"),
    )
}

fn criterion_6() -> Outcome {
    let mut problems = Vec::new();
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    for inject_every in [1usize, 3] {
        let model = random_model(
            ModelConfig {
                inject_every,
                ..ModelConfig::default()
            },
            61,
        );
        let adapters = adapters_for(&model, 62);
        let base = kb(63, 10);
        let store = TokenStore::build(&base, &backend, &adapters).unwrap();
        for (n, m) in [(5usize, 1usize), (17, 7), (32, 30)] {
            let packed = store.packed_subset(&(0..m).collect::<Vec<_>>());
            let mut prompt = vec![tokenizer::BOS];
            prompt.extend(tokenizer::encode(&"x".repeat(n - 1)));
            let out = model.forward(&prompt, Some(packed.context(&adapters)), false).unwrap();
            let injected = model.config.injection_layers().len() as u64;
            let want = injected * model.config.heads as u64 * (n * m) as u64;
            if out.stats.kb_score_entries != want {
                problems.push(format!(
                    "K={inject_every} N={n} M={m}: {} != {want}",
                    out.stats.kb_score_entries
                ));
            }
        }
    }

    let model = random_model(ModelConfig::default(), 64);
    let adapters = adapters_for(&model, 65);
    let base = kb(66, 700);
    let store = TokenStore::build(&base, &backend, &adapters).unwrap();
    let cfg = ScalingConfig {
        m_list: vec![1, 2, 4, 8, 16, 256, 2048],
        n_fixed: 32,
        repeats: 7,
        in_context_max_tokens: 1024,
    };
    let rows = bench_scaling(&model, &adapters, &store, base.triples(), &cfg).unwrap();
    let rect: HashMap<usize, _> = rows
        .iter()
        .filter(|r| r.method == eval::Method::Rectangular)
        .map(|r| (r.m, r))
        .collect();
    let ic: Vec<_> = rows.iter().filter(|r| r.method == eval::Method::InContext).collect();
    for r in rect.values() {
        if r.entries != r.analytic_entries {
            problems.push(format!(
                "rectangular M={}: counted {} analytic {}",
                r.m, r.entries, r.analytic_entries
            ));
        }
    }
    let (l, h) = (model.config.layers as u64, model.config.heads as u64);
    let mut timed_ic = 0;
    for r in &ic {
        let t = (r.n + r.context_tokens) as u64;
        if r.analytic_entries != l * h * t * (t + 1) / 2 || r.entries != r.analytic_entries {
            problems.push(format!(
                "in-context M={}: counted {} closed form {}",
                r.m,
                r.entries,
                l * h * t * (t + 1) / 2
            ));
        }
        timed_ic += r.median_ms.is_some() as usize;
    }
    let mut worst_quad: f64 = 0.0;
    for pair in ic.windows(2).filter(|p| p[1].m == 2 * p[0].m) {
        let (a, b) = (pair[0], pair[1]);
        let observed = b.entries as f64 / a.entries as f64;
        let predicted = ((b.n + b.context_tokens) as f64 / (a.n + a.context_tokens) as f64).powi(2);
        worst_quad = worst_quad.max((observed / predicted - 1.0).abs());
    }
    if worst_quad > 0.10 {
        problems.push(format!("in-context growth deviates {worst_quad:.3} from quadratic"));
    }
    let ratio = rect[&2048].median_ms.unwrap() / rect[&256].median_ms.unwrap();
    if ratio > 10.0 {
        problems.push(format!("time(M=2048)/time(M=256) = {ratio:.2} > 10"));
    }
    let detail = format!(
        "KB entries = N*M per injected layer-head (K in {{1,3}}); time ratio 2048/256 = {ratio:.2}; \
         {timed_ic} instrumented in-context counts equal the closed form; quadratic growth deviation {worst_quad:.4}"
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; problems: {}", problems.join("; ")))
    }
}

fn criterion_8() -> Outcome {
    let model = random_model(
        ModelConfig {
            layers: 2,
            dim: 32,
            heads: 2,
            ffn_hidden: 64,
            retrieval_layer: 1,
            ..ModelConfig::default()
        },
        81,
    );
    let adapters = adapters_for(&model, 82);
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let base = kb(83, 20);
    let store = TokenStore::build(&base, &backend, &adapters).unwrap();
    let mut problems = Vec::new();

    let results = eval_retrieval(&model, &adapters, &store, &base, &[4, 8], 25, 1, 84).unwrap();
    for r in &results {
        let mut top1 = 0;
        let mut top5 = 0;
        for rec in &r.records {
            let t = rec.scores[rec.truth];
            let rank = rec
                .scores
                .iter()
                .enumerate()
                .filter(|&(i, &s)| s > t || (s == t && i < rec.truth))
                .count();
            if rank != rec.truth_rank {
                problems.push(format!("rank mismatch in record {}", rec.index));
            }
            top1 += (rank == 0) as usize;
            top5 += (rank < 5) as usize;
        }
        let n = r.records.len() as f64;
        if r.top1 != top1 as f64 / n || r.top5 != top5 as f64 / n {
            problems.push(format!("retrieval aggregate mismatch at M={}", r.m));
        }
    }
    let samples = retrieval_samples(&base, 6, 20, 85).unwrap();
    let oracle = eval_retrieval_with("oracle", 6, None, &samples, |s| {
        Ok(s.kb_positions
            .iter()
            .map(|p| (Some(p) == s.relevant.first()) as u8 as f64)
            .collect())
    })
    .unwrap();
    if oracle.top1 != 1.0 {
        problems.push(format!("oracle scorer top-1 = {}", oracle.top1));
    }

    let samples = refusal_samples(&base, 20, 16, 4, 86).unwrap();
    let r = eval_refusal(&model, &adapters, &store, &samples, 24).unwrap();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for rec in &r.records {
        let refused = rec.output.starts_with(REFUSAL_PREFIX);
        let positive = samples[rec.index].answer.starts_with(REFUSAL_PREFIX);
        match (positive, refused) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            _ => {}
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    if (r.tp, r.fp, r.fn_) != (tp, fp, fn_) || r.precision != rate(tp, tp + fp) || r.recall != rate(tp, tp + fn_) {
        problems.push("refusal aggregate mismatch".into());
    }

    // BM25 against a direct transcription of the scoring formula.
    let ten = base.subset(&(0..10).collect::<Vec<_>>()).unwrap();
    let docs: Vec<Vec<String>> = ten
        .iter()
        .map(|t| {
            bm25_document(t)
                .to_lowercase()
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect()
        })
        .collect();
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / docs.len() as f64;
    let (k1, b) = (1.2, 0.75);
    let n_docs = docs.len() as f64;
    let direct = |query: &str| -> Vec<usize> {
        let terms: Vec<String> = query
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        let scores: Vec<f64> = docs
            .iter()
            .map(|d| {
                terms
                    .iter()
                    .map(|t| {
                        let f = d.iter().filter(|w| *w == t).count() as f64;
                        let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                        let idf = ((n_docs - df + 0.5) / (df + 0.5) + 1.0).ln();
                        idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * d.len() as f64 / avg))
                    })
                    .sum()
            })
            .collect();
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
        order
    };
    let index = eval::Bm25::new(&ten.iter().map(bm25_document).collect::<Vec<_>>());
    let mut queries: Vec<String> = ten
        .iter()
        .map(|t| format!("What is the {} of {}?", t.property, t.name))
        .collect();
    queries.push("zebra".into());
    queries.push("Tell me about a quiet garden for baking bread".into());
    for q in &queries {
        if index.rank(q) != direct(q) {
            problems.push(format!("BM25 ranking differs for {q:?}"));
        }
    }
    let detail = format!(
        "retrieval ({} records), refusal ({} records) and {} BM25 rankings match brute force; oracle scorer top-1 = {}",
        results.iter().map(|r| r.records.len()).sum::<usize>(),
        r.records.len(),
        queries.len(),
        oracle.top1
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; problems: {}", problems.join("; ")))
    }
}

/// Tiny seeded run: pretrain, train, evaluate; returns the bytes of the
/// adapter checkpoint and every CSV.
fn tiny_run(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let cfg = ModelConfig {
        layers: 2,
        dim: 16,
        heads: 2,
        ffn_hidden: 32,
        retrieval_layer: 1,
        ..ModelConfig::default()
    };
    let corpus = pretraining_corpus(&[kb(91, 30)], &BatchSpec::desk().mixture, 200, 92).unwrap();
    let (weights, _) = pretrain_base(
        &cfg,
        &corpus,
        &PretrainConfig {
            steps: 5,
            batch_size: 2,
            ..PretrainConfig::default()
        },
        |_| {},
    )
    .unwrap();
    let model = Model::new(cfg, weights).unwrap();
    let backend = HashNgram::new(32).unwrap();
    let data = kb(93, 12);
    let bases = encode_triples(&backend, data.triples()).unwrap();
    let mut adapters = AdapterSet::init(&model.config, &model.weights, 32, &mut ChaCha8Rng::seed_from_u64(94));
    let metrics = train::train(&model, &data, &bases, &mut adapters, &TrainConfig::desk(4, 95), |_| {}).unwrap();
    let store = TokenStore::build(&data, &backend, &adapters).unwrap();
    let retrieval = eval_retrieval(&model, &adapters, &store, &data, &[4], 6, 1, 96).unwrap();
    let refusal = eval_refusal(
        &model,
        &adapters,
        &store,
        &refusal_samples(&data, 5, 4, 4, 97).unwrap(),
        16,
    )
    .unwrap();
    let files = ["adapters.ckpt", "train_metrics.csv", "retrieval.csv", "refusal.csv"];
    adapters.save(&dir.join(files[0])).unwrap();
    train::write_metrics_csv(&metrics, &dir.join(files[1])).unwrap();
    eval::write_retrieval_csv(&retrieval, &dir.join(files[2])).unwrap();
    eval::write_refusal_csv(&refusal, &dir.join(files[3])).unwrap();
    files
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

fn criterion_9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (tiny_run(a.path()), tiny_run(b.path()));
    let differing: Vec<&str> = ra
        .iter()
        .zip(&rb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let total: usize = ra.iter().map(|(_, b)| b.len()).sum();
    check(
        differing.is_empty(),
        format!(
            "{} artifacts ({total} bytes) compared; differing: {differing:?}",
            ra.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Desk-scale learning run shared by criteria 7 and 10.

const PRETRAIN_STEPS: usize = 2000;
const TRAIN_STEPS: usize = 3000;

struct LearningRun {
    model: Model,
    adapters: AdapterSet,
    store: TokenStore,
    held_out: KnowledgeBase,
    window_means: Vec<f64>,
    attention: RetrievalResult,
    refusal_recall: f64,
    refusal_precision: f64,
}

fn learning_run() -> LearningRun {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let corpus_kbs: Vec<KnowledgeBase> = (0..20).map(|k| kb(1000 + k, 500)).collect();
    let corpus = pretraining_corpus(&corpus_kbs, &BatchSpec::desk().mixture, 20_000, 1).unwrap();
    let (weights, _) = pretrain_base(
        &cfg,
        &corpus,
        &PretrainConfig {
            steps: PRETRAIN_STEPS,
            ..PretrainConfig::default()
        },
        |l| {
            if (l.step + 1) % 500 == 0 {
                eprintln!(
                    "  pretrain step {} loss {:.4} ({:.0}s)",
                    l.step + 1,
                    l.loss,
                    start.elapsed().as_secs_f64()
                );
            }
        },
    )
    .unwrap();
    let model = Model::new(cfg, weights).unwrap();

    // 1.5K training triples; the remaining names are held out.
    let full = kb(7, 600);
    let train_kb = full.subset(&(0..1500).collect::<Vec<_>>()).unwrap();
    let held_out = full.subset(&(1500..full.len()).collect::<Vec<_>>()).unwrap();
    let backend = HashNgram::new(EMBED_DIM).unwrap();
    let bases = encode_triples(&backend, train_kb.triples()).unwrap();
    let mut adapters = adapters_for(&model, 2);
    let tc = TrainConfig::desk(TRAIN_STEPS, 3);
    let metrics = train::train(&model, &train_kb, &bases, &mut adapters, &tc, |m| {
        if (m.step + 1) % 500 == 0 {
            eprintln!(
                "  train step {} loss {:.4} ({:.0}s)",
                m.step + 1,
                m.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();

    let store = TokenStore::build(&held_out, &backend, &adapters).unwrap();
    let layer = model.config.retrieval_layer;
    let attention = eval_retrieval(&model, &adapters, &store, &held_out, &[16], 100, layer, 9)
        .unwrap()
        .remove(0);
    let samples = refusal_samples(&held_out, 100, 80, 16, 5).unwrap();
    let refusal = eval_refusal(&model, &adapters, &store, &samples, 160).unwrap();
    LearningRun {
        window_means: window_means(&metrics, 500),
        model,
        adapters,
        store,
        held_out,
        attention,
        refusal_recall: refusal.recall,
        refusal_precision: refusal.precision,
    }
}

fn criterion_7(run: &LearningRun) -> Outcome {
    let w = &run.window_means;
    let decreasing = w.len() == TRAIN_STEPS / 500 && w.windows(2).all(|p| p[1] < p[0]);
    let means: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
    check(
        decreasing && run.attention.top1 >= 0.31 && run.refusal_recall >= 0.5,
        format!(
            "500-step loss means [{}] strictly decreasing = {decreasing}; held-out M=16 top-1 at layer {} = {:.2} (need 0.31, \
             chance 0.0625); refusal recall = {:.2} (need 0.5), precision = {:.2}",
            means.join(", "),
            run.model.config.retrieval_layer,
            run.attention.top1,
            run.refusal_recall,
            run.refusal_precision
        ),
    )
}

fn criterion_10(run: &LearningRun) -> Outcome {
    let samples = retrieval_samples(&run.held_out, 16, 100, 9 ^ 16).unwrap();
    let bm25 = eval_retrieval_with("bm25", 16, None, &samples, bm25_scorer(&run.held_out)).unwrap();
    let same_questions = bm25
        .records
        .iter()
        .zip(&run.attention.records)
        .all(|(a, b)| a.question == b.question);
    let diagnostic = bm25_tripwire(&bm25, &run.attention, 0.25);
    let within = bm25.top1 >= run.attention.top1 - 0.25;
    let _ = (&run.adapters, &run.store);
    check(
        same_questions && (within || diagnostic.is_some()) && within != diagnostic.is_some(),
        format!(
            "BM25 top-1 = {:.2}, attention top-1 = {:.2}; {}",
            bm25.top1,
            run.attention.top1,
            diagnostic.unwrap_or_else(|| "no diagnostic needed".into())
        ),
    )
}

// ---------------------------------------------------------------------------

fn run_criterion(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("[PASS] {id:>2} {name}: {detail} ({secs:.1}s)");
            true
        }
        Err(detail) => {
            println!("[FAIL] {id:>2} {name}: {detail} ({secs:.1}s)");
            false
        }
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut failed = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "fallback equivalence", criterion_1),
        (2, "permutation invariance", criterion_2),
        (3, "dynamic update", criterion_3),
        (4, "scaling shift", criterion_4),
        (5, "gradient correctness", criterion_5),
        (6, "complexity", criterion_6),
        (8, "metric oracles", criterion_8),
        (9, "reproducibility", criterion_9),
    ];
    for (id, name, f) in quick {
        if wanted(id) && !run_criterion(id, name, f) {
            failed.push(id);
        }
    }
    if wanted(7) || wanted(10) {
        let run = catch_unwind(learning_run);
        for (id, name, f) in [
            (7, "desk-scale learning", criterion_7 as fn(&LearningRun) -> Outcome),
            (10, "retrieval baseline sanity", criterion_10),
        ] {
            if !wanted(id) {
                continue;
            }
            let ok = match &run {
                Ok(r) => run_criterion(id, name, || f(r)),
                Err(_) => run_criterion(id, name, || Err("learning run panicked".into())),
            };
            if !ok {
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
