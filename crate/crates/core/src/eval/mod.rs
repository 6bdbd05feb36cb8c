//! Evaluation protocols: attention-as-retriever accuracy, refusal
//! precision/recall, answer accuracy, a BM25 baseline, scaling benchmarks
//! and per-layer diagnostics.

mod bm25;
mod scaling;

pub use bm25::{bm25_document, tokenize_terms, Bm25};
pub use scaling::{bench_scaling, in_context_prompt, write_scaling_csv, Method, ScalingConfig, ScalingRow};

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, AdapterSet, TokenStore};
use crate::kb::{InstructionSample, KnowledgeBase, QuestionKind, REFUSAL_PREFIX};
use crate::model::{tokenizer, AttentionTrace, Model, ModelError};
use crate::train::{build_training_sample, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("layer {layer} does not receive knowledge tokens (inject_every = {every})")]
    NotInjectionLayer { layer: usize, every: usize },
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Knowledge-part attention of one layer averaged over heads and summed over
/// query positions: one score per knowledge token.
pub fn retrieval_scores(trace: &AttentionTrace) -> Vec<f64> {
    let mean = trace.head_mean_kb();
    let mut out = vec![0.0; trace.m];
    for row in mean.chunks(trace.m.max(1)).take(trace.n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// [`retrieval_scores`] for `layer`, which must be an injection layer.
pub fn retrieval_score(model: &Model, traces: &[AttentionTrace], layer: usize) -> Result<Vec<f64>> {
    check_layer(model, layer)?;
    let trace = traces.get(layer).ok_or(EvalError::LayerOutOfRange {
        layer,
        layers: traces.len(),
    })?;
    Ok(retrieval_scores(trace))
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    let cfg = &model.config;
    if layer >= cfg.layers {
        return Err(EvalError::LayerOutOfRange {
            layer,
            layers: cfg.layers,
        });
    }
    if !cfg.is_injection_layer(layer) {
        return Err(EvalError::NotInjectionLayer {
            layer,
            every: cfg.inject_every,
        });
    }
    Ok(())
}

/// Indices ordered by descending score; ties keep the lower index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Simple questions over `count` random KBs of exactly `m` triples.
pub fn retrieval_samples(kb: &KnowledgeBase, m: usize, count: usize, seed: u64) -> Result<Vec<InstructionSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Ok(build_training_sample(kb, &mut rng, QuestionKind::Simple, [m, m])?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub index: usize,
    pub m: usize,
    pub question: String,
    pub kb_positions: Vec<usize>,
    /// Index of the relevant triple within `kb_positions`.
    pub truth: usize,
    pub scores: Vec<f64>,
    /// Rank of the relevant triple (0 = best).
    pub truth_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub method: String,
    pub m: usize,
    pub layer: Option<usize>,
    pub top1: f64,
    pub top5: f64,
    pub records: Vec<RetrievalRecord>,
}

impl RetrievalResult {
    /// Aggregates purely from per-sample records.
    pub fn from_records(method: &str, m: usize, layer: Option<usize>, records: Vec<RetrievalRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let top1 = records.iter().filter(|r| r.truth_rank == 0).count() as f64 / n;
        let top5 = records.iter().filter(|r| r.truth_rank < 5).count() as f64 / n;
        Self {
            method: method.into(),
            m,
            layer,
            top1,
            top5,
            records,
        }
    }
}

/// Scores every sample with `scorer` (one score per sample-KB triple) and
/// aggregates top-1/top-5 accuracy.
pub fn eval_retrieval_with(
    method: &str,
    m: usize,
    layer: Option<usize>,
    samples: &[InstructionSample],
    mut scorer: impl FnMut(&InstructionSample) -> Result<Vec<f64>>,
) -> Result<RetrievalResult> {
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let truth = s
            .kb_positions
            .iter()
            .position(|&p| Some(&p) == s.relevant.first())
            .ok_or_else(|| EvalError::Config(format!("sample {index} has no relevant triple")))?;
        let scores = scorer(s)?;
        if scores.len() != s.kb_positions.len() {
            return Err(EvalError::Config(format!(
                "scorer returned {} scores for {} triples",
                scores.len(),
                s.kb_positions.len()
            )));
        }
        let truth_rank = rank(&scores).iter().position(|&i| i == truth).expect("truth is ranked");
        records.push(RetrievalRecord {
            index,
            m,
            question: s.question.clone(),
            kb_positions: s.kb_positions.clone(),
            truth,
            scores,
            truth_rank,
        });
    }
    Ok(RetrievalResult::from_records(method, m, layer, records))
}

/// Attention-based scorer: runs the question prompt with the sample's
/// knowledge tokens and reads the layer's knowledge attention.
pub fn attention_scorer<'a>(
    model: &'a Model,
    adapters: &'a AdapterSet,
    store: &'a TokenStore,
    layer: usize,
) -> Result<impl FnMut(&InstructionSample) -> Result<Vec<f64>> + 'a> {
    check_layer(model, layer)?;
    Ok(move |s: &InstructionSample| {
        let packed = store.packed_subset(&s.kb_positions);
        let out = model.forward(&tokenizer::prompt(&s.question), Some(packed.context(adapters)), true)?;
        retrieval_score(model, out.traces.as_deref().unwrap_or_default(), layer)
    })
}

/// BM25 scorer over the sample KB's verbalized triples.
pub fn bm25_scorer(kb: &KnowledgeBase) -> impl FnMut(&InstructionSample) -> Result<Vec<f64>> + '_ {
    move |s: &InstructionSample| {
        let docs: Vec<String> = s
            .kb_positions
            .iter()
            .map(|&p| bm25_document(&kb.triples()[p]))
            .collect();
        Ok(Bm25::new(&docs).scores(&s.question))
    }
}

/// Attention-as-retriever accuracy for each KB size in `m_list`, over
/// `n_questions` simple questions per size. `store` must hold the tokens of
/// `kb`.
#[allow(clippy::too_many_arguments)]
pub fn eval_retrieval(
    model: &Model,
    adapters: &AdapterSet,
    store: &TokenStore,
    kb: &KnowledgeBase,
    m_list: &[usize],
    n_questions: usize,
    layer: usize,
    seed: u64,
) -> Result<Vec<RetrievalResult>> {
    store.verify(kb)?;
    let mut out = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let samples = retrieval_samples(kb, m, n_questions, seed ^ m as u64)?;
        let scorer = attention_scorer(model, adapters, store, layer)?;
        out.push(eval_retrieval_with("attention", m, Some(layer), &samples, scorer)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefusalRecord {
    pub index: usize,
    pub kind: QuestionKind,
    pub question: String,
    pub output: String,
    pub refused: bool,
}

/// Unanswerable questions are the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefusalResult {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub records: Vec<RefusalRecord>,
}

impl RefusalResult {
    /// Confusion counts and rates from per-sample records. An empty
    /// denominator yields a rate of 0.
    pub fn from_records(records: Vec<RefusalRecord>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for r in &records {
            let positive = r.kind == QuestionKind::Unanswerable;
            match (positive, r.refused) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            tp,
            fp,
            tn,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            records,
        }
    }
}

pub fn is_refusal(output: &str) -> bool {
    output.starts_with(REFUSAL_PREFIX)
}

/// Questions for the refusal protocol: `answerable` simple questions and
/// `total - answerable` unanswerable ones, each over a random KB of `m`
/// triples, interleaved in a seeded order.
pub fn refusal_samples(
    kb: &KnowledgeBase,
    total: usize,
    answerable: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<InstructionSample>> {
    if answerable > total {
        return Err(EvalError::Config(format!("{answerable} answerable out of {total}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<QuestionKind> = (0..total)
        .map(|i| {
            if i < answerable {
                QuestionKind::Simple
            } else {
                QuestionKind::Unanswerable
            }
        })
        .collect();
    rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut rng);
    kinds
        .into_iter()
        .map(|k| Ok(build_training_sample(kb, &mut rng, k, [m, m])?))
        .collect()
}

/// Greedy decode of each sample's question with its knowledge tokens.
pub fn generate_answer(
    model: &Model,
    adapters: &AdapterSet,
    store: &TokenStore,
    sample: &InstructionSample,
    max_new: usize,
) -> Result<String> {
    let packed = store.packed_subset(&sample.kb_positions);
    let out = model.generate(
        &tokenizer::prompt(&sample.question),
        Some(packed.context(adapters)),
        max_new,
    )?;
    Ok(tokenizer::decode(&out))
}

pub fn eval_refusal(
    model: &Model,
    adapters: &AdapterSet,
    store: &TokenStore,
    samples: &[InstructionSample],
    max_new: usize,
) -> Result<RefusalResult> {
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let output = generate_answer(model, adapters, store, s, max_new)?;
        records.push(RefusalRecord {
            index,
            kind: s.kind,
            question: s.question.clone(),
            refused: is_refusal(&output),
            output,
        });
    }
    Ok(RefusalResult::from_records(records))
}

/// Lowercases and collapses runs of whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Every `"; "`-separated clause of the reference must appear among the
/// output's clauses (after normalization).
pub fn answer_matches(reference: &str, output: &str) -> bool {
    let out: Vec<String> = output.split(';').map(normalize_answer).collect();
    reference
        .split(';')
        .map(normalize_answer)
        .all(|clause| out.contains(&clause))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub index: usize,
    pub kind: QuestionKind,
    pub question: String,
    pub reference: String,
    pub output: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub accuracy: f64,
    pub records: Vec<AnswerRecord>,
}

impl AnswerResult {
    pub fn from_records(records: Vec<AnswerRecord>) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
            records,
        }
    }
}

pub fn eval_answer_accuracy(
    model: &Model,
    adapters: &AdapterSet,
    store: &TokenStore,
    samples: &[InstructionSample],
    max_new: usize,
) -> Result<AnswerResult> {
    let mut records = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let output = generate_answer(model, adapters, store, s, max_new)?;
        records.push(AnswerRecord {
            index,
            kind: s.kind,
            question: s.question.clone(),
            correct: answer_matches(&s.answer, &output),
            reference: s.answer.clone(),
            output,
        });
    }
    Ok(AnswerResult::from_records(records))
}

/// `Some(diagnostic)` when BM25 top-1 falls more than `slack` below the
/// attention retriever's top-1.
pub fn bm25_tripwire(bm25: &RetrievalResult, attention: &RetrievalResult, slack: f64) -> Option<String> {
    (bm25.top1 < attention.top1 - slack).then(|| {
        format!(
            "BM25 top-1 {:.3} is more than {slack} below attention top-1 {:.3} at M={}; \
             the lexical baseline or the sample construction deserves a look",
            bm25.top1, attention.top1, attention.m
        )
    })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_retrieval_csv(results: &[RetrievalResult], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,M,layer,n,top1,top5")?;
    for r in results {
        let layer = r.layer.map_or(String::new(), |l| l.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method,
            r.m,
            layer,
            r.records.len(),
            r.top1,
            r.top5
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_refusal_csv(r: &RefusalResult, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "tp,fp,tn,fn,precision,recall")?;
    writeln!(w, "{},{},{},{},{},{}", r.tp, r.fp, r.tn, r.fn_, r.precision, r.recall)?;
    w.flush()?;
    Ok(())
}

pub fn write_answers_csv(r: &AnswerResult, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "kind,n,accuracy")?;
    for kind in QuestionKind::ALL {
        let rs: Vec<&AnswerRecord> = r.records.iter().filter(|x| x.kind == kind).collect();
        if rs.is_empty() {
            continue;
        }
        let acc = rs.iter().filter(|x| x.correct).count() as f64 / rs.len() as f64;
        writeln!(w, "{},{},{}", kind, rs.len(), acc)?;
    }
    writeln!(w, "all,{},{}", r.records.len(), r.accuracy)?;
    w.flush()?;
    Ok(())
}

/// Heatmap of one layer: rows are query tokens, columns are knowledge
/// tokens, values are head-averaged post-softmax scores.
pub fn export_attention_heatmap(trace: &AttentionTrace, tokens: &[u32], labels: &[String], path: &Path) -> Result<()> {
    if tokens.len() != trace.n || labels.len() != trace.m {
        return Err(EvalError::Config(format!(
            "heatmap needs {} token labels and {} triple labels",
            trace.n, trace.m
        )));
    }
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "token")?;
    for l in labels {
        write!(w, ",{}", quote(l))?;
    }
    writeln!(w)?;
    let mean = trace.head_mean_kb();
    for (i, &t) in tokens.iter().enumerate() {
        let label = match t {
            tokenizer::BOS => "<bos>".to_string(),
            tokenizer::SEP => "<sep>".to_string(),
            tokenizer::EOS => "<eos>".to_string(),
            tokenizer::PAD => "<pad>".to_string(),
            b => tokenizer::decode(&[b]),
        };
        write!(w, "{}", quote(&label))?;
        for v in &mean[i * trace.m..(i + 1) * trace.m] {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean coordinate-wise variance of knowledge keys and values across
/// triples, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVariance {
    pub layer: usize,
    pub key_variance: f64,
    pub value_variance: f64,
}

pub fn layer_variance_report(store: &TokenStore) -> Vec<LayerVariance> {
    let packed = store.packed();
    let var = |t: &crate::tensor::Tensor| {
        let (m, d) = (t.rows(), t.cols());
        if m == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for j in 0..d {
            let mean = (0..m).map(|i| t.at(i, j)).sum::<f64>() / m as f64;
            total += (0..m).map(|i| (t.at(i, j) - mean).powi(2)).sum::<f64>() / m as f64;
        }
        total / d as f64
    };
    packed
        .keys
        .iter()
        .zip(&packed.values)
        .enumerate()
        .map(|(layer, (k, v))| LayerVariance {
            layer,
            key_variance: var(k),
            value_variance: var(v),
        })
        .collect()
}

pub fn write_layer_variance_csv(rows: &[LayerVariance], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "layer,key_variance,value_variance")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.layer, r.key_variance, r.value_variance)?;
    }
    w.flush()?;
    Ok(())
}
