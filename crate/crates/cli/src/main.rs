use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kblam_core::adapters::{AdapterSet, TokenStore};
use kblam_core::embed::{encode_triples, BackendConfig, EmbeddingBackend};
use kblam_core::eval::{self, bm25_scorer, bm25_tripwire, eval_retrieval_with, retrieval_samples, ScalingConfig};
use kblam_core::kb::{load_kb, save_kb, synthesize_kb, KnowledgeBase, KnowledgeTriple, SynthesisConfig};
use kblam_core::model::{pretrain_base, tokenizer, Model, ModelConfig, PretrainConfig, TransformerWeights};
use kblam_core::train::{self, build_training_sample, pretraining_corpus, write_metrics_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "kblam", version, about = "Knowledge-token augmented language model pipeline")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Knowledge base (JSON lines of name/property/value).
    #[arg(long, global = true)]
    kb: Option<PathBuf>,
    /// Knowledge-token store.
    #[arg(long, global = true)]
    tokens: Option<PathBuf>,
    /// Adapter checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long, global = true)]
    base: Option<PathBuf>,
    /// Embedding cache file.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Layer whose knowledge attention is read for retrieval and heatmaps.
    #[arg(long, global = true)]
    layer: Option<usize>,
    /// Comma-separated knowledge-base sizes.
    #[arg(long = "M-list", global = true, value_delimiter = ',')]
    m_list: Option<Vec<usize>>,
    /// Constant of the knowledge-score shift.
    #[arg(long = "scale-C", global = true)]
    scale_c: Option<f64>,
    /// Inject knowledge every this many layers.
    #[arg(long, global = true)]
    inject_every: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic knowledge base.
    Synth {
        #[arg(long)]
        names: Option<usize>,
    },
    /// Compute base embeddings of every triple.
    Embed,
    /// Train the base model on question/answer text.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Instruction-tune the adapters with the base model frozen.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Encode the knowledge base into a token store.
    Encode,
    /// Answer a question with the whole knowledge base injected.
    Ask {
        #[arg(long)]
        question: String,
        /// `name=..,property=..,value=..`: insert or replace one triple first.
        #[arg(long)]
        kb_update: Option<String>,
        /// Also print the five triples the model attends to most.
        #[arg(long)]
        evidence: bool,
        /// Generation limit in bytes.
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Evaluate retrieval, refusal or answer accuracy.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Time rectangular attention against the in-context baseline.
    Bench {
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Export attention heatmaps or per-layer token variance.
    Export {
        #[command(subcommand)]
        what: ExportCommand,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Attention-as-retriever accuracy, with BM25 for reference.
    Retrieval,
    /// Refusal precision and recall.
    Refusal,
    /// Normalized exact-match answer accuracy.
    Answers {
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum ExportCommand {
    /// Knowledge attention of one question at `--layer`.
    Heatmap {
        #[arg(long)]
        question: String,
    },
    /// Per-layer variance of knowledge keys and values.
    LayerVariance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusConfig {
    /// Question/answer pairs generated for pretraining.
    size: usize,
    /// The corpus is drawn from `kb_count` synthetic KBs seeded
    /// `kb_seed, kb_seed + 1, ...` with `kb_names` names each.
    kb_count: usize,
    kb_seed: u64,
    kb_names: usize,
    seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 20_000,
            kb_count: 20,
            kb_seed: 1000,
            kb_names: 500,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    /// When non-zero, names occurring in the first `train_triples` triples
    /// are used for training and all other names for evaluation.
    train_triples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    m_list: Vec<usize>,
    n_questions: usize,
    /// Defaults to the model's retrieval layer.
    layer: Option<usize>,
    refusal_total: usize,
    refusal_answerable: usize,
    refusal_m: usize,
    answer_samples: usize,
    answer_m: usize,
    max_new: usize,
    /// A diagnostic is emitted when BM25 top-1 trails attention by more than this.
    bm25_slack: f64,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m_list: vec![16],
            n_questions: 100,
            layer: None,
            refusal_total: 100,
            refusal_answerable: 80,
            refusal_m: 16,
            answer_samples: 100,
            answer_m: 16,
            max_new: 160,
            bm25_slack: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PathsConfig {
    kb: Option<PathBuf>,
    tokens: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    base: Option<PathBuf>,
    cache: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    synth: SynthesisConfig,
    embed: BackendConfig,
    model: ModelConfig,
    corpus: CorpusConfig,
    pretrain: PretrainConfig,
    train: TrainConfig,
    split: SplitConfig,
    eval: EvalConfig,
    bench: ScalingConfig,
    paths: PathsConfig,
}

/// Names the offending key of a TOML error by looking at the source line
/// the error points to and its enclosing table header.
fn describe_toml_error(src: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    let Some(span) = e.span() else {
        return msg;
    };
    let before = &src[..span.start.min(src.len())];
    let line_no = before.matches('\n').count();
    let lines: Vec<&str> = src.lines().collect();
    let Some(line) = lines.get(line_no) else {
        return msg;
    };
    let table = lines[..line_no]
        .iter()
        .rev()
        .map(|l| l.trim())
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    match line.split_once('=') {
        Some((key, _)) => {
            let key = key.trim();
            let full = match table {
                Some(t) if !t.is_empty() => format!("{t}.{key}"),
                _ => key.to_string(),
            };
            format!("key `{full}`: {msg}")
        }
        None => format!("line {}: {msg}", line_no + 1),
    }
}

impl RunConfig {
    fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let src = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<RunConfig>(&src)
                    .map_err(|e| anyhow!("config {}: {}", path.display(), describe_toml_error(&src, &e)))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
            cfg.pretrain.seed = s;
            cfg.train.seed = s;
            cfg.eval.seed = s;
        }
        let p = &mut cfg.paths;
        for (slot, flag) in [
            (&mut p.kb, &cli.kb),
            (&mut p.tokens, &cli.tokens),
            (&mut p.checkpoint, &cli.checkpoint),
            (&mut p.base, &cli.base),
            (&mut p.cache, &cli.cache),
            (&mut p.out, &cli.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(l) = cli.layer {
            cfg.eval.layer = Some(l);
        }
        if let Some(m) = &cli.m_list {
            cfg.eval.m_list.clone_from(m);
            cfg.bench.m_list.clone_from(m);
        }
        if let Some(c) = cli.scale_c {
            cfg.model.scale_c = c;
        }
        if let Some(k) = cli.inject_every {
            cfg.model.inject_every = k;
        }
        match &cli.command {
            Command::Synth { names: Some(n) } => cfg.synth.num_names = *n,
            Command::Pretrain { steps: Some(s) } => cfg.pretrain.steps = *s,
            Command::Train { steps: Some(s) } => cfg.train.optimizer.total_steps = *s,
            Command::Ask { max_new: Some(n), .. } => cfg.eval.max_new = *n,
            Command::Bench { repeats: Some(r) } => cfg.bench.repeats = *r,
            Command::Eval {
                what: EvalCommand::Answers { samples: Some(s) },
            } => cfg.eval.answer_samples = *s,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.synth
            .validate()
            .map_err(|e| anyhow!("invalid config key `synth`: {e}"))?;
        self.model
            .validate()
            .map_err(|e| anyhow!("invalid config key `model`: {e}"))?;
        self.train
            .validate()
            .map_err(|e| anyhow!("invalid config key `train`: {e}"))?;
        if self.eval.m_list.iter().chain(&self.bench.m_list).any(|&m| m == 0) {
            bail!("invalid config key `eval.m_list`: sizes must be positive");
        }
        if self.eval.refusal_answerable > self.eval.refusal_total {
            bail!("invalid config key `eval.refusal_answerable`: exceeds eval.refusal_total");
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    /// Explicit path, else `default_name` inside the run directory.
    fn input(&self, explicit: &Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir().join(default_name))
    }

    fn kb_path(&self) -> PathBuf {
        self.input(&self.paths.kb, "kb.jsonl")
    }

    fn backend(&self) -> Result<Box<dyn EmbeddingBackend>> {
        self.embed
            .build(self.paths.cache.as_deref())
            .context("building the embedding backend")
    }

    fn load_kb(&self) -> Result<KnowledgeBase> {
        let path = self.kb_path();
        load_kb(&path).with_context(|| format!("loading knowledge base {}", path.display()))
    }

    /// Architecture from the checkpoint, injection settings from the run.
    fn load_model(&self) -> Result<Model> {
        let path = self.input(&self.paths.base, "base.ckpt");
        let (mut mcfg, weights) =
            TransformerWeights::load(&path).with_context(|| format!("loading base model {}", path.display()))?;
        mcfg.inject_every = self.model.inject_every;
        mcfg.scale_c = self.model.scale_c;
        mcfg.scale_enabled = self.model.scale_enabled;
        mcfg.retrieval_layer = self.model.retrieval_layer.min(mcfg.layers.saturating_sub(1));
        Ok(Model::new(mcfg, weights)?)
    }

    fn load_adapters(&self) -> Result<AdapterSet> {
        let path = self.input(&self.paths.checkpoint, "adapters.ckpt");
        AdapterSet::load(&path).with_context(|| format!("loading adapters {}", path.display()))
    }

    fn layer(&self, model: &Model) -> usize {
        self.eval.layer.unwrap_or(model.config.retrieval_layer)
    }
}

/// Exclusive lock on a token-store directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".kblam.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "token store directory {} is locked ({} exists)",
                    dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Training and evaluation views of `kb`: split by name when configured.
fn split_kb(kb: &KnowledgeBase, train_triples: usize) -> Result<(KnowledgeBase, KnowledgeBase)> {
    if train_triples == 0 || train_triples >= kb.len() {
        return Ok((kb.clone(), kb.clone()));
    }
    let names: HashSet<&str> = kb.triples()[..train_triples].iter().map(|t| t.name.as_str()).collect();
    let (train, held): (Vec<usize>, Vec<usize>) =
        (0..kb.len()).partition(|&i| names.contains(kb.triples()[i].name.as_str()));
    Ok((kb.subset(&train)?, kb.subset(&held)?))
}

/// Token store for `kb`: loaded from `--tokens` when given and matching,
/// otherwise encoded from scratch.
fn store_for(cfg: &RunConfig, kb: &KnowledgeBase, adapters: &AdapterSet, allow_file: bool) -> Result<TokenStore> {
    if let (true, Some(path)) = (allow_file, &cfg.paths.tokens) {
        let _lock = DirLock::acquire(parent_dir(path))?;
        return TokenStore::load(path, kb, Some(adapters))
            .with_context(|| format!("loading token store {}", path.display()));
    }
    let backend = cfg.backend()?;
    Ok(TokenStore::build(kb, &backend, adapters)?)
}

fn parse_update(spec: &str) -> Result<KnowledgeTriple> {
    let (mut name, mut property, mut value) = (None, None, None);
    // The value may itself contain commas, so everything after `value=` belongs to it.
    let (head, tail) = match spec.find("value=") {
        Some(i) => (&spec[..i], Some(&spec[i + "value=".len()..])),
        None => (spec, None),
    };
    for part in head.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("--kb-update: expected key=value, got `{part}`"))?;
        match k.trim() {
            "name" => name = Some(v.trim().to_string()),
            "property" => property = Some(v.trim().to_string()),
            other => bail!("--kb-update: unknown key `{other}`"),
        }
    }
    if let Some(v) = tail {
        value = Some(v.trim().to_string());
    }
    let need = |f: Option<String>, key: &str| f.ok_or_else(|| anyhow!("--kb-update: missing `{key}`"));
    Ok(KnowledgeTriple::new(
        need(name, "name")?,
        need(property, "property")?,
        need(value, "value")?,
    )?)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kb = synthesize_kb(&cfg.synth)?;
    let path = out.join("kb.jsonl");
    save_kb(&kb, &path)?;
    println!("wrote {} triples to {}", kb.len(), path.display());
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kb = cfg.load_kb()?;
    let backend = cfg.backend()?;
    let bases = encode_triples(&backend, kb.triples())?;
    eval::write_jsonl(&bases, &out.join("bases.jsonl"))?;
    println!(
        "embedded {} triples (dim {}) with {}",
        kb.len(),
        backend.dim(),
        backend.fingerprint()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus_kbs = (0..cfg.corpus.kb_count as u64)
        .map(|k| {
            synthesize_kb(&SynthesisConfig {
                seed: cfg.corpus.kb_seed + k,
                num_names: cfg.corpus.kb_names,
                ..cfg.synth.clone()
            })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let corpus = pretraining_corpus(&corpus_kbs, &cfg.train.batch.mixture, cfg.corpus.size, cfg.corpus.seed)?;
    let start = Instant::now();
    let (weights, log) = pretrain_base(&cfg.model, &corpus, &cfg.pretrain, |l| {
        if (l.step + 1) % 100 == 0 {
            eprintln!(
                "pretrain step {} loss {:.4} ({:.0}s)",
                l.step + 1,
                l.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    weights.save(&cfg.model, &out.join("base.ckpt"))?;
    let mut csv = String::from("step,loss,lr\n");
    for l in &log {
        csv.push_str(&format!("{},{},{}\n", l.step, l.loss, l.lr));
    }
    fs::write(out.join("pretrain_metrics.csv"), csv)?;
    println!("final pretraining loss {:.4}", log.last().map_or(f64::NAN, |l| l.loss));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = cfg.load_model()?;
    let (train_kb, _) = split_kb(&cfg.load_kb()?, cfg.split.train_triples)?;
    let backend = cfg.backend()?;
    let bases = encode_triples(&backend, train_kb.triples())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut adapters = AdapterSet::init(&model.config, &model.weights, backend.dim(), &mut rng);
    let start = Instant::now();
    let metrics = train::train(&model, &train_kb, &bases, &mut adapters, &cfg.train, |m| {
        if (m.step + 1) % 100 == 0 {
            eprintln!(
                "train step {} loss {:.4} ({:.0}s)",
                m.step + 1,
                m.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    adapters.save(&out.join("adapters.ckpt"))?;
    write_metrics_csv(&metrics, &out.join("train_metrics.csv"))?;
    println!(
        "trained on {} triples; final loss {:.4}",
        train_kb.len(),
        metrics.last().map_or(f64::NAN, |m| m.loss)
    );
    Ok(())
}

fn cmd_encode(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kb = cfg.load_kb()?;
    let adapters = cfg.load_adapters()?;
    let store = store_for(cfg, &kb, &adapters, false)?;
    let _lock = DirLock::acquire(out)?;
    let path = out.join("tokens.bin");
    store.save(&path)?;
    println!("encoded {} knowledge tokens to {}", store.len(), path.display());
    Ok(())
}

fn cmd_ask(cfg: &RunConfig, out: &Path, question: &str, update: Option<&str>, evidence: bool) -> Result<()> {
    let model = cfg.load_model()?;
    let adapters = cfg.load_adapters()?;
    let mut kb = cfg.load_kb()?;
    let mut store = store_for(cfg, &kb, &adapters, true)?;
    if let Some(spec) = update {
        let triple = parse_update(spec)?;
        let backend = cfg.backend()?;
        let before = store.encode_calls();
        let pos = store.upsert_triple(&mut kb, &backend, &adapters, triple)?;
        eprintln!(
            "updated position {pos} with {} encode call(s)",
            store.encode_calls() - before
        );
        save_kb(&kb, &out.join("kb.updated.jsonl"))?;
        let _lock = DirLock::acquire(out)?;
        store.save(&out.join("tokens.updated.bin"))?;
    }
    if store.is_empty() {
        bail!("knowledge base is empty");
    }
    let packed = store.packed();
    let prompt = tokenizer::prompt(question);
    let answer = model.generate(&prompt, Some(packed.context(&adapters)), cfg.eval.max_new)?;
    println!("{}", tokenizer::decode(&answer));
    if evidence {
        let layer = cfg.layer(&model);
        let fwd = model.forward(&prompt, Some(packed.context(&adapters)), true)?;
        let scores = eval::retrieval_score(&model, fwd.traces.as_deref().unwrap_or_default(), layer)?;
        for &i in eval::rank(&scores).iter().take(5) {
            println!("{:.6}\t{}", scores[i], kb.triples()[i]);
        }
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, what: &EvalCommand) -> Result<()> {
    let model = cfg.load_model()?;
    let adapters = cfg.load_adapters()?;
    let kb = cfg.load_kb()?;
    let split = cfg.split.train_triples > 0 && cfg.split.train_triples < kb.len();
    let (_, eval_kb) = split_kb(&kb, cfg.split.train_triples)?;
    let store = store_for(cfg, &eval_kb, &adapters, !split)?;
    let e = &cfg.eval;
    match what {
        EvalCommand::Retrieval => {
            let layer = cfg.layer(&model);
            let attention = eval::eval_retrieval(
                &model,
                &adapters,
                &store,
                &eval_kb,
                &e.m_list,
                e.n_questions,
                layer,
                e.seed,
            )?;
            let mut results = Vec::new();
            let mut records = Vec::new();
            for a in attention {
                let samples = retrieval_samples(&eval_kb, a.m, e.n_questions, e.seed ^ a.m as u64)?;
                let bm25 = eval_retrieval_with("bm25", a.m, None, &samples, bm25_scorer(&eval_kb))?;
                if let Some(msg) = bm25_tripwire(&bm25, &a, e.bm25_slack) {
                    eprintln!("warning: {msg}");
                }
                println!(
                    "M={} attention top1 {:.3} top5 {:.3} | bm25 top1 {:.3} top5 {:.3}",
                    a.m, a.top1, a.top5, bm25.top1, bm25.top5
                );
                for r in [&a, &bm25] {
                    records.extend(r.records.iter().map(|rec| (r.method.clone(), rec.clone())));
                }
                results.push(a);
                results.push(bm25);
            }
            eval::write_retrieval_csv(&results, &out.join("retrieval.csv"))?;
            let rows: Vec<serde_json::Value> = records
                .into_iter()
                .map(|(method, rec)| serde_json::json!({ "method": method, "record": rec }))
                .collect();
            eval::write_jsonl(&rows, &out.join("retrieval.jsonl"))?;
        }
        EvalCommand::Refusal => {
            let samples = eval::refusal_samples(&eval_kb, e.refusal_total, e.refusal_answerable, e.refusal_m, e.seed)?;
            let r = eval::eval_refusal(&model, &adapters, &store, &samples, e.max_new)?;
            eval::write_refusal_csv(&r, &out.join("refusal.csv"))?;
            eval::write_jsonl(&r.records, &out.join("refusal.jsonl"))?;
            println!("refusal precision {:.3} recall {:.3}", r.precision, r.recall);
        }
        EvalCommand::Answers { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            let mixture = &cfg.train.batch.mixture;
            let samples = (0..e.answer_samples)
                .map(|i| {
                    build_training_sample(
                        &eval_kb,
                        &mut rng,
                        mixture.kind_of(i % mixture.total()),
                        [e.answer_m, e.answer_m],
                    )
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let r = eval::eval_answer_accuracy(&model, &adapters, &store, &samples, e.max_new)?;
            eval::write_answers_csv(&r, &out.join("answers.csv"))?;
            eval::write_jsonl(&r.records, &out.join("answers.jsonl"))?;
            println!("answer accuracy {:.3}", r.accuracy);
        }
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = cfg.load_model()?;
    let adapters = cfg.load_adapters()?;
    let kb = cfg.load_kb()?;
    let store = store_for(cfg, &kb, &adapters, true)?;
    let rows = eval::bench_scaling(&model, &adapters, &store, kb.triples(), &cfg.bench)?;
    eval::write_scaling_csv(&rows, &out.join("scaling.csv"), true)?;
    eval::write_scaling_csv(&rows, &out.join("scaling_entries.csv"), false)?;
    for r in &rows {
        let t = r.median_ms.map_or("untimed".to_string(), |t| format!("{t:.3} ms"));
        println!("{:<12} M={:<5} entries {:<12} {t}", r.method.as_str(), r.m, r.entries);
    }
    Ok(())
}

fn cmd_export(cfg: &RunConfig, out: &Path, what: &ExportCommand) -> Result<()> {
    let adapters = cfg.load_adapters()?;
    let kb = cfg.load_kb()?;
    let store = store_for(cfg, &kb, &adapters, true)?;
    match what {
        ExportCommand::Heatmap { question } => {
            let model = cfg.load_model()?;
            let layer = cfg.layer(&model);
            if !model.config.is_injection_layer(layer) || layer >= model.config.layers {
                bail!("layer {layer} does not receive knowledge tokens");
            }
            let prompt = tokenizer::prompt(question);
            let packed = store.packed();
            let fwd = model.forward(&prompt, Some(packed.context(&adapters)), true)?;
            let traces = fwd.traces.unwrap_or_default();
            let trace = traces
                .iter()
                .find(|t| t.layer == layer)
                .ok_or_else(|| anyhow!("no attention trace for layer {layer}"))?;
            let labels: Vec<String> = kb.iter().map(|t| format!("{} / {}", t.name, t.property)).collect();
            let path = out.join(format!("heatmap_layer{layer}.csv"));
            eval::export_attention_heatmap(trace, &prompt, &labels, &path)?;
            println!("wrote {}", path.display());
        }
        ExportCommand::LayerVariance => {
            let rows = eval::layer_variance_report(&store);
            eval::write_layer_variance_csv(&rows, &out.join("layer_variance.csv"))?;
            for r in &rows {
                println!(
                    "layer {} key variance {:.6e} value variance {:.6e}",
                    r.layer, r.key_variance, r.value_variance
                );
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating run directory {}", out.display()))?;
    fs::write(
        out.join("config.resolved.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg, &out),
        Command::Embed => cmd_embed(&cfg, &out),
        Command::Pretrain { .. } => cmd_pretrain(&cfg, &out),
        Command::Train { .. } => cmd_train(&cfg, &out),
        Command::Encode => cmd_encode(&cfg, &out),
        Command::Ask {
            question,
            kb_update,
            evidence,
            ..
        } => cmd_ask(&cfg, &out, question, kb_update.as_deref(), *evidence),
        Command::Eval { what } => cmd_eval(&cfg, &out, what),
        Command::Bench { .. } => cmd_bench(&cfg, &out),
        Command::Export { what } => cmd_export(&cfg, &out, what),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
