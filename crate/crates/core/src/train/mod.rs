//! Adapter instruction tuning with the base model frozen.

mod optim;

pub use optim::{AdamW, OptimizerConfig};

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterSet;
use crate::embed::BaseEmbeddingPair;
use crate::kb::{make_answer, make_question, InstructionSample, KbError, KnowledgeBase, QuestionKind};
use crate::model::{build_forward, tokenizer, KbLayerVars, Model, ModelError, WeightVars};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("knowledge base has {have} triples, at least {need} are needed")]
    KbTooSmall { need: usize, have: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("sample has an empty answer")]
    EmptyAnswer,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Micro-batches per instruction kind in one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mixture {
    pub simple: usize,
    pub multi_entity: usize,
    pub open_ended: usize,
    pub unanswerable: usize,
}

impl Default for Mixture {
    fn default() -> Self {
        BatchSpec::desk().mixture
    }
}

impl Mixture {
    pub fn total(&self) -> usize {
        self.simple + self.multi_entity + self.open_ended + self.unanswerable
    }

    /// Kind of the `i`-th micro-batch: kinds are laid out in a fixed order.
    pub fn kind_of(&self, i: usize) -> QuestionKind {
        let bounds = [
            (self.simple, QuestionKind::Simple),
            (self.multi_entity, QuestionKind::MultiEntity),
            (self.open_ended, QuestionKind::OpenEnded),
            (self.unanswerable, QuestionKind::Unanswerable),
        ];
        let mut acc = 0;
        for (n, kind) in bounds {
            acc += n;
            if i < acc {
                return kind;
            }
        }
        QuestionKind::Unanswerable
    }

    /// Draws a kind with probability proportional to its count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QuestionKind {
        self.kind_of(rng.random_range(0..self.total()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub micro_batches: usize,
    pub micro_batch_size: usize,
    pub mixture: Mixture,
    /// Inclusive bounds on the number of triples in each sample's KB.
    pub kb_size_range: [usize; 2],
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl BatchSpec {
    /// 400 pairs per step in 20 micro-batches of 20; 6/6/6 answerable and 2
    /// unanswerable micro-batches; KBs of 10 to 100 triples.
    pub fn paper() -> Self {
        Self {
            batch_size: 400,
            micro_batches: 20,
            micro_batch_size: 20,
            mixture: Mixture {
                simple: 6,
                multi_entity: 6,
                open_ended: 6,
                unanswerable: 2,
            },
            kb_size_range: [10, 100],
        }
    }

    /// The same mixture ratio shrunk to 10 single-sample micro-batches.
    pub fn desk() -> Self {
        Self {
            batch_size: 10,
            micro_batches: 10,
            micro_batch_size: 1,
            mixture: Mixture {
                simple: 3,
                multi_entity: 3,
                open_ended: 3,
                unanswerable: 1,
            },
            kb_size_range: [4, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.micro_batches * self.micro_batch_size != self.batch_size || self.batch_size == 0 {
            return fail(format!(
                "micro_batches × micro_batch_size ({} × {}) must equal batch_size {}",
                self.micro_batches, self.micro_batch_size, self.batch_size
            ));
        }
        if self.mixture.total() != self.micro_batches {
            return fail(format!(
                "mixture counts sum to {}, expected {} micro-batches",
                self.mixture.total(),
                self.micro_batches
            ));
        }
        let [lo, hi] = self.kb_size_range;
        if lo == 0 || lo > hi {
            return fail(format!("kb_size_range [{lo}, {hi}] is empty or starts at 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: BatchSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Apply the knowledge-score shift during training as well as inference.
    pub scale_in_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(3000, 0)
    }
}

impl TrainConfig {
    pub fn desk(steps: usize, seed: u64) -> Self {
        Self {
            batch: BatchSpec::desk(),
            optimizer: OptimizerConfig {
                total_steps: steps,
                ..OptimizerConfig::default()
            },
            seed,
            scale_in_training: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.optimizer.validate().map_err(TrainError::Config)
    }
}

/// Draws a sample-specific KB uniformly without replacement and a question
/// of `kind` about triples in it (the rest act as distractors). Unanswerable
/// questions name an entity that does not occur in the sample KB.
pub fn build_training_sample<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    rng: &mut R,
    kind: QuestionKind,
    kb_size_range: [usize; 2],
) -> Result<InstructionSample> {
    let [lo, hi] = kb_size_range;
    if lo == 0 || lo > hi {
        return Err(TrainError::Config(format!("kb_size_range [{lo}, {hi}]")));
    }
    if kb.len() < lo {
        return Err(TrainError::KbTooSmall {
            need: lo,
            have: kb.len(),
        });
    }
    let size = rng.random_range(lo..=hi.min(kb.len()));
    let positions = index::sample(rng, kb.len(), size).into_vec();
    let triple = |p: usize| kb.get(p).expect("sampled position in range").clone();
    let (relevant, asked) = match kind {
        QuestionKind::Simple | QuestionKind::OpenEnded => {
            let p = positions[rng.random_range(0..size)];
            (vec![p], vec![triple(p)])
        }
        QuestionKind::MultiEntity => {
            let g = size.min(2);
            let picks: Vec<usize> = index::sample(rng, size, g).into_iter().map(|i| positions[i]).collect();
            let triples = picks.iter().map(|&p| triple(p)).collect();
            (picks, triples)
        }
        QuestionKind::Unanswerable => {
            let present: HashSet<&str> = positions
                .iter()
                .map(|&p| kb.get(p).expect("in range").name.as_str())
                .collect();
            let outside: Vec<usize> = (0..kb.len())
                .filter(|&p| !present.contains(kb.get(p).expect("in range").name.as_str()))
                .collect();
            if outside.is_empty() {
                return Err(TrainError::KbTooSmall {
                    need: size + 1,
                    have: kb.len(),
                });
            }
            let p = outside[rng.random_range(0..outside.len())];
            (Vec::new(), vec![triple(p)])
        }
    };
    let template = rng.random_range(0..kind.template_count());
    let question = make_question(kind, &asked, template)?;
    let answer = make_answer(kind, if relevant.is_empty() { &[] } else { &asked });
    let sample = InstructionSample {
        kind,
        question,
        answer,
        kb_positions: positions,
        relevant,
    };
    sample.validate()?;
    Ok(sample)
}

/// Question/answer pairs for pretraining the base model, drawn with the
/// same templates and mixture as instruction tuning but without any KB.
/// Each pair comes from a uniformly chosen KB of `kbs`; KBs synthesized from
/// different seeds pair the same names with different values, so the model
/// learns the answer format and to copy names rather than memorize values.
pub fn pretraining_corpus(
    kbs: &[KnowledgeBase],
    mixture: &Mixture,
    count: usize,
    seed: u64,
) -> Result<Vec<InstructionSample>> {
    if kbs.is_empty() {
        return Err(TrainError::Config("pretraining corpus needs at least one KB".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let kb = &kbs[rng.random_range(0..kbs.len())];
            let kind = mixture.sample(&mut rng);
            build_training_sample(kb, &mut rng, kind, [2, 2])
        })
        .collect()
}

/// Token ids of `BOS question SEP answer EOS` without the final token, and
/// next-token targets that are set only on answer positions.
pub fn answer_targets(question: &str, answer: &str) -> Result<(Vec<u32>, Vec<Option<usize>>)> {
    if answer.is_empty() {
        return Err(TrainError::EmptyAnswer);
    }
    let (tokens, sep) = tokenizer::dialogue(question, answer);
    let n = tokens.len() - 1;
    let targets = (0..n).map(|i| (i >= sep).then(|| tokens[i + 1] as usize)).collect();
    Ok((tokens[..n].to_vec(), targets))
}

/// Mean answer-token cross entropy of one sample and, when requested, its
/// gradient with respect to every adapter tensor (in
/// [`AdapterSet::tensors_mut`] order). Base weights are graph constants.
pub fn sample_loss(
    model: &Model,
    adapters: &AdapterSet,
    kb_bases: &[&BaseEmbeddingPair],
    question: &str,
    answer: &str,
    scale: bool,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let (inputs, targets) = answer_targets(question, answer)?;
    model.check_tokens(&inputs)?;
    let mut cfg = model.config.clone();
    cfg.scale_enabled = scale;
    let mut g = Graph::new();
    let w = WeightVars::bind(&mut g, &model.weights, false);
    let leaf = |g: &mut Graph, t: &Tensor| {
        if with_grad {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    let mut adapter_vars = Vec::with_capacity(3 * cfg.layers);
    for l in 0..cfg.layers {
        adapter_vars.push(leaf(&mut g, &adapters.key[l]));
        adapter_vars.push(leaf(&mut g, &adapters.value[l]));
        adapter_vars.push(leaf(&mut g, &adapters.query[l]));
    }
    let m = kb_bases.len();
    let kb_vars = if m > 0 {
        let p = adapters.embed_dim();
        let stack = |f: &dyn Fn(&BaseEmbeddingPair) -> &Vec<f64>| -> Result<Tensor> {
            let data: Vec<f64> = kb_bases.iter().flat_map(|b| f(b).iter().copied()).collect();
            Ok(Tensor::new(vec![m, p], data)?)
        };
        let kb_keys = g.constant(stack(&|b| &b.key_base)?);
        let kb_values = g.constant(stack(&|b| &b.value_base)?);
        let mut vars = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            if cfg.is_injection_layer(l) {
                vars.push(Some(KbLayerVars {
                    keys: g.matmul(kb_keys, adapter_vars[3 * l])?,
                    values: g.matmul(kb_values, adapter_vars[3 * l + 1])?,
                    query_head: adapter_vars[3 * l + 2],
                }));
            } else {
                vars.push(None);
            }
        }
        Some(vars)
    } else {
        None
    };
    let fg = build_forward(&mut g, &cfg, &w, &inputs, kb_vars.as_deref())?;
    let loss = g.cross_entropy(fg.logits, &targets)?;
    let value = g.value(loss).data()[0];
    if !with_grad {
        return Ok((value, None));
    }
    g.backward(loss)?;
    let grads = adapter_vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();
    Ok((value, Some(grads)))
}

/// One row of the training log. Per-kind losses are `None` when a kind did
/// not occur in the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub loss_per_kind: [Option<f64>; 4],
}

fn kind_index(kind: QuestionKind) -> usize {
    QuestionKind::ALL.iter().position(|&k| k == kind).expect("listed kind")
}

/// Instruction-tunes `adapters` on `kb`. `bases[i]` must be the base
/// embedding pair of triple `i`. Each step accumulates gradients over all
/// micro-batches, averages them per sample and applies one AdamW update.
pub fn train(
    model: &Model,
    kb: &KnowledgeBase,
    bases: &[BaseEmbeddingPair],
    adapters: &mut AdapterSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if bases.len() != kb.len() {
        return Err(TrainError::Config(format!(
            "{} base embeddings for {} triples",
            bases.len(),
            kb.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = adapters.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &sizes);
    let batch = &cfg.batch;
    let inv = 1.0 / batch.batch_size as f64;
    let mut log = Vec::with_capacity(cfg.optimizer.total_steps);
    for step in 0..cfg.optimizer.total_steps {
        let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut total = 0.0;
        let mut per_kind = [(0.0, 0usize); 4];
        for mb in 0..batch.micro_batches {
            let kind = batch.mixture.kind_of(mb);
            for _ in 0..batch.micro_batch_size {
                let sample = build_training_sample(kb, &mut rng, kind, batch.kb_size_range)?;
                let kb_bases: Vec<&BaseEmbeddingPair> = sample.kb_positions.iter().map(|&p| &bases[p]).collect();
                let (loss, grads) = sample_loss(
                    model,
                    adapters,
                    &kb_bases,
                    &sample.question,
                    &sample.answer,
                    cfg.scale_in_training,
                    true,
                )?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step });
                }
                for (a, g) in acc.iter_mut().zip(grads.expect("requested")) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                total += loss;
                let k = &mut per_kind[kind_index(kind)];
                k.0 += loss;
                k.1 += 1;
            }
        }
        acc.iter_mut().flatten().for_each(|x| *x *= inv);
        let lr = cfg.optimizer.lr_at(step);
        opt.step(&mut adapters.tensors_mut(), &acc, lr);
        let metrics = StepMetrics {
            step,
            loss: total * inv,
            lr,
            loss_per_kind: per_kind.map(|(s, n)| (n > 0).then(|| s / n as f64)),
        };
        on_step(&metrics);
        log.push(metrics);
    }
    Ok(log)
}

/// Writes the log as CSV: `step,loss,lr,loss_simple,loss_multi_entity,...`.
pub fn write_metrics_csv(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "step,loss,lr")?;
    for k in QuestionKind::ALL {
        write!(w, ",loss_{}", k.as_str())?;
    }
    writeln!(w)?;
    for m in metrics {
        write!(w, "{},{},{}", m.step, m.loss, m.lr)?;
        for l in m.loss_per_kind {
            match l {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of each consecutive `window`-step block of the loss curve.
pub fn window_means(metrics: &[StepMetrics], window: usize) -> Vec<f64> {
    metrics
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / window as f64)
        .collect()
}
