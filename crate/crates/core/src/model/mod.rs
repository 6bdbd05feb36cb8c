//! Small decoder-only transformer whose attention layers accept knowledge
//! tokens through rectangular attention.

mod forward;
mod infer;
mod pretrain;
pub mod tokenizer;
mod weights;

pub use forward::{build_forward, AttentionTrace, ForwardGraph, ForwardOutput, KbLayerVars, LayerVars, WeightVars};
pub use infer::InferenceSession;
pub use pretrain::{pretrain_base, PretrainConfig, PretrainLog};
pub use weights::{LayerWeights, TransformerWeights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::tensor::{GraphStats, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptyPrompt,
    #[error("prompt of {len} tokens exceeds the maximum of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("knowledge tokens supplied without an adapter query head for layer {0}")]
    MissingQueryHead(usize),
    #[error("knowledge tensors for layer {layer}: {detail}")]
    KnowledgeShape { layer: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture and attention-injection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub ffn_hidden: usize,
    pub max_prompt_len: usize,
    /// Knowledge tokens participate at layers with `layer % inject_every == 0`.
    pub inject_every: usize,
    /// `C` of the `log C - log M` knowledge-score shift.
    pub scale_c: f64,
    pub scale_enabled: bool,
    pub retrieval_layer: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            vocab_size: tokenizer::VOCAB_SIZE,
            ffn_hidden: 256,
            max_prompt_len: 512,
            inject_every: 1,
            scale_c: 100.0,
            scale_enabled: true,
            retrieval_layer: 2,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return fail("layers, dim and heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.dim / self.heads).is_multiple_of(2) {
            return fail("head dimension must be even for rotary embeddings".into());
        }
        if self.inject_every == 0 || self.inject_every > self.layers {
            return fail(format!("inject_every must be in 1..={}", self.layers));
        }
        if !(self.scale_c > 0.0) {
            return fail("scale_c must be positive".into());
        }
        if self.retrieval_layer >= self.layers {
            return fail(format!(
                "retrieval_layer {} >= layers {}",
                self.retrieval_layer, self.layers
            ));
        }
        if self.vocab_size < tokenizer::VOCAB_SIZE {
            return fail(format!("vocab_size must be at least {}", tokenizer::VOCAB_SIZE));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn is_injection_layer(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.inject_every)
    }

    pub fn injection_layers(&self) -> Vec<usize> {
        (0..self.layers).filter(|&l| self.is_injection_layer(l)).collect()
    }

    /// Additive shift applied to every knowledge score for a KB of `m` tokens.
    pub fn kb_shift(&self, m: usize) -> f64 {
        if self.scale_enabled && m > 0 {
            self.scale_c.ln() - (m as f64).ln()
        } else {
            0.0
        }
    }
}

/// Per-layer knowledge keys/values `[M × D]` and the adapter query heads
/// `[D × D]` that score prompt tokens against them.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeContext<'a> {
    pub query_heads: &'a [Tensor],
    pub keys: &'a [Tensor],
    pub values: &'a [Tensor],
}

impl<'a> KnowledgeContext<'a> {
    pub fn count(&self) -> usize {
        self.keys.first().map_or(0, Tensor::rows)
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let m = self.count();
        if m == 0 {
            return Ok(());
        }
        for layer in cfg.injection_layers() {
            let q = self.query_heads.get(layer).ok_or(ModelError::MissingQueryHead(layer))?;
            if q.shape() != [cfg.dim, cfg.dim] {
                return Err(ModelError::KnowledgeShape {
                    layer,
                    detail: format!("query head has shape {:?}", q.shape()),
                });
            }
            for (what, t) in [("keys", self.keys.get(layer)), ("values", self.values.get(layer))] {
                match t {
                    Some(t) if t.shape() == [m, cfg.dim] => {}
                    Some(t) => {
                        return Err(ModelError::KnowledgeShape {
                            layer,
                            detail: format!("{what} have shape {:?}, expected [{m}, {}]", t.shape(), cfg.dim),
                        })
                    }
                    None => {
                        return Err(ModelError::KnowledgeShape {
                            layer,
                            detail: format!("{what} missing"),
                        })
                    }
                }
            }
        }
        Ok(())
    }
}

/// Frozen base model: configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if tokens.len() > self.config.max_prompt_len {
            return Err(ModelError::PromptTooLong {
                len: tokens.len(),
                max: self.config.max_prompt_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full-sequence forward pass: next-token logits at every position and,
    /// on request, the post-softmax attention of every layer.
    pub fn forward(
        &self,
        tokens: &[u32],
        kb: Option<KnowledgeContext<'_>>,
        capture_traces: bool,
    ) -> Result<ForwardOutput> {
        forward::forward(self, tokens, kb, capture_traces)
    }

    /// Greedy decoding with a prompt KV cache. Knowledge tokens are consumed
    /// as an external cache and never recomputed. Stops at end-of-sequence
    /// (not included in the output) or after `max_new` tokens.
    pub fn generate(&self, prompt: &[u32], kb: Option<KnowledgeContext<'_>>, max_new: usize) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        if max_new == 0 {
            return Ok(out);
        }
        let mut session = InferenceSession::new(self, kb)?;
        let logits = session.feed(prompt)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        loop {
            if next == tokenizer::EOS {
                break;
            }
            out.push(next);
            if out.len() >= max_new || session.len() + 1 > self.config.max_prompt_len {
                break;
            }
            let logits = session.feed(&[next])?;
            next = argmax(logits.row(0));
        }
        Ok(out)
    }

    /// Counts of attention scores one forward pass computes for `n` prompt
    /// tokens and `m` knowledge tokens, summed over layers and heads:
    /// `(knowledge part, prompt part)`.
    pub fn score_entries(&self, n: usize, m: usize) -> (u64, u64) {
        let h = self.config.heads as u64;
        let injected = if m > 0 {
            self.config.injection_layers().len() as u64
        } else {
            0
        };
        let kb = injected * h * (n * m) as u64;
        let prompt = self.config.layers as u64 * h * (n * (n + 1) / 2) as u64;
        (kb, prompt)
    }
}

/// Lowest index of the maximum; ties resolve to the smaller token id.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn merge_stats(a: &mut GraphStats, b: GraphStats) {
    a.kb_score_entries += b.kb_score_entries;
    a.prompt_score_entries += b.prompt_score_entries;
}
