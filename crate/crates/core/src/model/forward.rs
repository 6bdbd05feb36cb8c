use super::{KnowledgeContext, Model, ModelConfig, Result, TransformerWeights};
use crate::tensor::{AttentionArgs, Graph, GraphStats, KbArgs, Tensor, Var};

/// Graph handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub w2: Var,
}

/// Graph handles for the whole base model.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub tok_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl WeightVars {
    /// Binds the weights as leaves; `trainable` decides whether gradients
    /// flow into them.
    pub fn bind(g: &mut Graph, w: &TransformerWeights, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let tok_emb = leaf(&w.tok_emb);
        let layers = w
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ffn_norm: leaf(&l.ffn_norm),
                w1: leaf(&l.w1),
                w2: leaf(&l.w2),
            })
            .collect();
        let final_norm = leaf(&w.final_norm);
        let head = leaf(&w.head);
        Self {
            tok_emb,
            layers,
            final_norm,
            head,
        }
    }

    /// Leaves in the same order as [`TransformerWeights::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.w2]);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

/// Knowledge tokens for one injection layer: the adapter query head
/// `[D × D]` and the knowledge keys/values `[M × D]`.
#[derive(Debug, Clone, Copy)]
pub struct KbLayerVars {
    pub query_head: Var,
    pub keys: Var,
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: Var,
    /// Attention node of every layer, for reading retained probabilities.
    pub attention: Vec<Var>,
}

/// Builds the forward pass into `g`. `kb[layer]` supplies knowledge tokens
/// for that layer; entries for non-injection layers are ignored, and an
/// absent or empty block means plain causal attention.
pub fn build_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    w: &WeightVars,
    tokens: &[u32],
    kb: Option<&[Option<KbLayerVars>]>,
) -> Result<ForwardGraph> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut x = g.embedding(w.tok_emb, &ids)?;
    let mut attention = Vec::with_capacity(cfg.layers);
    for (layer, lw) in w.layers.iter().enumerate() {
        let h = g.rmsnorm(x, lw.attn_norm, cfg.norm_eps)?;
        let q = g.matmul(h, lw.wq)?;
        let q = g.rope(q, cfg.heads, cfg.rope_base)?;
        let k = g.matmul(h, lw.wk)?;
        let k = g.rope(k, cfg.heads, cfg.rope_base)?;
        let v = g.matmul(h, lw.wv)?;
        let kb_args = match kb.and_then(|kb| kb.get(layer).copied().flatten()) {
            Some(kbl) if cfg.is_injection_layer(layer) && g.value(kbl.keys).rows() > 0 => {
                let queries = g.matmul(h, kbl.query_head)?;
                Some(KbArgs {
                    queries,
                    keys: kbl.keys,
                    values: kbl.values,
                    shift: cfg.kb_shift(g.value(kbl.keys).rows()),
                })
            }
            _ => None,
        };
        let a = g.attention(AttentionArgs {
            q,
            k,
            v,
            heads: cfg.heads,
            kb: kb_args,
        })?;
        attention.push(a);
        let o = g.matmul(a, lw.wo)?;
        x = g.add(x, o)?;
        let h = g.rmsnorm(x, lw.ffn_norm, cfg.norm_eps)?;
        let f = g.matmul(h, lw.w1)?;
        let f = g.silu(f)?;
        let f = g.matmul(f, lw.w2)?;
        x = g.add(x, f)?;
    }
    let h = g.rmsnorm(x, w.final_norm, cfg.norm_eps)?;
    let logits = g.matmul(h, w.head)?;
    Ok(ForwardGraph { logits, attention })
}

/// Post-softmax attention of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layer: usize,
    pub heads: usize,
    /// Prompt length.
    pub n: usize,
    /// Knowledge tokens visible at this layer (0 when none).
    pub m: usize,
    /// `[heads × n × m]`
    pub kb: Vec<f64>,
    /// `[heads × n × n]`, zero above the causal frontier.
    pub prompt: Vec<f64>,
}

impl AttentionTrace {
    pub fn kb_prob(&self, head: usize, row: usize, token: usize) -> f64 {
        self.kb[(head * self.n + row) * self.m + token]
    }

    pub fn prompt_prob(&self, head: usize, row: usize, col: usize) -> f64 {
        self.prompt[(head * self.n + row) * self.n + col]
    }

    /// Total probability of one softmax row (knowledge plus prompt part).
    pub fn row_mass(&self, head: usize, row: usize) -> f64 {
        let kb: f64 = (0..self.m).map(|j| self.kb_prob(head, row, j)).sum();
        let p: f64 = (0..self.n).map(|j| self.prompt_prob(head, row, j)).sum();
        kb + p
    }

    /// Knowledge probabilities averaged over heads, `[n × m]`.
    pub fn head_mean_kb(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m];
        for h in 0..self.heads {
            for (o, p) in out
                .iter_mut()
                .zip(&self.kb[h * self.n * self.m..(h + 1) * self.n * self.m])
            {
                *o += p;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n × vocab]`
    pub logits: Tensor,
    pub traces: Option<Vec<AttentionTrace>>,
    pub stats: GraphStats,
}

pub(super) fn forward(
    model: &Model,
    tokens: &[u32],
    kb: Option<KnowledgeContext<'_>>,
    capture: bool,
) -> Result<ForwardOutput> {
    model.check_tokens(tokens)?;
    let cfg = &model.config;
    let mut g = Graph::new();
    if capture {
        g = g.retain_attention();
    }
    let w = WeightVars::bind(&mut g, &model.weights, false);
    let kb_vars = match kb {
        Some(ctx) if ctx.count() > 0 => {
            ctx.validate(cfg)?;
            let vars: Vec<Option<KbLayerVars>> = (0..cfg.layers)
                .map(|l| {
                    cfg.is_injection_layer(l).then(|| KbLayerVars {
                        query_head: g.constant(ctx.query_heads[l].clone()),
                        keys: g.constant(ctx.keys[l].clone()),
                        values: g.constant(ctx.values[l].clone()),
                    })
                })
                .collect();
            Some(vars)
        }
        _ => None,
    };
    let fg = build_forward(&mut g, cfg, &w, tokens, kb_vars.as_deref())?;
    let traces = capture.then(|| {
        fg.attention
            .iter()
            .enumerate()
            .map(|(layer, &a)| {
                let (kbp, pp) = g.attention_probs(a).expect("attention retained");
                let n = tokens.len();
                let m = if n == 0 { 0 } else { kbp.len() / (cfg.heads * n) };
                AttentionTrace {
                    layer,
                    heads: cfg.heads,
                    n,
                    m,
                    kb: kbp.to_vec(),
                    prompt: pp.to_vec(),
                }
            })
            .collect()
    });
    Ok(ForwardOutput {
        logits: g.value(fg.logits).clone(),
        traces,
        stats: g.stats(),
    })
}
