use super::{merge_stats, KnowledgeContext, Model, ModelError, Result};
use crate::tensor::kernels::{self, KbView};
use crate::tensor::{GraphStats, Tensor};

/// Incremental decoding state: per-layer prompt key/value caches. The
/// knowledge tokens act as a fixed, position-free prefix cache.
pub struct InferenceSession<'a> {
    model: &'a Model,
    kb: Option<KnowledgeContext<'a>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    stats: GraphStats,
}

fn project(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; rows * w.cols()];
    kernels::gemm(rows, w.rows(), w.cols(), x, false, w.data(), false, &mut out, false);
    out
}

impl<'a> InferenceSession<'a> {
    pub fn new(model: &'a Model, kb: Option<KnowledgeContext<'a>>) -> Result<Self> {
        let kb = kb.filter(|ctx| ctx.count() > 0);
        if let Some(ctx) = &kb {
            ctx.validate(&model.config)?;
        }
        let layers = model.config.layers;
        Ok(Self {
            model,
            kb,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            stats: GraphStats::default(),
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    /// Appends `tokens` and returns their next-token logits `[c × vocab]`.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let cfg = &self.model.config;
        let w = &self.model.weights;
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if self.len + tokens.len() > cfg.max_prompt_len {
            return Err(ModelError::PromptTooLong {
                len: self.len + tokens.len(),
                max: cfg.max_prompt_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        let (c, d) = (tokens.len(), cfg.dim);
        let mut x = Vec::with_capacity(c * d);
        for &t in tokens {
            x.extend_from_slice(w.tok_emb.row(t as usize));
        }
        let m = self.kb.as_ref().map_or(0, KnowledgeContext::count);
        for (layer, lw) in w.layers.iter().enumerate() {
            let (h, _) = kernels::rmsnorm_forward(&x, lw.attn_norm.data(), cfg.norm_eps);
            let mut q = project(&h, c, &lw.wq);
            kernels::rope_inplace(&mut q, d, cfg.heads, self.len, cfg.rope_base, false);
            let mut k = project(&h, c, &lw.wk);
            kernels::rope_inplace(&mut k, d, cfg.heads, self.len, cfg.rope_base, false);
            let v = project(&h, c, &lw.wv);
            self.keys[layer].extend_from_slice(&k);
            self.values[layer].extend_from_slice(&v);

            let kb_queries;
            let view = match &self.kb {
                Some(ctx) if cfg.is_injection_layer(layer) => {
                    kb_queries = project(&h, c, &ctx.query_heads[layer]);
                    Some(KbView {
                        queries: &kb_queries,
                        keys: ctx.keys[layer].data(),
                        values: ctx.values[layer].data(),
                        count: m,
                        shift: cfg.kb_shift(m),
                    })
                }
                _ => None,
            };
            let res = kernels::attention_forward(
                &q,
                &self.keys[layer],
                &self.values[layer],
                c,
                self.len + c,
                self.len,
                d,
                cfg.heads,
                view.as_ref(),
                false,
            );
            merge_stats(
                &mut self.stats,
                GraphStats {
                    kb_score_entries: res.kb_entries,
                    prompt_score_entries: res.prompt_entries,
                },
            );
            let o = project(&res.out, c, &lw.wo);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let (h, _) = kernels::rmsnorm_forward(&x, lw.ffn_norm.data(), cfg.norm_eps);
            let mut f = project(&h, c, &lw.w1);
            f.iter_mut().for_each(|v| *v = kernels::silu(*v));
            let f = project(&f, c, &lw.w2);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let (h, _) = kernels::rmsnorm_forward(&x, w.final_norm.data(), cfg.norm_eps);
        let logits = project(&h, c, &w.head);
        self.len += c;
        Ok(Tensor::new(vec![c, cfg.vocab_size], logits)?)
    }
}
