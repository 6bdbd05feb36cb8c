use std::path::Path;

use rand::Rng;

use super::{ModelConfig, ModelError, Result};
use crate::checkpoint::{tensors_hash, Checkpoint};
use crate::tensor::Tensor;

/// Parameters of one pre-norm transformer block. Projections are stored
/// input-major (`[in × out]`) so activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// The frozen base-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub tok_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

const CHECKPOINT_KIND: &str = "transformer";

impl TransformerWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, f, v) = (cfg.dim, cfg.ffn_hidden, cfg.vocab_size);
        let in_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape matches");
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: Tensor::randn(&[d, d], in_std(d), rng),
                wk: Tensor::randn(&[d, d], in_std(d), rng),
                wv: Tensor::randn(&[d, d], in_std(d), rng),
                wo: Tensor::randn(&[d, d], in_std(d) * resid, rng),
                ffn_norm: ones(d),
                w1: Tensor::randn(&[d, f], in_std(d), rng),
                w2: Tensor::randn(&[f, d], in_std(f) * resid, rng),
            })
            .collect();
        Self {
            tok_emb: Tensor::randn(&[v, d], 1.0, rng),
            layers,
            final_norm: ones(d),
            head: Tensor::randn(&[d, v], in_std(d), rng),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w1", &l.w1),
                ("w2", &l.w2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable views in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn content_hash(&self) -> u64 {
        let named = self.named();
        tensors_hash(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub(crate) fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f, v) = (cfg.dim, cfg.ffn_hidden, cfg.vocab_size);
        let bad = |name: &str, t: &Tensor| ModelError::Config(format!("weight {name} has shape {:?}", t.shape()));
        if self.layers.len() != cfg.layers {
            return Err(ModelError::Config(format!(
                "{} weight layers for a {}-layer config",
                self.layers.len(),
                cfg.layers
            )));
        }
        let expect =
            |name: &str, t: &Tensor, shape: &[usize]| if t.shape() == shape { Ok(()) } else { Err(bad(name, t)) };
        expect("tok_emb", &self.tok_emb, &[v, d])?;
        expect("final_norm", &self.final_norm, &[d])?;
        expect("head", &self.head, &[d, v])?;
        for l in &self.layers {
            expect("attn_norm", &l.attn_norm, &[d])?;
            expect("ffn_norm", &l.ffn_norm, &[d])?;
            for (n, t) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                expect(n, t, &[d, d])?;
            }
            expect("w1", &l.w1, &[d, f])?;
            expect("w2", &l.w2, &[f, d])?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(cfg).expect("config serializes"));
        for (name, t) in self.named() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint) -> Result<(ModelConfig, Self)> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let cfg: ModelConfig = serde_json::from_value(c.meta.clone())
            .map_err(|e| ModelError::Config(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        let (d, f, v) = (cfg.dim, cfg.ffn_hidden, cfg.vocab_size);
        let tok_emb = c.take("tok_emb", &[v, d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut take = |n: &str, s: &[usize]| c.take(&format!("layers.{i}.{n}"), s);
            layers.push(LayerWeights {
                attn_norm: take("attn_norm", &[d])?,
                wq: take("wq", &[d, d])?,
                wk: take("wk", &[d, d])?,
                wv: take("wv", &[d, d])?,
                wo: take("wo", &[d, d])?,
                ffn_norm: take("ffn_norm", &[d])?,
                w1: take("w1", &[d, f])?,
                w2: take("w2", &[f, d])?,
            });
        }
        let final_norm = c.take("final_norm", &[d])?;
        let head = c.take("head", &[d, v])?;
        Ok((
            cfg,
            Self {
                tok_emb,
                layers,
                final_norm,
                head,
            },
        ))
    }

    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint(cfg).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, Self)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
