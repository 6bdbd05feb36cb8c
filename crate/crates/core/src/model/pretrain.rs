use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_forward, ModelConfig, ModelError, Result, TransformerWeights, WeightVars};
use crate::kb::InstructionSample;
use crate::tensor::Graph;
use crate::train::{answer_targets, AdamW, OptimizerConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr_start: 3e-3,
            lr_end: 1e-4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn from_train(e: TrainError) -> ModelError {
    match e {
        TrainError::Model(m) => m,
        TrainError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::Config(other.to_string()),
    }
}

/// Trains a base model from scratch on question/answer text with the loss
/// restricted to answer tokens. No knowledge tokens are involved.
pub fn pretrain_base(
    model_cfg: &ModelConfig,
    corpus: &[InstructionSample],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&PretrainLog),
) -> Result<(TransformerWeights, Vec<PretrainLog>)> {
    model_cfg.validate()?;
    if corpus.is_empty() || cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(ModelError::Config(
            "pretraining needs a corpus, a batch size and steps".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = TransformerWeights::init(model_cfg, &mut rng);
    let opt_cfg = OptimizerConfig {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        total_steps: cfg.steps,
        weight_decay: cfg.weight_decay,
        ..OptimizerConfig::default()
    };
    opt_cfg.validate().map_err(ModelError::Config)?;
    let sizes: Vec<usize> = weights.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(opt_cfg.clone(), &sizes);
    let inv = 1.0 / cfg.batch_size as f64;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &corpus[rng.random_range(0..corpus.len())];
            let (inputs, targets) = answer_targets(&s.question, &s.answer).map_err(from_train)?;
            if inputs.len() > model_cfg.max_prompt_len {
                return Err(ModelError::PromptTooLong {
                    len: inputs.len(),
                    max: model_cfg.max_prompt_len,
                });
            }
            let mut g = Graph::new();
            let w = WeightVars::bind(&mut g, &weights, true);
            let fg = build_forward(&mut g, model_cfg, &w, &inputs, None)?;
            let loss = g.cross_entropy(fg.logits, &targets)?;
            total += g.value(loss).data()[0];
            g.backward(loss)?;
            for (a, v) in acc.iter_mut().zip(w.all()) {
                if let Some(gr) = g.grad(v) {
                    a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            }
        }
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(ModelError::Config(format!("pretraining diverged at step {step}")));
        }
        acc.iter_mut().flatten().for_each(|x| *x *= inv);
        let lr = opt_cfg.lr_at(step);
        opt.step(&mut weights.tensors_mut(), &acc, lr);
        let entry = PretrainLog { step, loss, lr };
        on_step(&entry);
        log.push(entry);
    }
    Ok((weights, log))
}
