use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::adapters::{AdapterSet, TokenStore};
use crate::kb::KnowledgeTriple;
use crate::model::{tokenizer, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rectangular,
    InContext,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rectangular => "rectangular",
            Method::InContext => "in_context",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub m_list: Vec<usize>,
    /// Prompt length `N` (including the begin and separator tokens).
    pub n_fixed: usize,
    pub repeats: usize,
    /// In-context prompts longer than this are counted but not timed.
    pub in_context_max_tokens: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            m_list: vec![16, 64, 256, 1024, 2048],
            n_fixed: 32,
            repeats: 5,
            in_context_max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    /// Verbalized-KB length in tokens (in-context only).
    pub context_tokens: usize,
    /// Median wall time over the repeats; `None` when not timed.
    pub median_ms: Option<f64>,
    /// Attention scores computed, summed over layers and heads: the
    /// instrumented count when timed, otherwise the closed form.
    pub entries: u64,
    pub analytic_entries: u64,
    /// Score entries of the largest single layer-head attention matrix.
    pub peak_score_entries: u64,
    /// Score matrix plus cached keys/values, in bytes.
    pub resident_bytes: u64,
}

/// `BOS`, then question bytes cycled to fill, then `SEP`: exactly `n` tokens.
fn bench_prompt(n: usize) -> Vec<u32> {
    let text = tokenizer::encode("What is the purpose of Nova Citadel? ");
    let mut t = vec![tokenizer::BOS];
    t.extend(text.iter().cycle().take(n.saturating_sub(2)));
    t.push(tokenizer::SEP);
    t
}

/// Triples flattened to text in front of the question:
/// `BOS <triples> <question bytes> SEP`, where each triple contributes
/// `The <property> of <name>: <value>\n`.
pub fn in_context_prompt(triples: &[&KnowledgeTriple], prompt: &[u32]) -> (Vec<u32>, usize) {
    let mut kb_text = Vec::new();
    for t in triples {
        kb_text.extend(tokenizer::encode(&format!(
            "The {} of {}: {}\n",
            t.property, t.name, t.value
        )));
    }
    let mut out = vec![tokenizer::BOS];
    out.extend_from_slice(&kb_text);
    out.extend_from_slice(&prompt[1..]);
    (out, kb_text.len())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times full forward passes with `M` knowledge tokens (rectangular) and
/// with the same triples verbalized into the prompt (in-context). Tokens
/// and triples are reused cyclically when `M` exceeds the KB.
pub fn bench_scaling(
    model: &Model,
    adapters: &AdapterSet,
    store: &TokenStore,
    triples: &[KnowledgeTriple],
    cfg: &ScalingConfig,
) -> Result<Vec<ScalingRow>> {
    if store.is_empty() || triples.len() != store.len() {
        return Err(EvalError::Config(
            "benchmark needs a non-empty store aligned with its triples".into(),
        ));
    }
    if cfg.n_fixed < 2 || cfg.repeats == 0 {
        return Err(EvalError::Config(
            "benchmark needs n_fixed >= 2 and repeats >= 1".into(),
        ));
    }
    let mcfg = &model.config;
    let (l, h, d) = (mcfg.layers as u64, mcfg.heads as u64, mcfg.dim as u64);
    let injected = mcfg.injection_layers().len() as u64;
    let n = cfg.n_fixed;
    let prompt = bench_prompt(n);
    let mut rows = Vec::new();

    // Warm-up so the first timed configuration is not penalized.
    let warm = store.packed_subset(&[0]);
    model.forward(&prompt, Some(warm.context(adapters)), false)?;

    for &m in &cfg.m_list {
        let positions: Vec<usize> = (0..m).map(|i| i % store.len()).collect();
        let packed = store.packed_subset(&positions);
        let ctx = packed.context(adapters);
        let (kb_a, prompt_a) = model.score_entries(n, m);
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut entries = 0;
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = model.forward(&prompt, Some(ctx), false)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            entries = out.stats.kb_score_entries + out.stats.prompt_score_entries;
        }
        let peak = (n * m + n * (n + 1) / 2) as u64;
        rows.push(ScalingRow {
            method: Method::Rectangular,
            m,
            n,
            context_tokens: 0,
            median_ms: Some(median(times)),
            entries,
            analytic_entries: kb_a + prompt_a,
            peak_score_entries: peak,
            resident_bytes: 8 * (peak + 2 * d * (injected * m as u64 + l * n as u64)),
        });

        let kb_triples: Vec<&KnowledgeTriple> = positions.iter().map(|&p| &triples[p]).collect();
        let (ic_prompt, t_m) = in_context_prompt(&kb_triples, &prompt);
        let total = ic_prompt.len();
        let analytic = l * h * (total * (total + 1) / 2) as u64;
        let mut row = ScalingRow {
            method: Method::InContext,
            m,
            n,
            context_tokens: t_m,
            median_ms: None,
            entries: analytic,
            analytic_entries: analytic,
            peak_score_entries: (total * (total + 1) / 2) as u64,
            resident_bytes: 8 * ((total * (total + 1) / 2) as u64 + 2 * d * l * total as u64),
        };
        if total <= cfg.in_context_max_tokens {
            let mut long = model.clone();
            long.config.max_prompt_len = long.config.max_prompt_len.max(total);
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let out = long.forward(&ic_prompt, None, false)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                row.entries = out.stats.kb_score_entries + out.stats.prompt_score_entries;
            }
            row.median_ms = Some(median(times));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `method,M,median_ms,entries`; untimed rows leave `median_ms` empty.
pub fn write_scaling_csv(rows: &[ScalingRow], path: &Path, include_timing: bool) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if include_timing {
        writeln!(w, "method,M,median_ms,entries")?;
    } else {
        writeln!(w, "method,M,entries")?;
    }
    for r in rows {
        if include_timing {
            let t = r.median_ms.map_or(String::new(), |t| format!("{t:.4}"));
            writeln!(w, "{},{},{},{}", r.method.as_str(), r.m, t, r.entries)?;
        } else {
            writeln!(w, "{},{},{}", r.method.as_str(), r.m, r.entries)?;
        }
    }
    w.flush()?;
    Ok(())
}
