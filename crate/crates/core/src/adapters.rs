//! Trainable adapters, knowledge-token encoding and the on-disk token store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{tensors_hash, Checkpoint, CheckpointError};
use crate::embed::{encode_triple, encode_triples, BaseEmbeddingPair, EmbedError, EmbeddingBackend};
use crate::kb::{KbError, KnowledgeBase, KnowledgeTriple, Upsert};
use crate::model::{KnowledgeContext, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("base embedding has {got} dims, adapters expect {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("stale token store: positions {positions:?} do not match the knowledge base")]
    Stale { positions: Vec<usize> },
    #[error("token store was built with adapters {store:016x}, current adapters are {current:016x}")]
    AdapterMismatch { store: u64, current: u64 },
    #[error("token store has no base embeddings; rebuild it from the knowledge base")]
    NoBases,
    #[error("token file: {0}")]
    Format(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct AdapterMeta {
    layers: usize,
    dim: usize,
    embed_dim: usize,
}

const CHECKPOINT_KIND: &str = "adapters";

/// Per-layer linear key/value adapters (`[P × D]`, applied as `base · W`) and
/// the per-layer knowledge query heads (`[D × D]`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub query: Vec<Tensor>,
}

impl AdapterSet {
    /// Query heads start as copies of the frozen query projections; key and
    /// value adapters are drawn i.i.d. from `N(0, 1/P)`.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        weights: &TransformerWeights,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (embed_dim as f64).sqrt();
        let mut key = Vec::with_capacity(cfg.layers);
        let mut value = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            key.push(Tensor::randn(&[embed_dim, cfg.dim], std, rng));
            value.push(Tensor::randn(&[embed_dim, cfg.dim], std, rng));
        }
        Self {
            key,
            value,
            query: weights.layers.iter().map(|l| l.wq.clone()).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.key.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.key.first().map_or(0, Tensor::rows)
    }

    pub fn dim(&self) -> usize {
        self.key.first().map_or(0, Tensor::cols)
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, ((k, v), q)) in self.key.iter().zip(&self.value).zip(&self.query).enumerate() {
            out.push((format!("key.{l}"), k));
            out.push((format!("value.{l}"), v));
            out.push((format!("query.{l}"), q));
        }
        out
    }

    /// Parameters in a fixed order (key, value, query per layer).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for ((k, v), q) in self
            .key
            .iter_mut()
            .zip(self.value.iter_mut())
            .zip(self.query.iter_mut())
        {
            out.push(k);
            out.push(v);
            out.push(q);
        }
        out
    }

    pub fn content_hash(&self) -> u64 {
        let named = self.named();
        tensors_hash(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = AdapterMeta {
            layers: self.layers(),
            dim: self.dim(),
            embed_dim: self.embed_dim(),
        };
        let mut c = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
        for (n, t) in self.named() {
            c.push(n, t.clone());
        }
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: AdapterMeta = serde_json::from_value(c.meta.clone()).map_err(CheckpointError::from)?;
        let (p, d) = (meta.embed_dim, meta.dim);
        let mut out = Self {
            key: Vec::new(),
            value: Vec::new(),
            query: Vec::new(),
        };
        for l in 0..meta.layers {
            out.key.push(c.take(&format!("key.{l}"), &[p, d])?);
            out.value.push(c.take(&format!("value.{l}"), &[p, d])?);
            out.query.push(c.take(&format!("query.{l}"), &[d, d])?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    fn check_embedding(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.embed_dim() {
            return Err(AdapterError::EmbeddingDim {
                expected: self.embed_dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Knowledge keys and values of one triple at every layer. Each output
    /// is a plain ordered dot product, so a token is bit-identical whether
    /// it is encoded alone or as part of a batch.
    pub fn encode(&self, base: &BaseEmbeddingPair) -> Result<(Tensor, Tensor)> {
        self.check_embedding(&base.key_base)?;
        self.check_embedding(&base.value_base)?;
        let (layers, d) = (self.layers(), self.dim());
        let mut keys = vec![0.0; layers * d];
        let mut values = vec![0.0; layers * d];
        for l in 0..layers {
            project_into(&base.key_base, &self.key[l], &mut keys[l * d..(l + 1) * d]);
            project_into(&base.value_base, &self.value[l], &mut values[l * d..(l + 1) * d]);
        }
        Ok((
            Tensor::new(vec![layers, d], keys).expect("shape matches"),
            Tensor::new(vec![layers, d], values).expect("shape matches"),
        ))
    }
}

fn project_into(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let d = w.cols();
    out.fill(0.0);
    for (p, &xp) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data()[p * d..(p + 1) * d]) {
            *o += xp * wv;
        }
    }
}

/// Per-layer key/value vectors of one triple.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeToken {
    /// `[L × D]`
    pub keys: Tensor,
    /// `[L × D]`
    pub values: Tensor,
    pub source_position: usize,
    pub fingerprint: u64,
}

pub fn encode_token(
    adapters: &AdapterSet,
    base: &BaseEmbeddingPair,
    triple: &KnowledgeTriple,
    position: usize,
) -> Result<KnowledgeToken> {
    let (keys, values) = adapters.encode(base)?;
    Ok(KnowledgeToken {
        keys,
        values,
        source_position: position,
        fingerprint: triple.fingerprint(),
    })
}

/// Knowledge tokens stacked per layer: `keys[l]`, `values[l]` are `[M × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTokens {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl PackedTokens {
    pub fn pack<'a>(tokens: impl IntoIterator<Item = &'a KnowledgeToken>, layers: usize, dim: usize) -> Self {
        let mut keys = vec![Vec::new(); layers];
        let mut values = vec![Vec::new(); layers];
        let mut m = 0;
        for t in tokens {
            for l in 0..layers {
                keys[l].extend_from_slice(t.keys.row(l));
                values[l].extend_from_slice(t.values.row(l));
            }
            m += 1;
        }
        let to_t = |v: Vec<Vec<f64>>| {
            v.into_iter()
                .map(|d| Tensor::new(vec![m, dim], d).expect("shape matches"))
                .collect()
        };
        Self {
            keys: to_t(keys),
            values: to_t(values),
        }
    }

    pub fn count(&self) -> usize {
        self.keys.first().map_or(0, Tensor::rows)
    }

    pub fn context<'a>(&'a self, adapters: &'a AdapterSet) -> KnowledgeContext<'a> {
        KnowledgeContext {
            query_heads: &adapters.query,
            keys: &self.keys,
            values: &self.values,
        }
    }
}

const TOKEN_MAGIC: &[u8; 8] = b"KBLMTOKS";

#[derive(Debug, Serialize, Deserialize)]
struct TokenHeader {
    layers: usize,
    dim: usize,
    count: usize,
    adapter_hash: u64,
    fingerprints: Vec<u64>,
}

/// Knowledge tokens aligned with knowledge-base positions.
#[derive(Debug, Clone)]
pub struct TokenStore {
    tokens: Vec<KnowledgeToken>,
    bases: Option<Vec<BaseEmbeddingPair>>,
    adapter_hash: u64,
    layers: usize,
    dim: usize,
    encode_calls: u64,
}

impl PartialEq for TokenStore {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.adapter_hash == other.adapter_hash
            && self.layers == other.layers
            && self.dim == other.dim
    }
}

impl TokenStore {
    /// Embeds and encodes every triple of `kb`.
    pub fn build<B: EmbeddingBackend + ?Sized>(kb: &KnowledgeBase, backend: &B, adapters: &AdapterSet) -> Result<Self> {
        let bases = encode_triples(backend, kb.triples())?;
        Self::from_bases(kb, bases, adapters)
    }

    /// Encodes precomputed base embeddings (one per triple, in KB order).
    pub fn from_bases(kb: &KnowledgeBase, bases: Vec<BaseEmbeddingPair>, adapters: &AdapterSet) -> Result<Self> {
        if bases.len() != kb.len() {
            return Err(AdapterError::Format(format!(
                "{} base embeddings for {} triples",
                bases.len(),
                kb.len()
            )));
        }
        let mut store = Self {
            tokens: Vec::with_capacity(kb.len()),
            bases: None,
            adapter_hash: adapters.content_hash(),
            layers: adapters.layers(),
            dim: adapters.dim(),
            encode_calls: 0,
        };
        for (pos, (t, b)) in kb.iter().zip(&bases).enumerate() {
            let tok = store.encode(adapters, b, t, pos)?;
            store.tokens.push(tok);
        }
        store.bases = Some(bases);
        Ok(store)
    }

    fn encode(
        &mut self,
        adapters: &AdapterSet,
        base: &BaseEmbeddingPair,
        t: &KnowledgeTriple,
        pos: usize,
    ) -> Result<KnowledgeToken> {
        self.encode_calls += 1;
        encode_token(adapters, base, t, pos)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[KnowledgeToken] {
        &self.tokens
    }

    pub fn bases(&self) -> Option<&[BaseEmbeddingPair]> {
        self.bases.as_deref()
    }

    pub fn adapter_hash(&self) -> u64 {
        self.adapter_hash
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of knowledge tokens encoded by this store since it was built
    /// or loaded.
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls
    }

    fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        let current = adapters.content_hash();
        if current != self.adapter_hash {
            return Err(AdapterError::AdapterMismatch {
                store: self.adapter_hash,
                current,
            });
        }
        Ok(())
    }

    /// Inserts or replaces one triple in both `kb` and the store, encoding
    /// exactly one new token. Returns the triple's position.
    pub fn upsert_triple<B: EmbeddingBackend + ?Sized>(
        &mut self,
        kb: &mut KnowledgeBase,
        backend: &B,
        adapters: &AdapterSet,
        triple: KnowledgeTriple,
    ) -> Result<usize> {
        self.check_adapters(adapters)?;
        triple.validate()?;
        let base = encode_triple(backend, &triple)?;
        let position = kb.position(&triple.name, &triple.property).unwrap_or(kb.len());
        let token = self.encode(adapters, &base, &triple, position)?;
        match kb.upsert(triple)? {
            Upsert::Inserted(pos) => {
                debug_assert_eq!(pos, self.tokens.len());
                self.tokens.push(token);
                if let Some(b) = &mut self.bases {
                    b.push(base);
                }
            }
            Upsert::Replaced { position, .. } => {
                self.tokens[position] = token;
                if let Some(b) = &mut self.bases {
                    b[position] = base;
                }
            }
        }
        Ok(position)
    }

    /// Removes one triple from both `kb` and the store; later positions
    /// shift down by one.
    pub fn remove_triple(&mut self, kb: &mut KnowledgeBase, name: &str, property: &str) -> Result<KnowledgeTriple> {
        let (pos, triple) = kb.remove(name, property)?;
        self.tokens.remove(pos);
        if let Some(b) = &mut self.bases {
            b.remove(pos);
        }
        for t in &mut self.tokens[pos..] {
            t.source_position -= 1;
        }
        Ok(triple)
    }

    /// Re-encodes every token from the stored base embeddings after an
    /// adapter change, without touching the embedding backend.
    pub fn rematerialize(&mut self, kb: &KnowledgeBase, adapters: &AdapterSet) -> Result<()> {
        self.verify(kb)?;
        let bases = self.bases.take().ok_or(AdapterError::NoBases)?;
        let fresh = Self::from_bases(kb, bases, adapters)?;
        self.encode_calls += fresh.encode_calls;
        self.tokens = fresh.tokens;
        self.bases = fresh.bases;
        self.adapter_hash = fresh.adapter_hash;
        Ok(())
    }

    /// Checks that every token still describes the triple at its position.
    pub fn verify(&self, kb: &KnowledgeBase) -> Result<()> {
        let mut positions: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| kb.get(*i).is_none_or(|tr| tr.fingerprint() != t.fingerprint))
            .map(|(i, _)| i)
            .collect();
        positions.extend(self.tokens.len()..kb.len());
        if positions.is_empty() {
            Ok(())
        } else {
            Err(AdapterError::Stale { positions })
        }
    }

    /// Stacks all tokens per layer.
    pub fn packed(&self) -> PackedTokens {
        PackedTokens::pack(&self.tokens, self.layers, self.dim)
    }

    /// Stacks the tokens at `positions`, in that order.
    pub fn packed_subset(&self, positions: &[usize]) -> PackedTokens {
        PackedTokens::pack(positions.iter().map(|&p| &self.tokens[p]), self.layers, self.dim)
    }

    /// File layout: magic, `u64` header length, JSON header (layers, dim,
    /// count, adapter hash, fingerprints), then per token its `L × D` keys
    /// and `L × D` values as little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TokenHeader {
            layers: self.layers,
            dim: self.dim,
            count: self.tokens.len(),
            adapter_hash: self.adapter_hash,
            fingerprints: self.tokens.iter().map(|t| t.fingerprint).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| AdapterError::Format(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TOKEN_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tokens {
            for x in t.keys.data().iter().chain(t.values.data()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a token file and checks it against `kb` (stale positions are
    /// reported) and, when given, the adapters it must have come from.
    pub fn load(path: &Path, kb: &KnowledgeBase, adapters: Option<&AdapterSet>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TOKEN_MAGIC {
            return Err(AdapterError::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: TokenHeader = serde_json::from_slice(&header).map_err(|e| AdapterError::Format(e.to_string()))?;
        if header.fingerprints.len() != header.count {
            return Err(AdapterError::Format(
                "fingerprint count does not match token count".into(),
            ));
        }
        let per = header.layers * header.dim;
        let mut raw = vec![0u8; per * 16];
        let mut tokens = Vec::with_capacity(header.count);
        for (pos, &fingerprint) in header.fingerprints.iter().enumerate() {
            r.read_exact(&mut raw)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let (k, v) = vals.split_at(per);
            tokens.push(KnowledgeToken {
                keys: Tensor::new(vec![header.layers, header.dim], k.to_vec()).expect("shape matches"),
                values: Tensor::new(vec![header.layers, header.dim], v.to_vec()).expect("shape matches"),
                source_position: pos,
                fingerprint,
            });
        }
        let store = Self {
            tokens,
            bases: None,
            adapter_hash: header.adapter_hash,
            layers: header.layers,
            dim: header.dim,
            encode_calls: 0,
        };
        store.verify(kb)?;
        if let Some(a) = adapters {
            store.check_adapters(a)?;
        }
        Ok(store)
    }

    /// Attaches base embeddings (e.g. recomputed from a cache) so the store
    /// can be rematerialized.
    pub fn attach_bases(&mut self, bases: Vec<BaseEmbeddingPair>) -> Result<()> {
        if bases.len() != self.tokens.len() {
            return Err(AdapterError::Format(format!(
                "{} base embeddings for {} tokens",
                bases.len(),
                self.tokens.len()
            )));
        }
        self.bases = Some(bases);
        Ok(())
    }
}
