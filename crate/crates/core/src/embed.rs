//! Sentence-encoder backends and the persistent embedding cache.
//!
//! Three backends implement [`EmbeddingBackend`]: a local signed
//! character-n-gram hashing encoder, a cache wrapper around any backend, and
//! an HTTP client for OpenAI-style embedding endpoints.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::KnowledgeTriple;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension must be at least 8, got {0}")]
    DimTooSmall(usize),
    #[error("remote embedding request failed after {attempts} attempt(s): {cause}")]
    Transport { attempts: usize, cause: String },
    #[error("remote returned HTTP {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("remote returned embedding of dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("remote returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl EmbedError {
    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport { .. })
    }
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// A sentence encoder `f(·)` mapping text to a `dim()`-length vector.
pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifies the backend configuration; two backends with equal
    /// fingerprints must produce equal embeddings.
    fn fingerprint(&self) -> String;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        (**self).embed_batch(texts)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing of lower-cased character 3-, 4- and 5-grams
/// (with a space marking both text boundaries), L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashNgram {
    dim: usize,
}

impl HashNgram {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(EmbedError::DimTooSmall(dim));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingBackend for HashNgram {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hash-ngram/v1/3-5/{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 4];
        for n in 3..=5usize {
            for gram in chars.windows(n) {
                let bytes = std::iter::once(n as u8)
                    .chain(gram.iter().flat_map(|c| c.encode_utf8(&mut buf).as_bytes().to_vec()));
                let h = fnv1a(bytes);
                let bucket = (h % self.dim as u64) as usize;
                v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every feature cancelled; fall back to a deterministic basis vector.
            v[(fnv1a(text.bytes()) % self.dim as u64) as usize] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Base key/value embeddings of one triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEmbeddingPair {
    pub key_base: Vec<f64>,
    pub value_base: Vec<f64>,
}

/// `key_base = f("The <property> of <name>")`, `value_base = f(<value>)`.
pub fn encode_triple<B: EmbeddingBackend + ?Sized>(backend: &B, triple: &KnowledgeTriple) -> Result<BaseEmbeddingPair> {
    Ok(BaseEmbeddingPair {
        key_base: backend.embed(&triple.key_string())?,
        value_base: backend.embed(&triple.value)?,
    })
}

/// Encodes every triple, batching the backend calls.
pub fn encode_triples<B: EmbeddingBackend + ?Sized>(
    backend: &B,
    triples: &[KnowledgeTriple],
) -> Result<Vec<BaseEmbeddingPair>> {
    let keys: Vec<String> = triples.iter().map(KnowledgeTriple::key_string).collect();
    let mut texts: Vec<&str> = keys.iter().map(String::as_str).collect();
    texts.extend(triples.iter().map(|t| t.value.as_str()));
    let mut out = backend.embed_batch(&texts)?;
    let values = out.split_off(triples.len());
    Ok(out
        .into_iter()
        .zip(values)
        .map(|(key_base, value_base)| BaseEmbeddingPair { key_base, value_base })
        .collect())
}

fn hash64(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Append-only on-disk store of embeddings keyed by
/// `(hash(backend fingerprint), hash(text))`.
///
/// Record layout (little endian): `fingerprint_hash: u64, text_hash: u64,
/// dim: u64, dim × f64`.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    entries: RwLock<HashMap<(u64, u64), Vec<f64>>>,
    writer: Mutex<BufWriter<File>>,
}

impl EmbeddingCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let mut r = BufReader::new(File::open(&path)?);
            let mut head = [0u8; 24];
            loop {
                match r.read_exact(&mut head) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(e.into()),
                }
                let fp = u64::from_le_bytes(head[0..8].try_into().unwrap());
                let th = u64::from_le_bytes(head[8..16].try_into().unwrap());
                let dim = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
                let mut body = vec![0u8; dim * 8];
                if r.read_exact(&mut body).is_err() {
                    // Torn trailing record from an interrupted write.
                    break;
                }
                let v = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.insert((fp, th), v);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, fingerprint: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(hash64(fingerprint), hash64(text)))
            .cloned()
    }

    pub fn put(&self, fingerprint: &str, text: &str, vector: &[f64]) -> Result<()> {
        let key = (hash64(fingerprint), hash64(text));
        let mut w = self.writer.lock().expect("cache writer lock");
        w.write_all(&key.0.to_le_bytes())?;
        w.write_all(&key.1.to_le_bytes())?;
        w.write_all(&(vector.len() as u64).to_le_bytes())?;
        for x in vector {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        self.entries.write().expect("cache lock").insert(key, vector.to_vec());
        Ok(())
    }
}

/// Serves embeddings from an [`EmbeddingCache`], delegating misses to the
/// wrapped backend and recording them.
pub struct CachedBackend<B> {
    inner: B,
    cache: EmbeddingCache,
}

impl<B: EmbeddingBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: EmbeddingCache) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedBackend<B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let fp = self.inner.fingerprint();
        if let Some(v) = self.cache.get(&fp, text) {
            if v.len() == self.dim() {
                return Ok(v);
            }
        }
        let v = self.inner.embed(text)?;
        self.cache.put(&fp, text, &v)?;
        Ok(v)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let fp = self.inner.fingerprint();
        let mut out: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| self.cache.get(&fp, t).filter(|v| v.len() == self.dim()))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.embed_batch(&batch)?;
            for (&i, v) in missing.iter().zip(fresh) {
                self.cache.put(&fp, texts[i], &v)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

/// Connection settings for [`HttpRemote`]. The API key is never part of the
/// configuration; it is read from `EMBED_API_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub dim: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_retries() -> usize {
    3
}
fn default_batch() -> usize {
    64
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            dim: 1536,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Client for an embedding endpoint speaking
/// `POST {"input": [...]}` → `{"data": [{"embedding": [...]}, ...]}`.
/// Remote vectors are passed through unnormalized.
pub struct HttpRemote {
    endpoint: String,
    api_key: Option<String>,
    cfg: RemoteConfig,
    agent: ureq::Agent,
    requests: AtomicU64,
}

impl HttpRemote {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, cfg: RemoteConfig) -> Result<Self> {
        if cfg.dim < 8 {
            return Err(EmbedError::DimTooSmall(cfg.dim));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            cfg,
            agent,
            requests: AtomicU64::new(0),
        })
    }

    /// Resolves the endpoint from `EMBED_ENDPOINT` (falling back to the
    /// config) and the key from `EMBED_API_KEY`.
    pub fn from_env(cfg: RemoteConfig) -> Result<Self> {
        let endpoint = std::env::var("EMBED_ENDPOINT")
            .ok()
            .or_else(|| cfg.endpoint.clone())
            .ok_or_else(|| EmbedError::Config("EMBED_ENDPOINT or remote.endpoint".into()))?;
        let key = std::env::var("EMBED_API_KEY").ok();
        Self::new(endpoint, key, cfg)
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn request_once(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let body = EmbedRequest {
            input: texts,
            model: self.cfg.model.as_deref(),
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| EmbedError::Transport {
            attempts: 1,
            cause: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(EmbedError::Transport {
                attempts: 1,
                cause: format!("HTTP {status}"),
            });
        }
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(EmbedError::Remote { status, body });
        }
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| EmbedError::Transport {
            attempts: 1,
            cause: format!("bad response body: {e}"),
        })?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: parsed.data.len(),
            });
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.cfg.dim {
                    Err(EmbedError::DimensionMismatch {
                        expected: self.cfg.dim,
                        got: d.embedding.len(),
                    })
                } else {
                    Ok(d.embedding)
                }
            })
            .collect()
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let attempts = self.cfg.retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            match self.request_once(texts) {
                Err(e) if e.is_retryable() => {
                    last = Some(e);
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                    }
                }
                other => return other,
            }
        }
        let cause = match last {
            Some(EmbedError::Transport { cause, .. }) => cause,
            Some(other) => other.to_string(),
            None => "no attempts made".into(),
        };
        Err(EmbedError::Transport { attempts, cause })
    }
}

impl EmbeddingBackend for HttpRemote {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn fingerprint(&self) -> String {
        format!(
            "http/{}/{}/{}",
            self.endpoint,
            self.cfg.model.as_deref().unwrap_or("-"),
            self.cfg.dim
        )
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size.max(1)) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}

/// Backend selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    HashNgram { dim: usize },
    HttpRemote(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::HashNgram { dim: DEFAULT_DIM }
    }
}

impl BackendConfig {
    pub fn dim(&self) -> usize {
        match self {
            BackendConfig::HashNgram { dim } => *dim,
            BackendConfig::HttpRemote(c) => c.dim,
        }
    }

    /// Instantiates the backend, optionally fronted by a file cache.
    pub fn build(&self, cache: Option<&Path>) -> Result<Box<dyn EmbeddingBackend>> {
        let base: Box<dyn EmbeddingBackend> = match self {
            BackendConfig::HashNgram { dim } => Box::new(HashNgram::new(*dim)?),
            BackendConfig::HttpRemote(c) => Box::new(HttpRemote::from_env(c.clone())?),
        };
        Ok(match cache {
            Some(path) => Box::new(CachedBackend::new(base, EmbeddingCache::open(path)?)),
            None => base,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::BufRead;
    use std::net::TcpListener;
    use std::sync::atomic::AtomicUsize;

    /// Counts calls into a wrapped backend.
    struct Counting<B> {
        inner: B,
        calls: AtomicUsize,
    }

    impl<B: EmbeddingBackend> EmbeddingBackend for Counting<B> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn fingerprint(&self) -> String {
            self.inner.fingerprint()
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed(text)
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn hash_ngram_is_deterministic() {
        let e = HashNgram::new(64).unwrap();
        assert_eq!(e.embed("abc").unwrap(), e.embed("abc").unwrap());
    }

    #[test]
    fn unrelated_names_are_far_apart() {
        let e = HashNgram::new(256).unwrap();
        let c = cosine(&e.embed("Nova Citadel").unwrap(), &e.embed("Posh Poodle").unwrap());
        assert!(c < 0.5, "cosine {c}");
    }

    #[test]
    fn rejects_empty_text_and_tiny_dim() {
        assert!(matches!(
            HashNgram::new(64).unwrap().embed("  "),
            Err(EmbedError::EmptyText)
        ));
        assert!(matches!(HashNgram::new(4), Err(EmbedError::DimTooSmall(4))));
    }

    proptest! {
        #[test]
        fn hash_ngram_outputs_unit_vectors(text in "\\PC{1,40}", dim in 8usize..300) {
            prop_assume!(!text.trim().is_empty());
            let v = HashNgram::new(dim).unwrap().embed(&text).unwrap();
            prop_assert_eq!(v.len(), dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn key_string_depends_only_on_name_and_property() {
        let e = HashNgram::new(64).unwrap();
        let a = KnowledgeTriple::new("X", "purpose", "Y").unwrap();
        let b = KnowledgeTriple::new("X", "purpose", "Z").unwrap();
        assert_eq!(a.key_string(), "The purpose of X");
        let (pa, pb) = (encode_triple(&e, &a).unwrap(), encode_triple(&e, &b).unwrap());
        assert_eq!(pa.key_base, pb.key_base);
        assert_ne!(pa.value_base, pb.value_base);
        assert_eq!(encode_triples(&e, &[a, b]).unwrap(), vec![pa, pb]);
    }

    #[test]
    fn cache_put_get_is_exact_and_fingerprint_scoped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let v = vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 3.0];
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.put("fp-a", "hello", &v).unwrap();
            assert_eq!(cache.get("fp-a", "hello").unwrap(), v);
            assert!(cache.get("fp-b", "hello").is_none());
        }
        let reopened = EmbeddingCache::open(&path).unwrap();
        assert_eq!(reopened.get("fp-a", "hello").unwrap(), v);
        assert!(reopened.get("fp-b", "hello").is_none());
    }

    #[test]
    fn cache_file_grows_linearly_in_dim() {
        let dir = tempfile::tempdir().unwrap();
        for dim in [16usize, 64] {
            let path = dir.path().join(format!("c{dim}"));
            let cache = EmbeddingCache::open(&path).unwrap();
            for i in 0..1000 {
                cache.put("fp", &format!("t{i}"), &vec![i as f64; dim]).unwrap();
            }
            let size = std::fs::metadata(&path).unwrap().len();
            assert_eq!(size, 1000 * (24 + 8 * dim as u64));
        }
    }

    #[test]
    fn cached_backend_calls_inner_once() {
        let dir = tempfile::tempdir().unwrap();
        let inner = Counting {
            inner: HashNgram::new(32).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let cached = CachedBackend::new(inner, EmbeddingCache::open(dir.path().join("c")).unwrap());
        let t = KnowledgeTriple::new("A", "purpose", "B").unwrap();
        let first = encode_triple(&cached, &t).unwrap();
        let second = encode_triple(&cached, &t).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            cached.inner().calls.load(Ordering::SeqCst),
            2,
            "one call per distinct text"
        );
    }

    /// Serves canned HTTP responses, one per accepted connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req = vec![0u8; len];
                reader.read_exact(&mut req).unwrap();
                bodies.push(String::from_utf8(req).unwrap());
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/embeddings"), handle)
    }

    fn remote_cfg(dim: usize, retries: usize) -> RemoteConfig {
        RemoteConfig {
            dim,
            retries,
            timeout_secs: 5,
            ..RemoteConfig::default()
        }
    }

    #[test]
    fn http_remote_round_trip() {
        let (url, h) = serve(vec![(
            200,
            r#"{"data":[{"embedding":[1,2,3,4,5,6,7,8]},{"embedding":[0,0,0,0,0,0,0,1]}]}"#.into(),
        )]);
        let remote = HttpRemote::new(url, Some("k".into()), remote_cfg(8, 0)).unwrap();
        let out = remote.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(out[0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(out[1][7], 1.0);
        let bodies = h.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent, serde_json::json!({"input": ["a", "b"]}));
    }

    #[test]
    fn http_remote_dimension_mismatch_is_hard_error() {
        let (url, h) = serve(vec![(200, r#"{"data":[{"embedding":[1,2,3]}]}"#.into())]);
        let remote = HttpRemote::new(url, None, remote_cfg(8, 3)).unwrap();
        let err = remote.embed("a").unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 8, got: 3 }));
        assert_eq!(remote.requests(), 1, "dimension errors are not retried");
        h.join().unwrap();
    }

    #[test]
    fn http_remote_retries_transient_failures() {
        let ok = r#"{"data":[{"embedding":[1,1,1,1,1,1,1,1]}]}"#.to_string();
        let (url, h) = serve(vec![(503, "{}".into()), (200, ok)]);
        let remote = HttpRemote::new(url, None, remote_cfg(8, 2)).unwrap();
        assert_eq!(remote.embed("a").unwrap(), vec![1.0; 8]);
        assert_eq!(remote.requests(), 2);
        h.join().unwrap();
    }

    #[test]
    fn http_remote_transport_failure_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let remote = HttpRemote::new(url, None, remote_cfg(8, 1)).unwrap();
        let err = remote.embed("a").unwrap_err();
        assert!(err.is_retryable());
        assert!(matches!(err, EmbedError::Transport { attempts: 2, .. }));
    }
}
