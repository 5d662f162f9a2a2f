//! Sentence-encoder access: a remote `/v1/embeddings` client, an offline
//! token-hashing embedder, and a digest-keyed vector cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EmbedError;
use crate::scalar::{normalize_in_place, Scalar};
use crate::transport::{post_with_retry, HttpTransport, RetryPolicy, Sleeper, ThreadSleeper};
use crate::util::{bounded_map, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderMode {
    Remote,
    DeterministicTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub dimension: usize,
    pub batch_size: usize,
    pub mode: EmbedderMode,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl EmbedderConfig {
    /// Offline hashing embedder with the MiniLM output width.
    pub fn deterministic(dimension: usize) -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: format!("token-hash-{dimension}"),
            dimension,
            batch_size: 64,
            mode: EmbedderMode::DeterministicTest,
            parallelism: default_parallelism(),
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, model_name: impl Into<String>, dimension: usize) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            dimension,
            batch_size: 32,
            mode: EmbedderMode::Remote,
            parallelism: default_parallelism(),
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::InvalidConfig("dimension must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.mode == EmbedderMode::Remote && self.endpoint_url.is_empty() {
            return Err(EmbedError::InvalidConfig("remote mode needs an endpoint_url".into()));
        }
        Ok(())
    }
}

/// Produces unit-norm vectors, one per input text.
pub trait Embedder<F: Scalar>: Send + Sync {
    fn model_name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbedError>;
}

/// Offline embedder: each lowercased token hashes to one of `dimension`
/// buckets, counts are L2-normalized. Cosine then measures token overlap.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    name: String,
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self {
            name: format!("token-hash-{dimension}"),
            dimension: dimension.max(1),
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dimension as u64) as usize
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl<F: Scalar> Embedder<F> for HashEmbedder {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![F::zero(); self.dimension];
                for tok in tokenize(t) {
                    let b = self.bucket(&tok);
                    v[b] = v[b] + F::one();
                }
                if !normalize_in_place(&mut v) {
                    // token-free text maps to a fixed unit vector
                    v[0] = F::one();
                }
                v
            })
            .collect())
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse<F> {
    data: Vec<EmbeddingDatum<F>>,
}

#[derive(Deserialize)]
struct EmbeddingDatum<F> {
    embedding: Vec<F>,
}

/// Client for `POST {endpoint}/v1/embeddings`.
pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    transport: Arc<dyn HttpTransport>,
    sleeper: Arc<dyn Sleeper>,
    retry: RetryPolicy,
    api_key: Option<String>,
    timeout: Duration,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbedderConfig, transport: Arc<dyn HttpTransport>) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            retry: RetryPolicy::default(),
            api_key: None,
            timeout: Duration::from_secs(60),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy, sleeper: Arc<dyn Sleeper>) -> Self {
        self.retry = retry;
        self.sleeper = sleeper;
        self
    }

    fn url(&self) -> String {
        format!("{}/v1/embeddings", self.cfg.endpoint_url.trim_end_matches('/'))
    }

    fn embed_chunk<F: Scalar>(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbedError> {
        let body = serde_json::to_string(&EmbeddingRequest {
            model: &self.cfg.model_name,
            input: texts,
        })
        .expect("request serializes");
        let raw = post_with_retry(
            self.transport.as_ref(),
            self.sleeper.as_ref(),
            &self.retry,
            &self.url(),
            self.api_key.as_deref(),
            &body,
            self.timeout,
        )?;
        let resp: EmbeddingResponse<F> =
            serde_json::from_str(&raw).map_err(|e| EmbedError::Decode(e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: resp.data.len(),
            });
        }
        resp.data
            .into_iter()
            .map(|d| {
                let mut v = d.embedding;
                if v.len() != self.cfg.dimension {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.cfg.dimension,
                        got: v.len(),
                    });
                }
                if !normalize_in_place(&mut v) {
                    return Err(EmbedError::ZeroVector);
                }
                Ok(v)
            })
            .collect()
    }
}

impl<F: Scalar> Embedder<F> for RemoteEmbedder {
    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbedError> {
        let chunks: Vec<&[String]> = texts.chunks(self.cfg.batch_size).collect();
        let results = bounded_map(&chunks, self.cfg.parallelism, |chunk| self.embed_chunk::<F>(chunk));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Builds the embedder described by `cfg`.
pub fn embedder_from_config<F: Scalar>(
    cfg: &EmbedderConfig,
    transport: Arc<dyn HttpTransport>,
) -> Result<Arc<dyn Embedder<F>>, EmbedError> {
    cfg.validate()?;
    Ok(match cfg.mode {
        EmbedderMode::DeterministicTest => Arc::new(HashEmbedder::new(cfg.dimension)),
        EmbedderMode::Remote => Arc::new(RemoteEmbedder::new(cfg.clone(), transport)?),
    })
}

/// Embeds `texts` per `cfg`, returning unit vectors in input order.
pub fn embed_batch(
    texts: &[String],
    cfg: &EmbedderConfig,
    transport: Arc<dyn HttpTransport>,
) -> Result<Vec<Vec<f32>>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::InvalidConfig("embed_batch needs at least one text".into()));
    }
    embedder_from_config(cfg, transport)?.embed(texts)
}

#[derive(Serialize, Deserialize)]
struct CacheLine<F> {
    key: String,
    vector: Vec<F>,
}

/// Wraps an embedder with a `<model>:<sha256(text)>` keyed cache,
/// optionally persisted as one JSON record per line.
pub struct CachedEmbedder<F: Scalar> {
    inner: Arc<dyn Embedder<F>>,
    entries: RwLock<HashMap<String, Vec<F>>>,
    sink: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl<F: Scalar> CachedEmbedder<F> {
    pub fn in_memory(inner: Arc<dyn Embedder<F>>) -> Self {
        Self {
            inner,
            entries: RwLock::new(HashMap::new()),
            sink: None,
            path: None,
        }
    }

    /// Loads existing records from `path` (if any) and appends new ones to it.
    pub fn persistent(inner: Arc<dyn Embedder<F>>, path: &Path) -> Result<Self, EmbedError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines() {
                let line = line?;
                // a torn final line from a crash is skipped
                if let Ok(rec) = serde_json::from_str::<CacheLine<F>>(&line) {
                    entries.insert(rec.key, rec.vector);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            entries: RwLock::new(entries),
            sink: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn key(&self, text: &str) -> String {
        format!("{}:{}", self.inner.model_name(), sha256_hex(text.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

impl<F: Scalar> Embedder<F> for CachedEmbedder<F> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<F>>, EmbedError> {
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut missing: Vec<String> = Vec::new();
        let mut missing_keys: Vec<String> = Vec::new();
        {
            let entries = self.entries.read().expect("cache lock");
            for (t, k) in texts.iter().zip(&keys) {
                if !entries.contains_key(k) && !missing_keys.contains(k) {
                    missing.push(t.clone());
                    missing_keys.push(k.clone());
                }
            }
        }
        if !missing.is_empty() {
            let vectors = self.inner.embed(&missing)?;
            let mut entries = self.entries.write().expect("cache lock");
            let mut buf = String::new();
            for (k, v) in missing_keys.into_iter().zip(vectors) {
                if self.sink.is_some() {
                    buf.push_str(&serde_json::to_string(&CacheLine { key: k.clone(), vector: v.clone() }).expect("cache line"));
                    buf.push('\n');
                }
                entries.insert(k, v);
            }
            if let Some(sink) = &self.sink {
                sink.lock().expect("cache file lock").write_all(buf.as_bytes())?;
            }
        }
        let entries = self.entries.read().expect("cache lock");
        Ok(keys.iter().map(|k| entries[k].clone()).collect())
    }
}
