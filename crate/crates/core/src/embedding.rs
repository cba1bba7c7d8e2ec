//! Text embeddings and cosine similarity.
//!
//! Two embedders are provided: [`HashBagEmbedder`], a deterministic
//! bag-of-tokens embedder used offline and in tests, and [`RemoteEmbedder`],
//! a client for OpenAI-compatible `/embeddings` endpoints. [`CachedEmbedder`]
//! memoizes either one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::EmbedError;
use crate::transport;

/// An L2-normalized embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `values` to unit length. A zero vector cannot be normalized.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::InvalidResponse("empty vector".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::InvalidResponse("vector has zero or non-finite norm".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two normalized vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    /// Stable identifier of the backend and model, used as a cache key.
    fn id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        (**self).embed(text)
    }
}

/// Lowercased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub(crate) fn stable_hash(text: &str) -> u64 {
    fnv1a(text.as_bytes())
}

/// Hashes lowercased tokens into a fixed number of count buckets and
/// normalizes the result.
#[derive(Debug, Clone)]
pub struct HashBagEmbedder {
    buckets: usize,
    id: String,
}

impl HashBagEmbedder {
    pub const DEFAULT_BUCKETS: usize = 256;

    pub fn new(buckets: usize) -> Self {
        assert!(buckets > 0, "bucket count must be positive");
        Self {
            buckets,
            id: format!("hash-bag-{buckets}"),
        }
    }

    /// Bucket a single lowercased token lands in.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.buckets as u64) as usize
    }
}

impl Default for HashBagEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BUCKETS)
    }
}

impl Embedder for HashBagEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0.0; self.buckets];
        let mut tokens = tokenize(trimmed);
        if tokens.is_empty() {
            // punctuation-only input still gets a stable vector
            tokens.push(trimmed.to_string());
        }
        for token in tokens {
            counts[self.bucket(&token)] += 1.0;
        }
        Embedding::normalized(counts)
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingData {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingResponse {
    OpenAi { data: Vec<EmbeddingData> },
    Bare { embedding: Vec<f64> },
}

/// Client for an OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    id: String,
}

impl RemoteEmbedder {
    /// `endpoint` is either the base API URL or the full `/embeddings` URL.
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        let url = transport::endpoint_url(endpoint, "embeddings");
        let client = transport::client(timeout).map_err(EmbedError::BackendUnavailable)?;
        Ok(Self {
            id: format!("remote:{url}:{model}"),
            url,
            model: model.to_string(),
            api_key,
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = EmbeddingRequest {
            model: &self.model,
            input: text,
        };
        let response: EmbeddingResponse =
            transport::post_json(&self.client, &self.url, self.api_key.as_deref(), &body)
                .map_err(|e| match e {
                    transport::TransportError::Decode(m) => EmbedError::InvalidResponse(m),
                    other => EmbedError::BackendUnavailable(other.to_string()),
                })?;
        let values = match response {
            EmbeddingResponse::OpenAi { mut data } => {
                if data.is_empty() {
                    return Err(EmbedError::InvalidResponse("no embedding in response".into()));
                }
                data.swap_remove(0).embedding
            }
            EmbeddingResponse::Bare { embedding } => embedding,
        };
        Embedding::normalized(values)
    }
}

#[derive(Serialize, Deserialize)]
struct SpillFile {
    backend: String,
    entries: HashMap<String, Embedding>,
}

/// Memoizes another embedder, optionally persisting entries to a JSON file.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Embedding>>,
    spill: Option<PathBuf>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            spill: None,
        }
    }

    /// Loads previously spilled vectors for the same backend id from `path`
    /// (if the file exists) and spills there on [`CachedEmbedder::flush`].
    pub fn with_spill_file(inner: E, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut cache = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let file: SpillFile = serde_json::from_str(&text)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            if file.backend == inner.id() {
                cache = file.entries;
            }
        }
        Ok(Self {
            inner,
            cache: Mutex::new(cache),
            spill: Some(path),
        })
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flush(&self) -> std::io::Result<()> {
        let Some(path) = &self.spill else {
            return Ok(());
        };
        let entries = self.cache.lock().expect("embedding cache poisoned").clone();
        let file = SpillFile {
            backend: self.inner.id().to_string(),
            entries,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(path, json)
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if let Some(hit) = self.cache.lock().expect("embedding cache poisoned").get(text) {
            return Ok(hit.clone());
        }
        // computed outside the lock so slow backends do not serialize callers
        let vector = self.inner.embed(text)?;
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn scalar_dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    #[test]
    fn deterministic_and_normalized() {
        let e = HashBagEmbedder::default();
        let a = e.embed("x").unwrap();
        let b = e.embed("x").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 256);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashBagEmbedder::default();
        assert_eq!(e.embed(""), Err(EmbedError::EmptyText));
        assert_eq!(e.embed("   "), Err(EmbedError::EmptyText));
        assert!(e.embed("?").is_ok());
    }

    #[test]
    fn lexical_overlap_orders_similarity() {
        let e = HashBagEmbedder::default();
        let base = e.embed("who is the president").unwrap();
        let close = e.embed("who is the president of the usa").unwrap();
        let far = e.embed("capital of france").unwrap();
        let near_sim = cosine(&base, &close).unwrap();
        let far_sim = cosine(&base, &far).unwrap();
        assert!(near_sim > far_sim, "{near_sim} <= {far_sim}");
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let e = HashBagEmbedder::default();
        let v = e.embed("Los Angeles").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        let a = Embedding::normalized(vec![1.0, 0.0, 0.0]).unwrap();
        let b = Embedding::normalized(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_rejects_dimension_mismatch() {
        let a = Embedding::normalized(vec![1.0, 0.0]).unwrap();
        let b = Embedding::normalized(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            cosine(&a, &b),
            Err(EmbedError::DimensionMismatch { left: 2, right: 3 })
        );
    }

    #[test]
    fn cosine_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let raw_a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let raw_b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let na = scalar_dot(&raw_a, &raw_a).sqrt();
            let nb = scalar_dot(&raw_b, &raw_b).sqrt();
            let expected = scalar_dot(&raw_a, &raw_b) / (na * nb);
            let a = Embedding::normalized(raw_a).unwrap();
            let b = Embedding::normalized(raw_b).unwrap();
            assert!((cosine(&a, &b).unwrap() - expected).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in "[a-z ]{1,30}", b in "[a-z ]{1,30}") {
            prop_assume!(!a.trim().is_empty() && !b.trim().is_empty());
            let e = HashBagEmbedder::default();
            let va = e.embed(&a).unwrap();
            let vb = e.embed(&b).unwrap();
            prop_assert_eq!(cosine(&va, &vb).unwrap(), cosine(&vb, &va).unwrap());
        }
    }

    struct Counting {
        inner: HashBagEmbedder,
        calls: AtomicUsize,
    }

    impl Embedder for Counting {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed(text)
        }
    }

    #[test]
    fn cache_avoids_recomputation_and_spills() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let cached = CachedEmbedder::with_spill_file(
            Counting {
                inner: HashBagEmbedder::default(),
                calls: AtomicUsize::new(0),
            },
            &path,
        )
        .unwrap();
        let a = cached.embed("hello world").unwrap();
        let b = cached.embed("hello world").unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        cached.flush().unwrap();

        let reloaded = CachedEmbedder::with_spill_file(HashBagEmbedder::default(), &path).unwrap();
        assert_eq!(reloaded.len(), 1);
        assert_eq!(reloaded.embed("hello world").unwrap(), a);

        // a different backend id ignores the spilled entries
        let other = CachedEmbedder::with_spill_file(HashBagEmbedder::new(64), &path).unwrap();
        assert!(other.is_empty());
    }

    #[test]
    fn remote_embedder_reports_unreachable_endpoint() {
        let e = RemoteEmbedder::new(
            "http://127.0.0.1:9/v1",
            "test-model",
            None,
            Duration::from_millis(300),
        )
        .unwrap();
        assert!(matches!(e.embed("hi"), Err(EmbedError::BackendUnavailable(_))));
        assert_eq!(e.embed(""), Err(EmbedError::EmptyText));
    }
}
