//! Sentence embedding providers and the embedding cache.
//!
//! Vectors are L2-normalized at ingestion so cosine similarity reduces to
//! a dot product. Two providers: a remote embeddings endpoint, and a
//! deterministic hash-based bag-of-words projection for offline work.
//! Cached vectors are keyed by (provider_id, sha256 of the text) so
//! providers never mix.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompter::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dim: usize,
    pub provider_id: String,
}

impl EmbeddingVector {
    /// Validates and L2-normalizes the raw values.
    pub fn new(values: Vec<f32>, provider_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::NonFiniteEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        let values: Vec<f32> = if norm > 0.0 {
            values.iter().map(|v| (*v as f64 / norm) as f32).collect()
        } else {
            let mut unit = vec![0.0; values.len()];
            unit[0] = 1.0;
            unit
        };
        Ok(EmbeddingVector {
            dim: values.len(),
            values,
            provider_id: provider_id.into(),
        })
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Deterministic local embedder: each lowercased whitespace token hashes
/// into one of `dim` buckets, counts accumulate, the result is normalized.
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder {
            dim,
            id: format!("hash-bow-v1-d{dim}"),
        }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(64)
    }
}

fn stable_bucket(token: &str, dim: usize) -> usize {
    let digest = sha256_hex(token.as_bytes());
    let h = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
    (h % dim as u64) as usize
}

impl EmbeddingProvider for HashEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|text| {
                let mut values = vec![0.0f32; self.dim];
                for token in text.split_whitespace() {
                    values[stable_bucket(&token.to_lowercase(), self.dim)] += 1.0;
                }
                EmbeddingVector::new(values, self.id.clone())
            })
            .collect()
    }
}

/// Remote embeddings endpoint; body {"input": [texts], "model": id},
/// response carries one vector per input under data[i].embedding.
pub struct RemoteEmbedder {
    endpoint: String,
    api_key: String,
    model: String,
    id: String,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: String, api_key: String, model: String) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()?;
        Ok(RemoteEmbedder {
            id: format!("remote:{model}"),
            endpoint,
            api_key,
            model,
            client,
        })
    }
}

#[derive(Deserialize)]
struct WireEmbeddings {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    embedding: Vec<f32>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&serde_json::json!({"input": texts, "model": self.model}))
            .send()?;
        let status = response.status();
        let body = response.text()?;
        if !status.is_success() {
            return Err(Error::HttpStatus {
                status: status.as_u16(),
                body,
            });
        }
        let wire: WireEmbeddings = serde_json::from_str(&body)
            .map_err(|e| Error::MalformedResponse(format!("{e}: {body}")))?;
        if wire.data.len() != texts.len() {
            return Err(Error::MalformedResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                wire.data.len()
            )));
        }
        let mut out = Vec::with_capacity(wire.data.len());
        let mut dim = None;
        for item in wire.data {
            let v = EmbeddingVector::new(item.embedding, self.id.clone())?;
            if *dim.get_or_insert(v.dim) != v.dim {
                return Err(Error::MalformedResponse(
                    "embedding dimensions differ within one batch".into(),
                ));
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingCacheRecord {
    provider_id: String,
    sha256: String,
    dim: usize,
    values: Vec<f32>,
}

/// JSONL-backed embedding cache keyed by (provider_id, sha256 of text).
/// Reads are concurrent, appends serialized.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), EmbeddingVector>>,
    appender: Mutex<Option<std::fs::File>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn ephemeral() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
            appender: Mutex::new(None),
            path: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let body = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(rec) = serde_json::from_str::<EmbeddingCacheRecord>(line) {
                    entries.insert(
                        (rec.provider_id.clone(), rec.sha256),
                        EmbeddingVector {
                            values: rec.values,
                            dim: rec.dim,
                            provider_id: rec.provider_id,
                        },
                    );
                }
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            appender: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns one vector per text, calling the provider only for misses.
    pub fn get_or_embed(
        &self,
        provider: &dyn EmbeddingProvider,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>> {
        let pid = provider.provider_id().to_string();
        let hashes: Vec<String> = texts.iter().map(|t| sha256_hex(t.as_bytes())).collect();

        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        {
            let entries = self.entries.read().unwrap();
            for (i, hash) in hashes.iter().enumerate() {
                out[i] = entries.get(&(pid.clone(), hash.clone())).cloned();
            }
        }
        let miss_indices: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if miss_indices.is_empty() {
            return Ok(out.into_iter().map(Option::unwrap).collect());
        }

        let miss_texts: Vec<String> = miss_indices.iter().map(|&i| texts[i].clone()).collect();
        let fresh = provider.embed_batch(&miss_texts)?;
        if fresh.len() != miss_texts.len() {
            return Err(Error::MalformedResponse(
                "provider returned a different number of vectors".into(),
            ));
        }
        {
            let mut entries = self.entries.write().unwrap();
            let mut appender = self.appender.lock().unwrap();
            for (&i, vector) in miss_indices.iter().zip(fresh) {
                let key = (pid.clone(), hashes[i].clone());
                if !entries.contains_key(&key) {
                    if let Some(file) = appender.as_mut() {
                        let rec = EmbeddingCacheRecord {
                            provider_id: pid.clone(),
                            sha256: hashes[i].clone(),
                            dim: vector.dim,
                            values: vector.values.clone(),
                        };
                        let line = serde_json::to_string(&rec)?;
                        file.write_all(line.as_bytes())
                            .and_then(|_| file.write_all(b"\n"))
                            .and_then(|_| file.flush())
                            .map_err(|e| {
                                Error::io(
                                    self.path
                                        .as_ref()
                                        .map(|p| p.display().to_string())
                                        .unwrap_or_default(),
                                    e,
                                )
                            })?;
                    }
                    entries.insert(key, vector.clone());
                }
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn hash_embedder_is_deterministic_and_normalized() {
        let embedder = HashEmbedder::new(16);
        let texts = vec!["aspirin reduced pain".to_string()];
        let a = embedder.embed_batch(&texts).unwrap();
        let b = embedder.embed_batch(&texts).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a[0].values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN], "p").is_err());
        assert!(EmbeddingVector::new(vec![], "p").is_err());
    }

    struct CountingProvider {
        inner: HashEmbedder,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for CountingProvider {
        fn provider_id(&self) -> &str {
            self.inner.provider_id()
        }
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
            self.calls.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    #[test]
    fn cache_avoids_repeat_provider_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.jsonl");
        let provider = CountingProvider {
            inner: HashEmbedder::new(8),
            calls: AtomicUsize::new(0),
        };
        let texts: Vec<String> = vec!["one two".into(), "three".into()];
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.get_or_embed(&provider, &texts).unwrap();
            cache.get_or_embed(&provider, &texts).unwrap();
        }
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);
        // Reopened cache serves from disk.
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        cache.get_or_embed(&provider, &texts).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);
    }
}
