//! Append-only JSONL response cache. Interrupted runs resume without
//! re-spending: a partially written trailing line is ignored on load.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    /// sha256 over (model, messages, temperature, max_tokens).
    pub key: String,
    pub response_text: String,
    /// Unix seconds.
    pub created_at: u64,
    /// (prompt, completion) token counts as reported by the backend.
    pub cost_tokens: (u64, u64),
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub struct ResponseCache {
    entries: RwLock<HashMap<String, CacheEntry>>,
    appender: Mutex<Option<std::fs::File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    /// In-memory cache without persistence.
    pub fn ephemeral() -> Self {
        ResponseCache {
            entries: RwLock::new(HashMap::new()),
            appender: Mutex::new(None),
            path: None,
        }
    }

    /// Opens (or creates) a JSONL-backed cache at `path`.
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
            for line in body.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from an interrupted append is skipped.
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(line) {
                    entries.insert(entry.key.clone(), entry);
                }
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(ResponseCache {
            entries: RwLock::new(entries),
            appender: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    /// Inserts and persists an entry; an existing key is left untouched so
    /// one cache file never maps a key to two responses.
    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        {
            let mut entries = self.entries.write().unwrap();
            if entries.contains_key(&entry.key) {
                return Ok(());
            }
            entries.insert(entry.key.clone(), entry.clone());
        }
        let mut appender = self.appender.lock().unwrap();
        if let Some(file) = appender.as_mut() {
            let line = serde_json::to_string(&entry)?;
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
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        let entries = self.entries.read().unwrap();
        CacheStats {
            entries: entries.len(),
            prompt_tokens: entries.values().map(|e| e.cost_tokens.0).sum(),
            completion_tokens: entries.values().map(|e| e.cost_tokens.1).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, text: &str) -> CacheEntry {
        CacheEntry {
            key: key.into(),
            response_text: text.into(),
            created_at: 1,
            cost_tokens: (10, 5),
        }
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        cache.put(entry("k1", "hello")).unwrap();
        cache.put(entry("k2", "world")).unwrap();
        drop(cache);
        let reloaded = ResponseCache::open(&path).unwrap();
        assert_eq!(reloaded.get("k1").unwrap().response_text, "hello");
        assert_eq!(reloaded.stats().entries, 2);
        assert_eq!(reloaded.stats().prompt_tokens, 20);
    }

    #[test]
    fn torn_trailing_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        cache.put(entry("k1", "hello")).unwrap();
        drop(cache);
        let mut body = std::fs::read_to_string(&path).unwrap();
        body.push_str("{\"key\": \"k2\", \"resp");
        std::fs::write(&path, body).unwrap();
        let reloaded = ResponseCache::open(&path).unwrap();
        assert_eq!(reloaded.stats().entries, 1);
    }

    #[test]
    fn duplicate_key_keeps_first_response() {
        let cache = ResponseCache::ephemeral();
        cache.put(entry("k", "first")).unwrap();
        cache.put(entry("k", "second")).unwrap();
        assert_eq!(cache.get("k").unwrap().response_text, "first");
    }
}
