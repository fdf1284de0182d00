//! Content-addressed response cache.
//!
//! Layout: `<cache_dir>/<backend id>/<digest>.json`, one file per request
//! digest. Writes go through a temp file and a rename, so concurrent writers
//! of the same digest leave one complete entry behind.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Hex SHA-256 of the request's canonical JSON (object keys sorted).
pub fn cache_key(request: &ChatRequest) -> String {
    let canonical = serde_json::to_value(request)
        .expect("request serializes")
        .to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    request: ChatRequest,
    response: ChatResponse,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn namespace(backend_id: &str) -> String {
    backend_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| BackendError::CacheIo(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, backend_id: &str, key: &str) -> PathBuf {
        self.dir.join(namespace(backend_id)).join(format!("{key}.json"))
    }

    pub fn get(&self, backend_id: &str, key: &str) -> Result<Option<ChatResponse>, BackendError> {
        let path = self.entry_path(backend_id, key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::CacheIo(format!("{}: {e}", path.display()))),
        };
        let corrupt = |reason: String| BackendError::CacheCorrupt {
            path: path.display().to_string(),
            reason,
        };
        let entry: Entry = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        if entry.key != key {
            return Err(corrupt(format!("entry key {} does not match file name", entry.key)));
        }
        Ok(Some(entry.response))
    }

    pub fn put(&self, backend_id: &str, request: &ChatRequest, response: &ChatResponse) -> Result<(), BackendError> {
        let key = cache_key(request);
        let path = self.entry_path(backend_id, &key);
        let io = |e: std::io::Error| BackendError::CacheIo(format!("{}: {e}", path.display()));
        let parent = path.parent().expect("entry has a parent");
        std::fs::create_dir_all(parent).map_err(io)?;
        let entry = Entry {
            key,
            request: request.clone(),
            response: response.clone(),
        };
        let tmp = parent.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry).expect("entry serializes")).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }
}

/// Returns the stored response on a hit; otherwise calls the backend and
/// stores the reply. Backend errors are never cached.
pub fn cached_chat(
    cache: &ResponseCache,
    backend: &dyn ChatBackend,
    request: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    let key = cache_key(request);
    if let Some(hit) = cache.get(backend.id(), &key)? {
        return Ok(hit);
    }
    let response = backend.chat(request)?;
    cache.put(backend.id(), request, &response)?;
    Ok(response)
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
}

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// A chat backend wrapped with a [`ResponseCache`]. Reports the inner id.
pub struct CachedChat {
    inner: Arc<dyn ChatBackend>,
    cache: ResponseCache,
    stats: Arc<CacheStats>,
}

impl CachedChat {
    pub fn new(inner: Arc<dyn ChatBackend>, cache: ResponseCache) -> Self {
        Self {
            inner,
            cache,
            stats: Arc::new(CacheStats::default()),
        }
    }

    pub fn stats(&self) -> Arc<CacheStats> {
        self.stats.clone()
    }
}

impl ChatBackend for CachedChat {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = cache_key(request);
        if let Some(hit) = self.cache.get(self.inner.id(), &key)? {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);
        let response = self.inner.chat(request)?;
        self.cache.put(self.inner.id(), request, &response)?;
        Ok(response)
    }
}
