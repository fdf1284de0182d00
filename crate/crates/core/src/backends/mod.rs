//! Chat-model and web-search access.
//!
//! Every agent call goes through [`ChatBackend`] or [`SearchBackend`]. The
//! scripted and fixture implementations are pure functions of their inputs
//! and back the offline test suite; the HTTP implementations speak the
//! chat-completions and search-API wire formats for live runs.

mod cache;
mod fixture;
mod http;
mod replay;
mod scripted;
mod spec;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::Modality;

pub use cache::{cache_key, cached_chat, CacheStats, CachedChat, ResponseCache};
pub use fixture::FixtureSearch;
pub use http::{HttpChat, HttpSearch, RetryPolicy};
pub use replay::{ReplayChat, ReplaySearch};
pub use scripted::{MatchKind, Matcher, Pattern, ScriptRule, ScriptedChat};
pub use spec::{chat_from_spec, search_from_spec, BackendSpecs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub content: String,
}

/// Reference to a media payload; backends read the bytes themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub modality: Modality,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: Option<String>,
    pub turns: Vec<Turn>,
    pub media: Option<MediaRef>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn user(prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: None,
            turns: vec![Turn {
                role: TurnRole::User,
                content: prompt.into(),
            }],
            media: None,
            temperature: 0.0,
            max_tokens: None,
            seed: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system_prompt = Some(system.into());
        self
    }

    pub fn with_media(mut self, media: Option<MediaRef>) -> Self {
        self.media = media;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn last_user_turn(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == TurnRole::User)
            .map(|t| t.content.as_str())
    }

    /// System prompt and turn contents joined by newlines.
    pub fn full_text(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.turns.len() + 1);
        if let Some(sys) = &self.system_prompt {
            parts.push(sys);
        }
        parts.extend(self.turns.iter().map(|t| t.content.as_str()));
        parts.join("\n")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.last_user_turn().is_none() {
            return Err(BackendError::InvalidRequest("no user turn".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub query: String,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub snippet: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("no script rule matched request: {excerpt:?}")]
    NoScriptMatch { excerpt: String },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("bad HTTP status {0}")]
    BadStatus(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("search quota exceeded")]
    QuotaExceeded,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend `{0}` does not accept media attachments")]
    MediaUnsupported(String),
    #[error("cannot read media `{0}`")]
    MediaUnreadable(String),
    #[error("corrupt cache entry {path}: {reason}")]
    CacheCorrupt { path: String, reason: String },
    #[error("cache I/O error: {0}")]
    CacheIo(String),
    #[error("replay oracle exhausted")]
    ReplayExhausted,
    #[error("unknown {0}")]
    UnknownSpec(String),
    /// An error recovered from a transcript; displays the original message.
    #[error("{0}")]
    Recorded(String),
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait SearchBackend: Send + Sync {
    fn id(&self) -> &str;
    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError>;
}

/// Validates the request, then dispatches.
pub fn chat(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let resp = backend.chat(request)?;
    if resp.text.trim().is_empty() {
        return Err(BackendError::MalformedResponse("empty response text".into()));
    }
    Ok(resp)
}

/// Validates the query, dispatches, and enforces the `top_k` bound.
pub fn search(backend: &dyn SearchBackend, query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError> {
    if query.query.trim().is_empty() {
        return Err(BackendError::InvalidRequest("empty search query".into()));
    }
    if query.top_k == 0 {
        return Err(BackendError::InvalidRequest("top_k must be positive".into()));
    }
    let mut results = backend.search(query)?;
    results.truncate(query.top_k);
    Ok(results)
}

/// Search backend that never returns anything. Used when retrieval is off.
#[derive(Debug, Clone, Default)]
pub struct NullSearch;

impl SearchBackend for NullSearch {
    fn id(&self) -> &str {
        "null-search"
    }

    fn search(&self, _query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError> {
        Ok(Vec::new())
    }
}

/// The backend handles a case runs against.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    /// Serves every call that carries media.
    pub multimodal: Arc<dyn ChatBackend>,
    pub search: Arc<dyn SearchBackend>,
    /// Base directory for relative media paths.
    pub media_root: PathBuf,
}

impl Backends {
    pub fn new(chat: Arc<dyn ChatBackend>, search: Arc<dyn SearchBackend>) -> Self {
        Self {
            multimodal: chat.clone(),
            chat,
            search,
            media_root: PathBuf::from("."),
        }
    }

    pub fn with_multimodal(mut self, multimodal: Arc<dyn ChatBackend>) -> Self {
        self.multimodal = multimodal;
        self
    }

    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = root.into();
        self
    }

    pub fn resolve_media(&self, path: &str) -> PathBuf {
        let p = PathBuf::from(path);
        if p.is_absolute() {
            p
        } else {
            self.media_root.join(p)
        }
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("chat", &self.chat.id())
            .field("multimodal", &self.multimodal.id())
            .field("search", &self.search.id())
            .field("media_root", &self.media_root)
            .finish()
    }
}
