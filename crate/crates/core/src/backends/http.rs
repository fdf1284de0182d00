use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, MediaRef, SearchBackend, SearchQuery, SearchResult, TokenUsage};
use crate::case::Modality;

pub const CHAT_API_KEY: &str = "CHAT_API_KEY";
pub const CHAT_API_BASE: &str = "CHAT_API_BASE";
pub const SEARCH_API_KEY: &str = "SEARCH_API_KEY";
pub const SEARCH_API_BASE: &str = "SEARCH_API_BASE";
/// Programmable Search Engine id, sent as `cx` when set.
pub const SEARCH_ENGINE_ID: &str = "SEARCH_ENGINE_ID";

const DEFAULT_CHAT_BASE: &str = "https://api.openai.com/v1";
const DEFAULT_SEARCH_BASE: &str = "https://www.googleapis.com/customsearch/v1";

/// Retries transport failures and HTTP 429 with exponential backoff.
/// Other 4xx/5xx statuses are returned immediately.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

enum Attempt<T> {
    Done(T),
    Retry(BackendError),
    Fail(BackendError),
}

impl RetryPolicy {
    fn run<T>(&self, mut f: impl FnMut() -> Attempt<T>) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut last = BackendError::TransportError("no attempt made".into());
        for i in 0..attempts {
            match f() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
            if i + 1 < attempts {
                thread::sleep(self.base_delay * 2u32.pow(i));
            }
        }
        Err(last)
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn classify_status<T>(status: u16, ok: impl FnOnce() -> Result<T, BackendError>) -> Attempt<T> {
    match status {
        200..=299 => match ok() {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fail(e),
        },
        429 => Attempt::Retry(BackendError::BadStatus(429)),
        code => Attempt::Fail(BackendError::BadStatus(code)),
    }
}

fn mime_for(path: &Path, modality: Modality) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match (modality, ext.as_str()) {
        (_, "png") => "image/png",
        (_, "jpg" | "jpeg") => "image/jpeg",
        (_, "gif") => "image/gif",
        (_, "webp") => "image/webp",
        (_, "wav") => "audio/wav",
        (_, "mp3") => "audio/mpeg",
        (_, "flac") => "audio/flac",
        (_, "mp4") => "video/mp4",
        (_, "webm") => "video/webm",
        (_, "mov") => "video/quicktime",
        (Modality::Audio, _) => "audio/wav",
        (Modality::Video, _) => "video/mp4",
        _ => "application/octet-stream",
    }
}

/// Client for chat-completions style endpoints:
/// `POST {base}/chat/completions` with `{model, messages, temperature, max_tokens}`,
/// reply read from `choices[0].message.content`.
pub struct HttpChat {
    id: String,
    base_url: String,
    api_key: Option<String>,
    model: String,
    multimodal: bool,
    media_root: PathBuf,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpChat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChat")
            .field("id", &self.id)
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("multimodal", &self.multimodal)
            .finish_non_exhaustive()
    }
}

impl HttpChat {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let model = model.into();
        Self {
            id: format!("http:{model}"),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model,
            multimodal: false,
            media_root: PathBuf::from("."),
            retry: RetryPolicy::default(),
            agent: agent(Duration::from_secs(300)),
        }
    }

    /// Reads `CHAT_API_BASE` and `CHAT_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Self {
        let base = std::env::var(CHAT_API_BASE).unwrap_or_else(|_| DEFAULT_CHAT_BASE.to_string());
        let key = std::env::var(CHAT_API_KEY).ok().filter(|k| !k.is_empty());
        Self::new(base, key, model)
    }

    /// Attach media as base64 content parts.
    pub fn multimodal(mut self, enabled: bool) -> Self {
        self.multimodal = enabled;
        if enabled {
            self.id = format!("http:{}+media", self.model);
        }
        self
    }

    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = root.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn media_part(&self, media: &MediaRef) -> Result<Value, BackendError> {
        let path = {
            let p = PathBuf::from(&media.path);
            if p.is_absolute() {
                p
            } else {
                self.media_root.join(p)
            }
        };
        let bytes = std::fs::read(&path).map_err(|_| BackendError::MediaUnreadable(media.path.clone()))?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        let mime = mime_for(&path, media.modality);
        Ok(match media.modality {
            Modality::Audio => json!({
                "type": "input_audio",
                "input_audio": { "data": b64, "format": mime.trim_start_matches("audio/") }
            }),
            Modality::Video => json!({
                "type": "video_url",
                "video_url": { "url": format!("data:{mime};base64,{b64}") }
            }),
            _ => json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{mime};base64,{b64}") }
            }),
        })
    }

    /// Builds the JSON request body.
    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::new();
        if let Some(sys) = &request.system_prompt {
            messages.push(json!({ "role": "system", "content": sys }));
        }
        let last_user = request
            .turns
            .iter()
            .rposition(|t| t.role == super::TurnRole::User);
        for (i, turn) in request.turns.iter().enumerate() {
            let role = match turn.role {
                super::TurnRole::User => "user",
                super::TurnRole::Assistant => "assistant",
            };
            let content = match (&request.media, Some(i) == last_user) {
                (Some(media), true) => {
                    if !self.multimodal {
                        return Err(BackendError::MediaUnsupported(self.id.clone()));
                    }
                    json!([{ "type": "text", "text": turn.content }, self.media_part(media)?])
                }
                _ => json!(turn.content),
            };
            messages.push(json!({ "role": role, "content": content }));
        }
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn parse_reply(&self, value: &Value) -> Result<ChatResponse, BackendError> {
        let content = &value["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
            _ => return Err(BackendError::MalformedResponse("missing choices[0].message.content".into())),
        };
        if text.trim().is_empty() {
            return Err(BackendError::MalformedResponse("empty message content".into()));
        }
        let usage = &value["usage"];
        let token_usage = match (usage["prompt_tokens"].as_u64(), usage["completion_tokens"].as_u64()) {
            (Some(p), Some(c)) => Some(TokenUsage {
                prompt_tokens: p,
                completion_tokens: c,
            }),
            _ => None,
        };
        Ok(ChatResponse {
            text,
            backend_id: self.id.clone(),
            token_usage,
        })
    }
}

impl ChatBackend for HttpChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = self.request_body(request)?;
        let url = format!("{}/chat/completions", self.base_url);
        self.retry.run(|| {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let payload = serde_json::to_string(&body).expect("request body serializes");
            match req.header("Content-Type", "application/json").send(payload.as_bytes()) {
                Err(e) => Attempt::Retry(BackendError::TransportError(e.to_string())),
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    classify_status(status, || {
                        let value = read_json_body(&mut resp)?;
                        self.parse_reply(&value)
                    })
                }
            }
        })
    }
}

fn read_json_body(resp: &mut ureq::http::Response<ureq::Body>) -> Result<Value, BackendError> {
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

/// Client for a Custom-Search-style JSON API:
/// `GET {base}?key=..&q=..&num=..`, results read from `items[].{title, snippet, link}`.
pub struct HttpSearch {
    base_url: String,
    api_key: Option<String>,
    engine_id: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpSearch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpSearch")
            .field("base_url", &self.base_url)
            .finish_non_exhaustive()
    }
}

impl HttpSearch {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, engine_id: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            engine_id,
            retry: RetryPolicy::default(),
            agent: agent(Duration::from_secs(60)),
        }
    }

    /// Reads `SEARCH_API_BASE`, `SEARCH_API_KEY` and `SEARCH_ENGINE_ID`.
    pub fn from_env() -> Self {
        let base = std::env::var(SEARCH_API_BASE).unwrap_or_else(|_| DEFAULT_SEARCH_BASE.to_string());
        let key = std::env::var(SEARCH_API_KEY).ok().filter(|k| !k.is_empty());
        let cx = std::env::var(SEARCH_ENGINE_ID).ok().filter(|k| !k.is_empty());
        Self::new(base, key, cx)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

fn parse_search_items(value: &Value) -> Result<Vec<SearchResult>, BackendError> {
    let Some(items) = value.get("items") else {
        return Ok(Vec::new());
    };
    let items = items
        .as_array()
        .ok_or_else(|| BackendError::MalformedResponse("`items` is not an array".into()))?;
    Ok(items
        .iter()
        .map(|it| SearchResult {
            title: it["title"].as_str().unwrap_or_default().to_string(),
            snippet: it["snippet"].as_str().unwrap_or_default().to_string(),
            url: it["link"]
                .as_str()
                .or_else(|| it["url"].as_str())
                .unwrap_or_default()
                .to_string(),
        })
        .collect())
}

impl SearchBackend for HttpSearch {
    fn id(&self) -> &str {
        "http-search"
    }

    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError> {
        let num = query.top_k.min(10).to_string();
        let result = self.retry.run(|| {
            let mut req = self.agent.get(&self.base_url).query("q", &query.query).query("num", &num);
            if let Some(key) = &self.api_key {
                req = req.query("key", key);
            }
            if let Some(cx) = &self.engine_id {
                req = req.query("cx", cx);
            }
            match req.call() {
                Err(e) => Attempt::Retry(BackendError::TransportError(e.to_string())),
                Ok(mut resp) => classify_status(resp.status().as_u16(), || {
                    let value = read_json_body(&mut resp)?;
                    parse_search_items(&value)
                }),
            }
        });
        match result {
            Err(BackendError::BadStatus(429)) => Err(BackendError::QuotaExceeded),
            Err(BackendError::TransportError(msg)) => Err(BackendError::TransportError(redact(&msg, self.api_key.as_deref()))),
            Ok(mut v) => {
                v.truncate(query.top_k);
                Ok(v)
            }
            other => other,
        }
    }
}

/// Transport error messages can echo the request URL, which carries the key.
fn redact(msg: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => msg.replace(s, "***"),
        _ => msg.to_string(),
    }
}
