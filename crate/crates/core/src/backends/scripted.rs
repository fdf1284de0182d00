use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    /// Last user turn equals the pattern.
    Exact,
    /// Pattern occurs anywhere in the request text.
    Substring,
    /// Every fragment occurs in the request text, in order.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pattern {
    One(String),
    Many(Vec<String>),
}

impl Pattern {
    fn fragments(&self) -> Vec<&str> {
        match self {
            Pattern::One(s) => vec![s.as_str()],
            Pattern::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    pub kind: MatchKind,
    pub pattern: Pattern,
    /// When set, the rule only fires for requests carrying this seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub reply: String,
}

impl ScriptRule {
    pub fn exact(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self::build(MatchKind::Exact, Pattern::One(pattern.into()), reply)
    }

    pub fn substring(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self::build(MatchKind::Substring, Pattern::One(pattern.into()), reply)
    }

    pub fn sequence<S: Into<String>>(fragments: impl IntoIterator<Item = S>, reply: impl Into<String>) -> Self {
        Self::build(
            MatchKind::Sequence,
            Pattern::Many(fragments.into_iter().map(Into::into).collect()),
            reply,
        )
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.matcher.seed = Some(seed);
        self
    }

    fn build(kind: MatchKind, pattern: Pattern, reply: impl Into<String>) -> Self {
        Self {
            matcher: Matcher {
                kind,
                pattern,
                seed: None,
            },
            reply: reply.into(),
        }
    }

    fn fires(&self, request: &ChatRequest, text: &str) -> bool {
        if let Some(seed) = self.matcher.seed {
            if request.seed != Some(seed) {
                return false;
            }
        }
        match self.matcher.kind {
            MatchKind::Exact => match &self.matcher.pattern {
                Pattern::One(p) => request.last_user_turn() == Some(p.as_str()),
                Pattern::Many(_) => false,
            },
            MatchKind::Substring => self
                .matcher
                .pattern
                .fragments()
                .iter()
                .all(|f| text.contains(f)),
            MatchKind::Sequence => {
                let mut rest = text;
                for frag in self.matcher.pattern.fragments() {
                    match rest.find(frag) {
                        Some(i) => rest = &rest[i + frag.len()..],
                        None => return false,
                    }
                }
                true
            }
        }
    }
}

/// Deterministic chat backend driven by an ordered rule list. The first rule
/// that fires supplies the reply; an unmatched request is an error.
#[derive(Debug, Clone)]
pub struct ScriptedChat {
    id: String,
    rules: Vec<ScriptRule>,
}

impl ScriptedChat {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Self {
        Self { id: id.into(), rules }
    }

    pub fn from_json(id: impl Into<String>, json: &str) -> Result<Self, BackendError> {
        let rules: Vec<ScriptRule> = serde_json::from_str(json)
            .map_err(|e| BackendError::InvalidRequest(format!("bad chat script: {e}")))?;
        Ok(Self::new(id, rules))
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("script");
        Self::from_json(format!("scripted:{stem}"), &text)
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }
}

impl ChatBackend for ScriptedChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = request.full_text();
        match self.rules.iter().find(|r| r.fires(request, &text)) {
            Some(rule) => Ok(ChatResponse {
                text: rule.reply.clone(),
                backend_id: self.id.clone(),
                token_usage: None,
            }),
            None => Err(BackendError::NoScriptMatch {
                excerpt: request
                    .last_user_turn()
                    .unwrap_or_default()
                    .chars()
                    .take(160)
                    .collect(),
            }),
        }
    }
}
