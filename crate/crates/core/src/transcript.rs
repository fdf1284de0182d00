//! Append-only per-case event log.
//!
//! Each event carries a digest chained over every previous event, so a
//! tampered event is located by the first digest that fails to recompute.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{ChatRequest, SearchQuery, SearchResult, TokenUsage};
use crate::config::PipelineConfig;
use crate::model::{CaseClassification, FinalDiagnosis, RoleSpec};

/// Pipeline stage tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Classify,
    Refer,
    Describe,
    Decompose,
    Retrieve,
    Summarize,
    Opine,
    Radiology,
    Synthesize,
    Review,
    Vote,
    Tally,
    Answer,
    OverallReview,
    Generate,
    Select,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classify => "classify",
            Stage::Refer => "refer",
            Stage::Describe => "describe",
            Stage::Decompose => "decompose",
            Stage::Retrieve => "retrieve",
            Stage::Summarize => "summarize",
            Stage::Opine => "opine",
            Stage::Radiology => "radiology",
            Stage::Synthesize => "synthesize",
            Stage::Review => "review",
            Stage::Vote => "vote",
            Stage::Tally => "tally",
            Stage::Answer => "answer",
            Stage::OverallReview => "overall_review",
            Stage::Generate => "generate",
            Stage::Select => "select",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which configured chat backend served a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Text,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    ChatPrompt {
        channel: Channel,
        request: ChatRequest,
    },
    ChatResponse {
        backend_id: String,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_usage: Option<TokenUsage>,
    },
    SearchQuery {
        query: SearchQuery,
    },
    SearchResults {
        results: Vec<SearchResult>,
    },
    /// Response slot of a backend call that failed.
    BackendError {
        message: String,
    },
    Parsed {
        value: serde_json::Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub stage: Stage,
    pub actor: String,
    pub payload: EventPayload,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed {
        final_diagnosis: FinalDiagnosis,
        /// Deliberation rounds run; the single-shot modes count as one round.
        rounds_used: usize,
        consensus_reached: bool,
        classification: Option<CaseClassification>,
        team: Vec<RoleSpec>,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("transcript for case `{0}` is finalized")]
    TranscriptFinalized(String),
    #[error("event digest mismatch at seq {seq}")]
    DigestMismatch { seq: u64 },
    #[error("event sequence gap: expected seq {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("malformed transcript: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub case_id: String,
    pub config: PipelineConfig,
    pub events: Vec<TranscriptEvent>,
    pub outcome: Option<Outcome>,
}

fn event_digest(prev: &str, seq: u64, stage: Stage, actor: &str, payload: &EventPayload) -> String {
    // serde_json::Value maps are key-sorted, which makes this canonical
    let canonical = serde_json::to_value(payload)
        .map(|v| v.to_string())
        .unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(prev.as_bytes());
    hasher.update(b"\n");
    hasher.update(seq.to_string().as_bytes());
    hasher.update(b"\n");
    hasher.update(stage.as_str().as_bytes());
    hasher.update(b"\n");
    hasher.update(actor.as_bytes());
    hasher.update(b"\n");
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

impl Transcript {
    pub fn new(case_id: impl Into<String>, config: PipelineConfig) -> Self {
        Self {
            case_id: case_id.into(),
            config,
            events: Vec::new(),
            outcome: None,
        }
    }

    pub fn is_finalized(&self) -> bool {
        self.outcome.is_some()
    }

    /// Appends an event with `seq = previous max + 1` and returns that seq.
    pub fn append_event(
        &mut self,
        stage: Stage,
        actor: impl Into<String>,
        payload: EventPayload,
    ) -> Result<u64, TranscriptError> {
        if self.is_finalized() {
            return Err(TranscriptError::TranscriptFinalized(self.case_id.clone()));
        }
        let seq = self.events.last().map_or(1, |e| e.seq + 1);
        let prev = self.events.last().map_or("", |e| e.digest.as_str());
        let actor = actor.into();
        let digest = event_digest(prev, seq, stage, &actor, &payload);
        self.events.push(TranscriptEvent {
            seq,
            stage,
            actor,
            payload,
            digest,
        });
        Ok(seq)
    }

    pub fn finalize(&mut self, outcome: Outcome) -> Result<(), TranscriptError> {
        if self.is_finalized() {
            return Err(TranscriptError::TranscriptFinalized(self.case_id.clone()));
        }
        self.outcome = Some(outcome);
        Ok(())
    }

    /// Checks sequence numbering and recomputes every digest.
    pub fn verify(&self) -> Result<(), TranscriptError> {
        let mut prev = "";
        for (i, ev) in self.events.iter().enumerate() {
            let expected = i as u64 + 1;
            if ev.seq != expected {
                return Err(TranscriptError::SequenceGap {
                    expected,
                    found: ev.seq,
                });
            }
            if event_digest(prev, ev.seq, ev.stage, &ev.actor, &ev.payload) != ev.digest {
                return Err(TranscriptError::DigestMismatch { seq: ev.seq });
            }
            prev = &ev.digest;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TranscriptError> {
        serde_json::from_str(text).map_err(|e| TranscriptError::Malformed(e.to_string()))
    }

    pub fn stages(&self) -> BTreeSet<Stage> {
        self.events.iter().map(|e| e.stage).collect()
    }

    pub fn chat_requests(&self) -> impl Iterator<Item = (&TranscriptEvent, &ChatRequest)> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::ChatPrompt { request, .. } => Some((e, request)),
            _ => None,
        })
    }

    pub fn chat_call_count(&self) -> usize {
        self.chat_requests().count()
    }

    pub fn search_queries(&self) -> impl Iterator<Item = &SearchQuery> {
        self.events.iter().filter_map(|e| match &e.payload {
            EventPayload::SearchQuery { query } => Some(query),
            _ => None,
        })
    }

    pub fn search_results(&self) -> impl Iterator<Item = &SearchResult> {
        self.events
            .iter()
            .filter_map(|e| match &e.payload {
                EventPayload::SearchResults { results } => Some(results.iter()),
                _ => None,
            })
            .flatten()
    }

    pub fn has_retrieval(&self) -> bool {
        self.events.iter().any(|e| e.stage == Stage::Retrieve)
    }
}
