use std::collections::VecDeque;
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, SearchBackend, SearchQuery, SearchResult};
use crate::transcript::{EventPayload, Transcript};

type Recorded<T> = Result<T, BackendError>;

/// Chat backend that answers with a transcript's recorded responses, in
/// recorded order. Requests are not checked here; divergence shows up when
/// the regenerated transcript is compared with the recorded one.
#[derive(Debug)]
pub struct ReplayChat {
    queue: Mutex<VecDeque<Recorded<ChatResponse>>>,
}

/// Search counterpart of [`ReplayChat`].
#[derive(Debug)]
pub struct ReplaySearch {
    queue: Mutex<VecDeque<Recorded<Vec<SearchResult>>>>,
}

impl ReplayChat {
    pub fn from_transcript(transcript: &Transcript) -> Self {
        let mut queue = VecDeque::new();
        let mut pending = false;
        for ev in &transcript.events {
            match &ev.payload {
                EventPayload::ChatPrompt { .. } => pending = true,
                EventPayload::ChatResponse {
                    backend_id,
                    text,
                    token_usage,
                } if pending => {
                    pending = false;
                    queue.push_back(Ok(ChatResponse {
                        text: text.clone(),
                        backend_id: backend_id.clone(),
                        token_usage: *token_usage,
                    }));
                }
                EventPayload::BackendError { message } if pending => {
                    pending = false;
                    queue.push_back(Err(BackendError::Recorded(message.clone())));
                }
                _ => {}
            }
        }
        Self {
            queue: Mutex::new(queue),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("replay queue").len()
    }
}

impl ChatBackend for ReplayChat {
    fn id(&self) -> &str {
        "replay"
    }

    fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.queue
            .lock()
            .expect("replay queue")
            .pop_front()
            .unwrap_or(Err(BackendError::ReplayExhausted))
    }
}

impl ReplaySearch {
    pub fn from_transcript(transcript: &Transcript) -> Self {
        let mut queue = VecDeque::new();
        let mut pending = false;
        for ev in &transcript.events {
            match &ev.payload {
                EventPayload::SearchQuery { .. } => pending = true,
                EventPayload::SearchResults { results } if pending => {
                    pending = false;
                    queue.push_back(Ok(results.clone()));
                }
                EventPayload::BackendError { message } if pending => {
                    pending = false;
                    queue.push_back(Err(BackendError::Recorded(message.clone())));
                }
                _ => {}
            }
        }
        Self {
            queue: Mutex::new(queue),
        }
    }
}

impl SearchBackend for ReplaySearch {
    fn id(&self) -> &str {
        "replay"
    }

    fn search(&self, _query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError> {
        self.queue
            .lock()
            .expect("replay queue")
            .pop_front()
            .unwrap_or(Err(BackendError::ReplayExhausted))
    }
}
