use std::collections::BTreeMap;
use std::path::Path;

use super::{BackendError, SearchBackend, SearchQuery, SearchResult};

/// Search backend answering from a local `query -> results` mapping.
/// Unknown queries return no results.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    id: String,
    entries: BTreeMap<String, Vec<SearchResult>>,
}

impl FixtureSearch {
    pub fn new(id: impl Into<String>, entries: BTreeMap<String, Vec<SearchResult>>) -> Self {
        Self {
            id: id.into(),
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.trim().to_string(), v))
                .collect(),
        }
    }

    pub fn from_json(id: impl Into<String>, json: &str) -> Result<Self, BackendError> {
        let entries = serde_json::from_str(json)
            .map_err(|e| BackendError::InvalidRequest(format!("bad search fixture: {e}")))?;
        Ok(Self::new(id, entries))
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("fixture");
        Self::from_json(format!("fixture:{stem}"), &text)
    }
}

impl SearchBackend for FixtureSearch {
    fn id(&self) -> &str {
        &self.id
    }

    fn search(&self, query: &SearchQuery) -> Result<Vec<SearchResult>, BackendError> {
        Ok(self
            .entries
            .get(query.query.trim())
            .map(|docs| docs.iter().take(query.top_k).cloned().collect())
            .unwrap_or_default())
    }
}
