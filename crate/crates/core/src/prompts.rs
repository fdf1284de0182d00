//! Prompt template registry.
//!
//! Templates are plain text with `{placeholder}` slots. The built-in set is
//! compiled in from `templates/`; any template can be overridden from a
//! directory of `<id>.txt` files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

macro_rules! template_ids {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum TemplateId { $($variant),+ }

        impl TemplateId {
            pub const ALL: &'static [TemplateId] = &[$(TemplateId::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $(TemplateId::$variant => $name),+ }
            }

            fn builtin_body(self) -> &'static str {
                match self {
                    $(TemplateId::$variant => include_str!(concat!("../templates/", $name, ".txt"))),+
                }
            }
        }

        impl FromStr for TemplateId {
            type Err = PromptError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(TemplateId::$variant),)+
                    other => Err(PromptError::UnknownTemplate(other.to_string())),
                }
            }
        }
    };
}

template_ids! {
    ImageTypeClassification => "image_type_classification",
    AudioTypeClassification => "audio_type_classification",
    VideoTypeClassification => "video_type_classification",
    TextTypeClassification => "text_type_classification",
    RoleGeneration => "role_generation",
    Discuss => "discuss",
    Summarize => "summarize",
    Vote => "vote",
    Review => "review",
    MultimodalDescription => "multimodal_description",
    SearchSummarize => "search_summarize",
    Diagnosis => "diagnosis",
    OverallReview => "overall_review",
    Direct => "direct",
    AssignedRole => "assigned_role",
}

impl TemplateId {
    /// Whether the body is taken verbatim from the published prompt set.
    pub fn is_published(self) -> bool {
        !matches!(self, TemplateId::Direct | TemplateId::AssignedRole)
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("missing binding for `{0}`")]
    MissingBinding(String),
    #[error("unexpected binding `{0}`")]
    ExtraBinding(String),
    #[error("cannot read template {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    /// Slot names in order of first appearance.
    pub placeholders: Vec<String>,
}

/// Slot names in `body`, in order of first appearance, without duplicates.
pub fn placeholders_of(body: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    SLOT.captures_iter(body)
        .map(|c| c[1].to_string())
        .filter(|name| seen.insert(name.clone()))
        .collect()
}

impl PromptTemplate {
    pub fn new(id: TemplateId, body: impl Into<String>) -> Self {
        let body = body.into();
        Self {
            id,
            placeholders: placeholders_of(&body),
            body,
        }
    }

    /// Single-pass substitution; bound values are never re-expanded.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        for name in &self.placeholders {
            if !bindings.iter().any(|(k, _)| k == name) {
                return Err(PromptError::MissingBinding(name.clone()));
            }
        }
        if let Some((extra, _)) = bindings
            .iter()
            .find(|(k, _)| !self.placeholders.iter().any(|p| p == k))
        {
            return Err(PromptError::ExtraBinding(extra.to_string()));
        }
        Ok(SLOT
            .replace_all(&self.body, |c: &regex::Captures<'_>| {
                let name = &c[1];
                bindings
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_default()
            })
            .into_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptRegistry {
    pub fn builtin() -> Self {
        Self {
            templates: TemplateId::ALL
                .iter()
                .map(|&id| (id, PromptTemplate::new(id, id.builtin_body())))
                .collect(),
        }
    }

    /// Built-in set with every `<id>.txt` found in `dir` overriding its
    /// template. Files whose stem is not a template id are rejected.
    pub fn with_overrides_from(dir: &Path) -> Result<Self, PromptError> {
        let io = |reason: String| PromptError::Io {
            path: dir.display().to_string(),
            reason,
        };
        let mut reg = Self::builtin();
        for entry in std::fs::read_dir(dir).map_err(|e| io(e.to_string()))? {
            let path = entry.map_err(|e| io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let id: TemplateId = stem.parse()?;
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            reg = reg.with_override(id, body);
        }
        Ok(reg)
    }

    pub fn with_override(mut self, id: TemplateId, body: impl Into<String>) -> Self {
        self.templates.insert(id, PromptTemplate::new(id, body));
        self
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn list_templates(&self) -> BTreeSet<&'static str> {
        self.templates.keys().map(|id| id.as_str()).collect()
    }

    pub fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.get(id).render(bindings)
    }

    pub fn render_named(&self, name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        self.render(name.parse()?, bindings)
    }

    /// Hex SHA-256 over every `(id, body)` pair in id order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, t) in &self.templates {
            h.update(id.as_str().as_bytes());
            h.update([0u8]);
            h.update(t.body.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fifteen_templates() {
        let reg = PromptRegistry::builtin();
        let ids = reg.list_templates();
        assert_eq!(ids.len(), 15);
        assert!(ids.contains("text_type_classification"));
        assert!(!ids.contains("surgery_plan"));
        assert_eq!(TemplateId::ALL.iter().filter(|t| t.is_published()).count(), 13);
    }

    #[test]
    fn image_classification_has_no_slots() {
        let text = PromptRegistry::builtin()
            .render(TemplateId::ImageTypeClassification, &[])
            .unwrap();
        assert!(text.contains("kind of medical image is this"));
    }

    #[test]
    fn vote_keeps_original_spelling() {
        let text = PromptRegistry::builtin()
            .render(
                TemplateId::Vote,
                &[
                    ("role_name", "Cardiologist"),
                    ("role_responsibilities", "assess the heart"),
                    ("question", "Q"),
                    ("summary", "S"),
                ],
            )
            .unwrap();
        assert!(text.contains("agree with the summery above"));
        assert!(!text.contains('{'));
    }

    #[test]
    fn missing_binding_reports_first_unbound_slot() {
        let err = PromptRegistry::builtin()
            .render(TemplateId::Discuss, &[("role_name", "X")])
            .unwrap_err();
        assert_eq!(err, PromptError::MissingBinding("role_responsibilities".into()));
    }

    #[test]
    fn extra_binding_is_rejected() {
        let err = PromptRegistry::builtin()
            .render(TemplateId::Review, &[("dis", "x"), ("other", "y")])
            .unwrap_err();
        assert_eq!(err, PromptError::ExtraBinding("other".into()));
    }

    #[test]
    fn unknown_name() {
        assert_eq!(
            PromptRegistry::builtin().render_named("surgery_plan", &[]),
            Err(PromptError::UnknownTemplate("surgery_plan".into()))
        );
    }

    #[test]
    fn declared_slots_match_body() {
        let reg = PromptRegistry::builtin();
        let expected: &[(TemplateId, &[&str])] = &[
            (TemplateId::TextTypeClassification, &["question_text"]),
            (TemplateId::RoleGeneration, &["modality_type", "disease_type", "question"]),
            (TemplateId::Discuss, &["role_name", "role_responsibilities", "disease_type", "question"]),
            (TemplateId::Summarize, &["question", "discussion"]),
            (TemplateId::Vote, &["role_name", "role_responsibilities", "question", "summary"]),
            (TemplateId::Review, &["dis"]),
            (TemplateId::MultimodalDescription, &["modality_type"]),
            (TemplateId::SearchSummarize, &["search_result"]),
            (TemplateId::Diagnosis, &["ques", "record"]),
            (TemplateId::OverallReview, &["ques", "record"]),
            (TemplateId::AssignedRole, &["disease_type"]),
            (TemplateId::Direct, &["question"]),
        ];
        for (id, slots) in expected {
            assert_eq!(reg.get(*id).placeholders, *slots, "{id}");
        }
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("assigned_role.txt"), "You are a {disease_type} expert.").unwrap();
        let reg = PromptRegistry::with_overrides_from(dir.path()).unwrap();
        assert_eq!(
            reg.render(TemplateId::AssignedRole, &[("disease_type", "ENT")]).unwrap(),
            "You are a ENT expert."
        );
        assert_ne!(reg.content_hash(), PromptRegistry::builtin().content_hash());
    }

    proptest! {
        #[test]
        fn render_is_injective_per_slot(a in ".{0,30}", b in ".{0,30}", other in ".{0,30}") {
            prop_assume!(a != b);
            let reg = PromptRegistry::builtin();
            let ra = reg.render(TemplateId::Diagnosis, &[("ques", &a), ("record", &other)]).unwrap();
            let rb = reg.render(TemplateId::Diagnosis, &[("ques", &b), ("record", &other)]).unwrap();
            prop_assert_ne!(ra, rb);
        }

        #[test]
        fn bound_values_are_not_reexpanded(v in "\\{[a-z_]{1,8}\\}") {
            let reg = PromptRegistry::builtin();
            let out = reg.render(TemplateId::Review, &[("dis", &v)]).unwrap();
            prop_assert!(out.ends_with(&v));
        }
    }
}
