//! Diagnostic case representation and validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Input modality carried by a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[serde(alias = "Text")]
    Text,
    #[serde(alias = "Image")]
    Image,
    #[serde(alias = "Audio")]
    Audio,
    #[serde(alias = "Video")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Image, Modality::Audio, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn has_media(self) -> bool {
        self != Modality::Text
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One labeled answer choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

impl AnswerOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
        }
    }
}

/// A single diagnostic instance.
///
/// Media is referenced by path and never embedded. `gold_answer` is an
/// option label for multiple-choice cases and free text otherwise; it may be
/// absent for inference-only runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedicalCase {
    pub id: String,
    pub modality: Modality,
    pub question: String,
    #[serde(default)]
    pub options: Vec<AnswerOption>,
    #[serde(default)]
    pub media_path: Option<String>,
    #[serde(default)]
    pub gold_answer: Option<String>,
}

impl MedicalCase {
    pub fn text(id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality: Modality::Text,
            question: question.into(),
            options: Vec::new(),
            media_path: None,
            gold_answer: None,
        }
    }

    pub fn with_options<L, T>(mut self, options: impl IntoIterator<Item = (L, T)>) -> Self
    where
        L: Into<String>,
        T: Into<String>,
    {
        self.options = options
            .into_iter()
            .map(|(l, t)| AnswerOption::new(l, t))
            .collect();
        self
    }

    pub fn with_media(mut self, modality: Modality, path: impl Into<String>) -> Self {
        self.modality = modality;
        self.media_path = Some(path.into());
        self
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    pub fn option_labels(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.label.as_str()).collect()
    }

    pub fn option(&self, label: &str) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.label == label)
    }

    /// Question text followed by one `LABEL. text` line per option.
    pub fn formatted_question(&self) -> String {
        if self.options.is_empty() {
            return self.question.clone();
        }
        let mut out = self.question.clone();
        out.push_str("\nOptions:");
        for opt in &self.options {
            out.push_str(&format!("\n{}. {}", opt.label, opt.text));
        }
        out
    }

    /// The gold answer as text: the option text for labeled cases, the raw
    /// gold otherwise.
    pub fn gold_text(&self) -> Option<&str> {
        let gold = self.gold_answer.as_deref()?;
        match self.option(gold) {
            Some(opt) => Some(opt.text.as_str()),
            None => Some(gold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CaseViolation {
    #[error("case id is empty")]
    EmptyId,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("{modality} case has no media_path")]
    MissingMedia { modality: Modality },
    #[error("gold answer `{gold}` is not one of the option labels")]
    GoldNotInOptions { gold: String },
}

/// Returns the case unchanged iff every case invariant holds, otherwise every
/// violated invariant.
pub fn validate_case(case: MedicalCase) -> Result<MedicalCase, Vec<CaseViolation>> {
    let mut violations = Vec::new();
    if case.id.trim().is_empty() {
        violations.push(CaseViolation::EmptyId);
    }
    if case.question.trim().is_empty() {
        violations.push(CaseViolation::EmptyQuestion);
    }
    if case.modality.has_media() && case.media_path.as_deref().is_none_or(|p| p.trim().is_empty()) {
        violations.push(CaseViolation::MissingMedia {
            modality: case.modality,
        });
    }
    if let Some(gold) = &case.gold_answer {
        if !case.options.is_empty() && case.option(gold).is_none() {
            violations.push(CaseViolation::GoldNotInOptions { gold: gold.clone() });
        }
    }
    if violations.is_empty() {
        Ok(case)
    } else {
        Err(violations)
    }
}
