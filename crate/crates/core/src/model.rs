//! Values produced and consumed by the agents.

use serde::{Deserialize, Serialize};

use crate::backends::SearchResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseClassification {
    pub modality_kind: String,
    pub body_part: Option<String>,
    pub disease_type: String,
}

/// A generated specialist identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub name: String,
    pub responsibilities: Vec<String>,
}

impl RoleSpec {
    pub fn new(name: impl Into<String>, responsibilities: Vec<String>) -> Self {
        Self {
            name: name.into(),
            responsibilities,
        }
    }

    /// Responsibilities joined for the `{role_responsibilities}` slot.
    pub fn responsibilities_text(&self) -> String {
        if self.responsibilities.is_empty() {
            "provide a diagnostic opinion within your specialty".to_string()
        } else {
            self.responsibilities.join("; ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub answer: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticOpinion {
    pub role: String,
    pub assessment: String,
    pub candidates: Vec<Candidate>,
    pub conclusion: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub voter: String,
    pub value: bool,
    pub raw: String,
}

/// Decomposed sub-questions. Must be anonymized before leaving the process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubProblems {
    pub items: Vec<String>,
    pub anonymized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    /// Index of the sub-question whose search produced this document.
    pub source_item: usize,
    pub result: SearchResult,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedDocs {
    pub docs: Vec<RetrievedDoc>,
    pub failed_items: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub source_count: usize,
}

impl Summary {
    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub possible_answers: Vec<String>,
    pub agreements: String,
    pub disagreements: String,
    pub conclusions: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalDiagnosis {
    pub answer_label: Option<String>,
    pub answer_text: String,
    pub reviewed: bool,
}

impl FinalDiagnosis {
    /// Label when present, else the free-text answer.
    pub fn predicted(&self) -> &str {
        self.answer_label.as_deref().unwrap_or(&self.answer_text)
    }
}
