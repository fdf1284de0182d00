//! Multi-agent medical diagnosis orchestration engine.
//!
//! A case flows through triage, specialist referral, optional retrieval,
//! rounds of deliberation closed by a unanimous vote, and a final diagnosis.
//! Every backend call is recorded in a per-case [`transcript::Transcript`],
//! which doubles as a response oracle for byte-exact replay.

pub mod agents;
pub mod backends;
pub mod case;
pub mod config;
pub mod evaluation;
pub mod model;
pub mod parsing;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod transcript;

pub use case::{validate_case, AnswerOption, CaseViolation, MedicalCase, Modality};
pub use config::{AblationMode, PipelineConfig};
pub use prompts::{PromptRegistry, TemplateId};
pub use transcript::{Outcome, Stage, Transcript};
