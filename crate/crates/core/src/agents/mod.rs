//! The five role behaviors. Each operation renders a prompt, makes its
//! documented backend calls through a [`CaseSession`], and parses the reply.

mod anonymize;

pub use anonymize::{anonymize, anonymize_with_context};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::backends::{self, BackendError, ChatRequest, MediaRef, SearchQuery};
use crate::case::{MedicalCase, Modality};
use crate::config::PipelineConfig;
use crate::model::{
    CaseClassification, DiagnosticOpinion, FinalDiagnosis, RetrievedDoc, RetrievedDocs, RoleSpec, SubProblems,
    Summary, SynthesisReport, Vote,
};
use crate::parsing::{self, ParseError};
use crate::prompts::{PromptError, PromptRegistry, TemplateId};
use crate::transcript::{Channel, EventPayload, Stage, Transcript, TranscriptError};
use crate::backends::Backends;

pub const GP: &str = "General Practitioner";
pub const DIRECTOR: &str = "Director";
pub const ASSISTANT: &str = "Medical Assistant";
pub const RADIOLOGIST: &str = "Radiologist";

const LABEL_REMINDER: &str = "\nAnswer with a single word.";
const LETTER_REMINDER: &str = "\nState the final answer as a single option letter.";
const MAX_SUBPROBLEMS: usize = 3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("classification failed: {0}")]
    ClassificationFailed(String),
    #[error("final answer could not be parsed after a re-prompt")]
    FinalizationFailed,
    #[error("sub-problems must be anonymized before retrieval")]
    NotAnonymized,
    #[error("every retrieval failed: {}", .0.join("; "))]
    AllRetrievalsFailed(Vec<String>),
    #[error("case `{0}` has no media")]
    NoMedia(String),
    #[error("no opinions to synthesize")]
    NoOpinions,
    #[error("team is empty")]
    EmptyTeam,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

/// Per-case working state: the case, its transcript, and the media
/// description cache. Single-writer; one session per case.
pub struct CaseSession<'a> {
    pub case: &'a MedicalCase,
    pub config: &'a PipelineConfig,
    pub prompts: &'a PromptRegistry,
    pub backends: &'a Backends,
    pub transcript: Transcript,
    media_description: Option<String>,
}

impl<'a> CaseSession<'a> {
    pub fn new(
        case: &'a MedicalCase,
        config: &'a PipelineConfig,
        prompts: &'a PromptRegistry,
        backends: &'a Backends,
    ) -> Self {
        Self {
            case,
            config,
            prompts,
            backends,
            transcript: Transcript::new(case.id.clone(), config.clone()),
            media_description: None,
        }
    }

    fn media_ref(&self) -> Option<MediaRef> {
        match (self.case.modality.has_media(), &self.case.media_path) {
            (true, Some(path)) => Some(MediaRef {
                modality: self.case.modality,
                path: path.clone(),
            }),
            _ => None,
        }
    }

    /// Request with the session's sampling settings; media attached when
    /// `with_media` and the case carries any.
    pub fn request(&self, prompt: impl Into<String>, with_media: bool) -> ChatRequest {
        let media = if with_media { self.media_ref() } else { None };
        ChatRequest::user(prompt)
            .with_media(media)
            .with_temperature(self.config.temperature)
            .with_seed(Some(self.config.seed))
    }

    /// One backend call, recorded as a prompt event and a response (or
    /// error) event. Requests with media go to the multimodal backend.
    pub fn call(&mut self, stage: Stage, actor: &str, request: ChatRequest) -> Result<String, AgentError> {
        let (channel, backend) = if request.media.is_some() {
            (Channel::Multimodal, self.backends.multimodal.clone())
        } else {
            (Channel::Text, self.backends.chat.clone())
        };
        let result = backends::chat(backend.as_ref(), &request);
        self.transcript
            .append_event(stage, actor, EventPayload::ChatPrompt { channel, request })?;
        match result {
            Ok(resp) => {
                self.transcript.append_event(
                    stage,
                    actor,
                    EventPayload::ChatResponse {
                        backend_id: resp.backend_id,
                        text: resp.text.clone(),
                        token_usage: resp.token_usage,
                    },
                )?;
                Ok(resp.text)
            }
            Err(e) => {
                self.transcript.append_event(
                    stage,
                    actor,
                    EventPayload::BackendError { message: e.to_string() },
                )?;
                Err(e.into())
            }
        }
    }

    pub fn ask(&mut self, stage: Stage, actor: &str, prompt: String, with_media: bool) -> Result<String, AgentError> {
        let req = self.request(prompt, with_media);
        self.call(stage, actor, req)
    }

    /// Records a parsed value.
    pub fn note(&mut self, stage: Stage, actor: &str, value: impl serde::Serialize) -> Result<(), AgentError> {
        let value = serde_json::to_value(value).expect("parsed values serialize");
        self.transcript
            .append_event(stage, actor, EventPayload::Parsed { value })?;
        Ok(())
    }

    fn render(&self, id: TemplateId, bindings: &[(&str, &str)]) -> Result<String, AgentError> {
        Ok(self.prompts.render(id, bindings)?)
    }

    /// Label from `vocab`, re-asking once with a single-word reminder.
    fn ask_label(&mut self, prompt: String, vocab: &[&str], with_media: bool) -> Result<String, AgentError> {
        let reply = self.ask(Stage::Classify, GP, prompt.clone(), with_media)?;
        if let Ok(label) = parsing::parse_label(&reply, vocab) {
            return Ok(label);
        }
        let reply = self.ask(Stage::Classify, GP, format!("{prompt}{LABEL_REMINDER}"), with_media)?;
        parsing::parse_label(&reply, vocab).map_err(|e| AgentError::ClassificationFailed(e.to_string()))
    }
}

/// GP triage: modality kind, body part for images, and the disease type.
pub fn gp_classify(s: &mut CaseSession<'_>) -> Result<CaseClassification, AgentError> {
    let case = s.case;
    let classification = match case.modality {
        Modality::Text => {
            let q = case.formatted_question();
            let prompt = s.render(TemplateId::TextTypeClassification, &[("question_text", &q)])?;
            let kind = s.ask_label(prompt, parsing::TEXT_TYPES, false)?;
            CaseClassification {
                modality_kind: "Text".into(),
                body_part: None,
                disease_type: kind,
            }
        }
        Modality::Image => {
            let body = s.render(TemplateId::ImageTypeClassification, &[])?;
            let questions = parsing::parse_numbered_list(&body);
            let [kind_q, part_q] = questions.as_slice() else {
                return Err(AgentError::ClassificationFailed(
                    "image classification template must hold two numbered questions".into(),
                ));
            };
            let kind = s.ask_label(kind_q.clone(), parsing::IMAGE_KINDS, true)?;
            let part = s.ask_label(part_q.clone(), parsing::BODY_PARTS, true)?;
            CaseClassification {
                modality_kind: kind,
                disease_type: part.clone(),
                body_part: Some(part),
            }
        }
        Modality::Audio | Modality::Video => {
            let (id, vocab) = if case.modality == Modality::Audio {
                (TemplateId::AudioTypeClassification, parsing::AUDIO_KINDS)
            } else {
                (TemplateId::VideoTypeClassification, parsing::VIDEO_KINDS)
            };
            let prompt = s.render(id, &[])?;
            let kind = s.ask_label(prompt, vocab, true)?;
            CaseClassification {
                disease_type: kind.clone(),
                modality_kind: kind,
                body_part: None,
            }
        }
    };
    s.note(Stage::Classify, GP, &classification)?;
    Ok(classification)
}

fn modality_type(case: &MedicalCase, classification: &CaseClassification) -> String {
    match case.modality {
        Modality::Image => classification.modality_kind.clone(),
        other => other.as_str().to_string(),
    }
}

/// GP referral: exactly `n` roles, re-asking once and then padding.
pub fn gp_refer(s: &mut CaseSession<'_>, classification: &CaseClassification, n: usize) -> Result<Vec<RoleSpec>, AgentError> {
    let n = n.max(1);
    let modality = modality_type(s.case, classification);
    let q = s.case.formatted_question();
    let prompt = s.render(
        TemplateId::RoleGeneration,
        &[
            ("modality_type", &modality),
            ("disease_type", &classification.disease_type),
            ("question", &q),
        ],
    )?;
    let reply = s.ask(Stage::Refer, GP, prompt.clone(), false)?;
    let mut roles = parsing::parse_roles(&reply).unwrap_or_default();
    if roles.len() < n {
        let reply = s.ask(Stage::Refer, GP, format!("{prompt}\nGenerate exactly {n} roles."), false)?;
        let retry = parsing::parse_roles(&reply).unwrap_or_default();
        if retry.len() > roles.len() {
            roles = retry;
        }
    }
    roles.truncate(n);
    while roles.len() < n {
        roles.push(RoleSpec::new(format!("Specialist Doctor {}", roles.len() + 1), Vec::new()));
    }
    s.note(Stage::Refer, GP, &roles)?;
    Ok(roles)
}

fn decomposition_prompt(role: &RoleSpec, question: &str) -> String {
    format!(
        "You are a {}. Split the following medical question into at most {MAX_SUBPROBLEMS} focused \
         sub-questions that can each be answered by a web search. Reply with a numbered list only.\n\n\
         Question: {question}",
        role.name
    )
}

/// First specialist splits the question; every item is anonymized.
pub fn specialists_decompose(s: &mut CaseSession<'_>, team: &[RoleSpec]) -> Result<SubProblems, AgentError> {
    let first = team.first().ok_or(AgentError::EmptyTeam)?;
    let prompt = decomposition_prompt(first, &s.case.formatted_question());
    let reply = s.ask(Stage::Decompose, &first.name, prompt, false)?;
    let mut items: Vec<String> = parsing::parse_numbered_list(&reply)
        .into_iter()
        .take(MAX_SUBPROBLEMS)
        .map(|item| anonymize_with_context(&item, &s.case.question))
        .collect();
    if items.is_empty() {
        items.push(anonymize(&s.case.question));
    }
    let sub = SubProblems { items, anonymized: true };
    s.note(Stage::Decompose, &first.name, &sub)?;
    Ok(sub)
}

/// One search per sub-question; results deduplicated by url. Fails only
/// when every search fails.
pub fn assistant_retrieve(s: &mut CaseSession<'_>, sub: &SubProblems, top_k: usize) -> Result<RetrievedDocs, AgentError> {
    if !sub.anonymized {
        return Err(AgentError::NotAnonymized);
    }
    let backend = s.backends.search.clone();
    let mut docs = RetrievedDocs::default();
    let mut seen = BTreeSet::new();
    let mut errors = Vec::new();
    for (i, item) in sub.items.iter().enumerate() {
        let query = SearchQuery {
            query: item.clone(),
            top_k,
        };
        let result = backends::search(backend.as_ref(), &query);
        s.transcript
            .append_event(Stage::Retrieve, ASSISTANT, EventPayload::SearchQuery { query })?;
        match result {
            Ok(results) => {
                s.transcript.append_event(
                    Stage::Retrieve,
                    ASSISTANT,
                    EventPayload::SearchResults { results: results.clone() },
                )?;
                for result in results {
                    if seen.insert(result.url.clone()) {
                        docs.docs.push(RetrievedDoc { source_item: i, result });
                    }
                }
            }
            Err(e) => {
                s.transcript.append_event(
                    Stage::Retrieve,
                    ASSISTANT,
                    EventPayload::BackendError { message: e.to_string() },
                )?;
                docs.failed_items.push(i);
                errors.push(e.to_string());
            }
        }
    }
    if !sub.items.is_empty() && errors.len() == sub.items.len() {
        return Err(AgentError::AllRetrievalsFailed(errors));
    }
    Ok(docs)
}

/// Summarizes titles and snippets; no call when there is nothing to read.
pub fn assistant_summarize(s: &mut CaseSession<'_>, docs: &RetrievedDocs) -> Result<Summary, AgentError> {
    let summary = if docs.docs.is_empty() {
        Summary::default()
    } else {
        let listing = docs
            .docs
            .iter()
            .map(|d| format!("- {}: {}", d.result.title, d.result.snippet))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = s.render(TemplateId::SearchSummarize, &[("search_result", &listing)])?;
        let text = s.ask(Stage::Summarize, ASSISTANT, prompt, false)?;
        Summary {
            text: text.trim().to_string(),
            source_count: docs.docs.len(),
        }
    };
    s.note(Stage::Summarize, ASSISTANT, &summary)?;
    Ok(summary)
}

/// Text description of the case media, fetched once per session.
pub fn describe_media(s: &mut CaseSession<'_>) -> Result<String, AgentError> {
    if let Some(d) = &s.media_description {
        return Ok(d.clone());
    }
    let case = s.case;
    let path = match (&case.media_path, case.modality.has_media()) {
        (Some(p), true) => p,
        _ => return Err(AgentError::NoMedia(case.id.clone())),
    };
    if !s.backends.resolve_media(path).is_file() {
        return Err(BackendError::MediaUnreadable(path.clone()).into());
    }
    let prompt = s.render(TemplateId::MultimodalDescription, &[("modality_type", case.modality.as_str())])?;
    let text = s.ask(Stage::Describe, RADIOLOGIST, prompt, true)?;
    let text = text.trim().to_string();
    s.media_description = Some(text.clone());
    Ok(text)
}

/// Inputs a specialist sees beyond the case itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct OpinionContext<'c> {
    pub media_description: Option<&'c str>,
    /// Retrieval summary; only set in Retrieval mode.
    pub summary: Option<&'c Summary>,
    /// Report of the previous round, from round 2 on.
    pub previous_report: Option<&'c SynthesisReport>,
}

pub fn specialist_question(case: &MedicalCase, ctx: &OpinionContext<'_>) -> String {
    let mut q = case.formatted_question();
    if let Some(d) = ctx.media_description {
        q.push_str(&format!("\n\nMedia description: {d}"));
    }
    if let Some(sum) = ctx.summary.filter(|s| !s.is_empty()) {
        q.push_str(&format!("\n\nRetrieved evidence summary: {}", sum.text));
    }
    if let Some(r) = ctx.previous_report {
        q.push_str(&format!("\n\nPrevious discussion report: {}", r.raw));
    }
    q
}

pub fn specialist_opine(
    s: &mut CaseSession<'_>,
    role: &RoleSpec,
    classification: &CaseClassification,
    ctx: &OpinionContext<'_>,
) -> Result<DiagnosticOpinion, AgentError> {
    let question = specialist_question(s.case, ctx);
    let responsibilities = role.responsibilities_text();
    let prompt = s.render(
        TemplateId::Discuss,
        &[
            ("role_name", &role.name),
            ("role_responsibilities", &responsibilities),
            ("disease_type", &classification.disease_type),
            ("question", &question),
        ],
    )?;
    let reply = s.ask(Stage::Opine, &role.name, prompt, false)?;
    Ok(parsing::parse_opinion(&reply, &role.name))
}

/// Opinion from the media alone: no summary, no previous report.
pub fn radiologist_opine(s: &mut CaseSession<'_>, classification: &CaseClassification) -> Result<DiagnosticOpinion, AgentError> {
    let case = s.case;
    if !case.modality.has_media() || case.media_path.is_none() {
        return Err(AgentError::NoMedia(case.id.clone()));
    }
    let responsibilities = format!(
        "interpret the attached {} and report the findings relevant to the question",
        case.modality
    );
    let q = case.formatted_question();
    let prompt = s.render(
        TemplateId::Discuss,
        &[
            ("role_name", RADIOLOGIST),
            ("role_responsibilities", &responsibilities),
            ("disease_type", &classification.disease_type),
            ("question", &q),
        ],
    )?;
    let reply = s.ask(Stage::Radiology, RADIOLOGIST, prompt, true)?;
    Ok(parsing::parse_opinion(&reply, RADIOLOGIST))
}

pub fn discussion_text(opinions: &[DiagnosticOpinion], summary: Option<&Summary>) -> String {
    let mut parts: Vec<String> = opinions.iter().map(|o| format!("{}: {}", o.role, o.raw)).collect();
    if let Some(sum) = summary.filter(|s| !s.is_empty()) {
        parts.push(format!("Retrieved evidence summary: {}", sum.text));
    }
    parts.join("\n\n")
}

/// Director's meeting summary. `flagged` asks for a corrected rewrite after
/// a failed review.
pub fn director_synthesize(
    s: &mut CaseSession<'_>,
    opinions: &[DiagnosticOpinion],
    summary: Option<&Summary>,
    flagged: bool,
) -> Result<SynthesisReport, AgentError> {
    if opinions.is_empty() {
        return Err(AgentError::NoOpinions);
    }
    let mut discussion = discussion_text(opinions, summary);
    if flagged {
        discussion.push_str(
            "\n\nNote: a review found medical reasoning errors, redundant statements, or invalid outputs \
             in the previous summary; correct them.",
        );
    }
    let q = s.case.formatted_question();
    let prompt = s.render(TemplateId::Summarize, &[("question", &q), ("discussion", &discussion)])?;
    let reply = s.ask(Stage::Synthesize, DIRECTOR, prompt, false)?;
    Ok(parsing::parse_report(&reply))
}

/// True when the review flags errors.
pub fn director_review(s: &mut CaseSession<'_>, discussion: &str) -> Result<bool, AgentError> {
    let prompt = s.render(TemplateId::Review, &[("dis", discussion)])?;
    let reply = s.ask(Stage::Review, DIRECTOR, prompt, false)?;
    let flagged = parsing::parse_vote(&reply);
    s.note(Stage::Review, DIRECTOR, flagged)?;
    Ok(flagged)
}

pub fn specialist_vote(s: &mut CaseSession<'_>, role: &RoleSpec, report: &SynthesisReport) -> Result<Vote, AgentError> {
    let responsibilities = role.responsibilities_text();
    let q = s.case.formatted_question();
    let prompt = s.render(
        TemplateId::Vote,
        &[
            ("role_name", &role.name),
            ("role_responsibilities", &responsibilities),
            ("question", &q),
            ("summary", &report.raw),
        ],
    )?;
    let reply = s.ask(Stage::Vote, &role.name, prompt, false)?;
    let vote = Vote {
        voter: role.name.clone(),
        value: parsing::parse_vote(&reply),
        raw: reply,
    };
    s.note(Stage::Vote, &role.name, vote.value)?;
    Ok(vote)
}

fn diagnosis_from_label(case: &MedicalCase, label: String) -> FinalDiagnosis {
    let text = case.option(&label).map(|o| o.text.clone()).unwrap_or_default();
    FinalDiagnosis {
        answer_label: Some(label),
        answer_text: text,
        reviewed: false,
    }
}

/// Reads a final answer from `reply`: an option label for multiple-choice
/// cases, the trimmed reply otherwise.
pub fn read_answer(case: &MedicalCase, reply: &str) -> Result<FinalDiagnosis, ParseError> {
    if case.options.is_empty() {
        return Ok(FinalDiagnosis {
            answer_label: None,
            answer_text: reply.trim().to_string(),
            reviewed: false,
        });
    }
    parsing::parse_final_answer(reply, &case.options).map(|label| diagnosis_from_label(case, label))
}

/// Final diagnosis from the meeting record, re-asking once for a letter.
pub fn director_finalize(s: &mut CaseSession<'_>, report: &SynthesisReport) -> Result<FinalDiagnosis, AgentError> {
    let q = s.case.formatted_question();
    let prompt = s.render(TemplateId::Diagnosis, &[("ques", &q), ("record", &report.raw)])?;
    let reply = s.ask(Stage::Answer, DIRECTOR, prompt.clone(), true)?;
    let diagnosis = match read_answer(s.case, &reply) {
        Ok(d) => d,
        Err(_) => {
            let reply = s.ask(Stage::Answer, DIRECTOR, format!("{prompt}{LETTER_REMINDER}"), true)?;
            read_answer(s.case, &reply).map_err(|_| AgentError::FinalizationFailed)?
        }
    };
    s.note(Stage::Answer, DIRECTOR, &diagnosis)?;
    Ok(diagnosis)
}

pub fn answer_record(d: &FinalDiagnosis) -> String {
    match &d.answer_label {
        Some(l) => format!("{l}. {}", d.answer_text),
        None => d.answer_text.clone(),
    }
}

/// Advisory reasonableness check; never changes the answer.
pub fn assistant_overall_review(s: &mut CaseSession<'_>, answer: &FinalDiagnosis) -> Result<bool, AgentError> {
    let q = s.case.formatted_question();
    let record = answer_record(answer);
    let prompt = s.render(TemplateId::OverallReview, &[("ques", &q), ("record", &record)])?;
    let reply = s.ask(Stage::OverallReview, ASSISTANT, prompt, false)?;
    let ok = parsing::parse_vote(&reply);
    s.note(Stage::OverallReview, ASSISTANT, ok)?;
    Ok(ok)
}
