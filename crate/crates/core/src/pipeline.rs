//! Stage sequencing, the consensus loop, and the four ablation modes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentError, CaseSession, OpinionContext};
use crate::backends::Backends;
use crate::case::{validate_case, CaseViolation, MedicalCase};
use crate::config::{AblationMode, ConfigError, PipelineConfig};
use crate::model::{
    CaseClassification, DiagnosticOpinion, FinalDiagnosis, RoleSpec, Summary, SynthesisReport, Vote,
};
use crate::parsing;
use crate::prompts::{PromptRegistry, TemplateId};
use crate::transcript::{Outcome, Stage, Transcript};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid case: {}", join_violations(.0))]
    InvalidCase(Vec<CaseViolation>),
    #[error("invalid config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("expected {expected} votes, got {found}")]
    VoteCountMismatch { expected: usize, found: usize },
    #[error("case `{0}` needs options and a gold answer for discernment")]
    NotDiscernible(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn join_violations(v: &[CaseViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Endorsement count and whether it is unanimous.
pub fn tally_votes(votes: &[Vote], n: usize) -> Result<(usize, bool), PipelineError> {
    if votes.len() != n {
        return Err(PipelineError::VoteCountMismatch {
            expected: n,
            found: votes.len(),
        });
    }
    let tally = votes.iter().filter(|v| v.value).count();
    Ok((tally, tally == n))
}

/// State after one deliberation round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationState {
    pub round: usize,
    pub opinions: Vec<DiagnosticOpinion>,
    pub summary: Summary,
    pub report: Option<SynthesisReport>,
    pub votes: Vec<Vote>,
    pub tally: usize,
    pub consensus: bool,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub case_id: String,
    pub classification: Option<CaseClassification>,
    pub team: Vec<RoleSpec>,
    pub final_diagnosis: FinalDiagnosis,
    pub rounds_used: usize,
    pub consensus_reached: bool,
    pub transcript: Transcript,
}

/// A case that aborted. The transcript is finalized with the failure.
#[derive(Debug)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: PipelineError,
    pub transcript: Transcript,
}

struct Completed {
    classification: Option<CaseClassification>,
    team: Vec<RoleSpec>,
    final_diagnosis: FinalDiagnosis,
    rounds_used: usize,
    consensus_reached: bool,
}

/// Runs one case under `config.ablation_mode`. Every outcome, success or
/// failure, comes back with a finalized transcript.
pub fn run_case(
    case: &MedicalCase,
    config: &PipelineConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
) -> Result<CaseOutcome, Box<CaseFailure>> {
    let mut session = CaseSession::new(case, config, prompts, backends);
    let result = config
        .validate()
        .map_err(PipelineError::from)
        .and_then(|()| validate_case(case.clone()).map_err(PipelineError::InvalidCase))
        .and_then(|_| execute(&mut session));
    let mut transcript = session.transcript;
    match result {
        Ok(done) => {
            transcript
                .finalize(Outcome::Completed {
                    final_diagnosis: done.final_diagnosis.clone(),
                    rounds_used: done.rounds_used,
                    consensus_reached: done.consensus_reached,
                    classification: done.classification.clone(),
                    team: done.team.clone(),
                })
                .expect("transcript finalized once");
            Ok(CaseOutcome {
                case_id: case.id.clone(),
                classification: done.classification,
                team: done.team,
                final_diagnosis: done.final_diagnosis,
                rounds_used: done.rounds_used,
                consensus_reached: done.consensus_reached,
                transcript,
            })
        }
        Err(error) => {
            transcript
                .finalize(Outcome::Failed { error: error.to_string() })
                .expect("transcript finalized once");
            Err(Box::new(CaseFailure {
                case_id: case.id.clone(),
                error,
                transcript,
            }))
        }
    }
}

const ANSWERER: &str = "Physician";

fn direct_prompt(s: &CaseSession<'_>) -> Result<String, AgentError> {
    let q = s.case.formatted_question();
    Ok(s.prompts.render(TemplateId::Direct, &[("question", &q)])?)
}

fn assigned_role_system(s: &CaseSession<'_>, classification: &CaseClassification) -> Result<String, AgentError> {
    match &s.config.assigned_role_prompt {
        Some(custom) => Ok(custom.replace("{disease_type}", &classification.disease_type)),
        None => Ok(s
            .prompts
            .render(TemplateId::AssignedRole, &[("disease_type", &classification.disease_type)])?),
    }
}

/// Single-shot answer. An unparseable reply leaves the label empty and the
/// raw reply as the answer text.
fn single_answer(s: &mut CaseSession<'_>, system: Option<String>) -> Result<FinalDiagnosis, AgentError> {
    let mut req = s.request(direct_prompt(s)?, true);
    req.system_prompt = system;
    let reply = s.call(Stage::Answer, ANSWERER, req)?;
    let diagnosis = agents::read_answer(s.case, &reply).unwrap_or_else(|_| FinalDiagnosis {
        answer_label: None,
        answer_text: reply.trim().to_string(),
        reviewed: false,
    });
    s.note(Stage::Answer, ANSWERER, &diagnosis)?;
    Ok(diagnosis)
}

fn execute(s: &mut CaseSession<'_>) -> Result<Completed, PipelineError> {
    let config = s.config;
    match config.ablation_mode {
        AblationMode::Direct => {
            let final_diagnosis = single_answer(s, None)?;
            Ok(Completed {
                classification: None,
                team: Vec::new(),
                final_diagnosis,
                rounds_used: 1,
                consensus_reached: false,
            })
        }
        AblationMode::Roles => {
            let classification = agents::gp_classify(s)?;
            let system = assigned_role_system(s, &classification)?;
            let final_diagnosis = single_answer(s, Some(system))?;
            Ok(Completed {
                classification: Some(classification),
                team: Vec::new(),
                final_diagnosis,
                rounds_used: 1,
                consensus_reached: false,
            })
        }
        AblationMode::Discussion | AblationMode::Retrieval => deliberate(s),
    }
}

fn deliberate(s: &mut CaseSession<'_>) -> Result<Completed, PipelineError> {
    let config = s.config;
    let has_media = s.case.modality.has_media();
    let classification = agents::gp_classify(s)?;
    let team = agents::gp_refer(s, &classification, config.n_specialists)?;
    let description = if has_media { Some(agents::describe_media(s)?) } else { None };

    let summary = if config.ablation_mode.retrieves() {
        let sub = agents::specialists_decompose(s, &team)?;
        let docs = agents::assistant_retrieve(s, &sub, config.retrieval_top_k)?;
        Some(agents::assistant_summarize(s, &docs)?)
    } else {
        None
    };

    // The radiologist reads the media alone, so its opinion is fixed across rounds.
    let radiology = if has_media {
        Some(agents::radiologist_opine(s, &classification)?)
    } else {
        None
    };

    let mut state: Option<DeliberationState> = None;
    for round in 1..=config.max_rounds {
        let previous_report = state.as_ref().and_then(|st| st.report.clone());
        let ctx = OpinionContext {
            media_description: description.as_deref(),
            summary: summary.as_ref(),
            previous_report: previous_report.as_ref(),
        };
        let mut opinions = Vec::with_capacity(team.len() + 1);
        for role in &team {
            opinions.push(agents::specialist_opine(s, role, &classification, &ctx)?);
        }
        opinions.extend(radiology.clone());

        let mut report = agents::director_synthesize(s, &opinions, summary.as_ref(), false)?;
        if agents::director_review(s, &report.raw)? {
            report = agents::director_synthesize(s, &opinions, summary.as_ref(), true)?;
        }

        let mut votes = Vec::with_capacity(team.len());
        for role in &team {
            votes.push(agents::specialist_vote(s, role, &report)?);
        }
        let (tally, consensus) = tally_votes(&votes, team.len())?;
        s.note(
            Stage::Tally,
            agents::DIRECTOR,
            serde_json::json!({ "round": round, "tally": tally, "consensus": consensus }),
        )
        .map_err(PipelineError::from)?;
        state = Some(DeliberationState {
            round,
            opinions,
            summary: summary.clone().unwrap_or_default(),
            report: Some(report),
            votes,
            tally,
            consensus,
        });
        if consensus {
            break;
        }
    }

    let state = state.expect("max_rounds >= 1 runs at least one round");
    let report = state.report.as_ref().expect("every round synthesizes a report");
    let mut final_diagnosis = agents::director_finalize(s, report)?;
    final_diagnosis.reviewed = agents::assistant_overall_review(s, &final_diagnosis)?;
    Ok(Completed {
        classification: Some(classification),
        team,
        final_diagnosis,
        rounds_used: state.round,
        consensus_reached: state.consensus,
    })
}

/// Three sampled answers and the model's pick among them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscernmentRun {
    pub case_id: String,
    pub gold: String,
    /// Parsed label per generation; `None` when a reply named no option.
    pub generated: Vec<Option<String>>,
    pub selected: Option<String>,
}

impl DiscernmentRun {
    pub fn correct_count(&self) -> usize {
        self.generated
            .iter()
            .filter(|g| g.as_deref() == Some(self.gold.as_str()))
            .count()
    }

    pub fn selected_correct(&self) -> bool {
        self.selected.as_deref() == Some(self.gold.as_str())
    }
}

pub const DISCERNMENT_SAMPLES: usize = 3;

fn selection_prompt(case: &MedicalCase, candidates: &[String]) -> String {
    let mut p = format!(
        "{}\n\nThree candidate diagnoses were proposed for this question:\n",
        case.formatted_question()
    );
    for (i, c) in candidates.iter().enumerate() {
        p.push_str(&format!("\nCandidate {}: {}\n", i + 1, c.trim()));
    }
    p.push_str("\nSelect the single candidate most likely to be correct. State the final answer as a single option letter.");
    p
}

/// Generates three assigned-role answers with seeds `seed`, `seed+1`,
/// `seed+2`, then asks for a selection among them.
pub fn run_discernment(
    case: &MedicalCase,
    config: &PipelineConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
) -> Result<(DiscernmentRun, Transcript), Box<CaseFailure>> {
    let mut session = CaseSession::new(case, config, prompts, backends);
    let result = discern(&mut session);
    let mut transcript = session.transcript;
    match result {
        Ok((run, classification)) => {
            let selected = run.selected.clone();
            transcript
                .finalize(Outcome::Completed {
                    final_diagnosis: FinalDiagnosis {
                        answer_text: selected
                            .as_deref()
                            .and_then(|l| case.option(l))
                            .map(|o| o.text.clone())
                            .unwrap_or_default(),
                        answer_label: selected,
                        reviewed: false,
                    },
                    rounds_used: 1,
                    consensus_reached: false,
                    classification: Some(classification),
                    team: Vec::new(),
                })
                .expect("transcript finalized once");
            Ok((run, transcript))
        }
        Err(error) => {
            transcript
                .finalize(Outcome::Failed { error: error.to_string() })
                .expect("transcript finalized once");
            Err(Box::new(CaseFailure {
                case_id: case.id.clone(),
                error,
                transcript,
            }))
        }
    }
}

fn discern(s: &mut CaseSession<'_>) -> Result<(DiscernmentRun, CaseClassification), PipelineError> {
    let case = s.case;
    let gold = match (&case.gold_answer, case.options.is_empty()) {
        (Some(g), false) => g.clone(),
        _ => return Err(PipelineError::NotDiscernible(case.id.clone())),
    };
    s.config.validate()?;
    validate_case(case.clone()).map_err(PipelineError::InvalidCase)?;
    let classification = agents::gp_classify(s)?;
    let system = assigned_role_system(s, &classification)?;
    let prompt = direct_prompt(s)?;
    let mut replies = Vec::with_capacity(DISCERNMENT_SAMPLES);
    let mut generated = Vec::with_capacity(DISCERNMENT_SAMPLES);
    for k in 0..DISCERNMENT_SAMPLES {
        let actor = format!("Generator {}", k + 1);
        let mut req = s
            .request(prompt.clone(), true)
            .with_temperature(s.config.discernment_temperature)
            .with_seed(Some(s.config.seed.wrapping_add(k as u64)));
        req.system_prompt = Some(system.clone());
        let reply = s.call(Stage::Generate, &actor, req)?;
        let label = parsing::parse_final_answer(&reply, &case.options).ok();
        s.note(Stage::Generate, &actor, &label)?;
        generated.push(label);
        replies.push(reply);
    }
    let mut req = s.request(selection_prompt(case, &replies), true);
    req.system_prompt = Some(system);
    let reply = s.call(Stage::Select, "Selector", req)?;
    let selected = parsing::parse_final_answer(&reply, &case.options).ok();
    s.note(Stage::Select, "Selector", &selected)?;
    Ok((
        DiscernmentRun {
            case_id: case.id.clone(),
            gold,
            generated,
            selected,
        },
        classification,
    ))
}
