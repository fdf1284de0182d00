mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use mam_core::agents::{self, AgentError, CaseSession, OpinionContext};
use mam_core::backends::{Backends, FixtureSearch, NullSearch, ScriptRule, ScriptedChat, SearchResult};
use mam_core::model::{CaseClassification, RetrievedDoc, RetrievedDocs, RoleSpec, SubProblems, Summary};
use mam_core::parsing;
use mam_core::{MedicalCase, Modality, PipelineConfig, PromptRegistry, Stage};

fn scripted(rules: Vec<ScriptRule>) -> Backends {
    Backends::new(Arc::new(ScriptedChat::new("scripted:test", rules)), Arc::new(NullSearch)).with_media_root(common::fixtures())
}

struct Env {
    case: MedicalCase,
    config: PipelineConfig,
    prompts: PromptRegistry,
    backends: Backends,
}

impl Env {
    fn new(case: MedicalCase, rules: Vec<ScriptRule>) -> Self {
        Self {
            case,
            config: PipelineConfig::default(),
            prompts: PromptRegistry::builtin(),
            backends: scripted(rules),
        }
    }

    fn session(&self) -> CaseSession<'_> {
        CaseSession::new(&self.case, &self.config, &self.prompts, &self.backends)
    }
}

fn calls(s: &CaseSession<'_>) -> usize {
    s.transcript.chat_call_count()
}

fn prompts_of(s: &CaseSession<'_>, stage: Stage) -> Vec<String> {
    s.transcript
        .chat_requests()
        .filter(|(e, _)| e.stage == stage)
        .map(|(_, r)| r.full_text())
        .collect()
}

fn text_case() -> MedicalCase {
    MedicalCase::text("t", "Which finding is most likely?")
        .with_options([("A", "Effusion"), ("B", "Atelectasis"), ("C", "Pneumothorax"), ("D", "Consolidation")])
        .with_gold("B")
}

fn classification(disease: &str) -> CaseClassification {
    CaseClassification {
        modality_kind: "Text".into(),
        body_part: None,
        disease_type: disease.into(),
    }
}

#[test]
fn classify_audio() {
    let env = Env::new(
        common::case("a1"),
        vec![ScriptRule::substring("What kind of audio is this?", "Cardiovascular")],
    );
    let mut s = env.session();
    let c = agents::gp_classify(&mut s).unwrap();
    assert_eq!(c.disease_type, "Cardiovascular");
    assert_eq!(calls(&s), 1);
}

#[test]
fn classify_image_in_two_steps() {
    let env = Env::new(
        common::case("i1"),
        vec![
            ScriptRule::substring("What kind of medical image is this?", "X-Ray"),
            ScriptRule::substring("What part of the human body", "lung"),
        ],
    );
    let mut s = env.session();
    let c = agents::gp_classify(&mut s).unwrap();
    assert_eq!((c.modality_kind.as_str(), c.body_part.as_deref()), ("X-Ray", Some("lung")));
    assert_eq!(c.disease_type, "lung");
    assert_eq!(calls(&s), 2);
    assert!(s.transcript.chat_requests().all(|(_, r)| r.media.is_some()));
}

#[test]
fn classify_text_from_output_example() {
    let env = Env::new(
        text_case(),
        vec![ScriptRule::substring("Which kind of question", "The question type is **Radiology**.")],
    );
    let c = agents::gp_classify(&mut env.session()).unwrap();
    assert_eq!(c.disease_type, "Radiology");
}

#[test]
fn classify_retries_once_then_fails() {
    let env = Env::new(
        common::case("a1"),
        vec![ScriptRule::substring("What kind of audio", "I cannot tell.")],
    );
    let mut s = env.session();
    let err = agents::gp_classify(&mut s).unwrap_err();
    assert!(matches!(err, AgentError::ClassificationFailed(_)));
    assert_eq!(calls(&s), 2);
    assert!(prompts_of(&s, Stage::Classify)[1].ends_with("\nAnswer with a single word."));
}

#[test]
fn classify_recovers_on_retry() {
    let env = Env::new(
        common::case("v1"),
        vec![
            ScriptRule::substring("Answer with a single word.", "Emergency"),
            ScriptRule::substring("What kind of video", "Hard to say."),
        ],
    );
    assert_eq!(agents::gp_classify(&mut env.session()).unwrap().disease_type, "Emergency");
}

const THREE_ROLES: &str = "**Specialist Doctor** (Cardiologist):\n- Review the ECG.\n\n\
    **Radiologic Technologist** (Chest Imaging):\n- Acquire a PA film.\n\n\
    **Clinical Pharmacist**:\n- Check interactions.\n";

#[test]
fn refer_keeps_parsed_roles() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("assigns tasks", THREE_ROLES)]);
    let mut s = env.session();
    let team = agents::gp_refer(&mut s, &classification("Medicine"), 3).unwrap();
    assert_eq!(team[0].name, "Specialist Doctor (Cardiologist)");
    assert_eq!(team.len(), 3);
    assert_eq!(calls(&s), 1);
}

#[test]
fn refer_truncates_extra_roles() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("assigns tasks", THREE_ROLES)]);
    let team = agents::gp_refer(&mut env.session(), &classification("Medicine"), 1).unwrap();
    assert_eq!(team.len(), 1);
}

#[test]
fn refer_pads_after_one_retry() {
    let env = Env::new(
        text_case(),
        vec![ScriptRule::substring("assigns tasks", "**Neurologist**:\n- Examine reflexes.\n")],
    );
    let mut s = env.session();
    let team = agents::gp_refer(&mut s, &classification("Medicine"), 3).unwrap();
    let names: Vec<_> = team.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Neurologist", "Specialist Doctor 2", "Specialist Doctor 3"]);
    assert_eq!(calls(&s), 2);
    assert!(prompts_of(&s, Stage::Refer)[1].ends_with("\nGenerate exactly 3 roles."));
}

#[test]
fn refer_five_roles() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("assigns tasks", THREE_ROLES)]);
    assert_eq!(agents::gp_refer(&mut env.session(), &classification("Medicine"), 5).unwrap().len(), 5);
}

fn team() -> Vec<RoleSpec> {
    vec![
        RoleSpec::new("Pulmonologist", vec!["Assess the lungs.".into()]),
        RoleSpec::new("Cardiologist", vec![]),
    ]
}

#[test]
fn decomposition_is_anonymized() {
    let case = MedicalCase::text("p", "Patient John Smith, 45, has dyspnea. What is the cause?");
    let env = Env::new(
        case,
        vec![ScriptRule::substring(
            "Split the following",
            "1. Why does John Smith, 45, have dyspnea?\n2. Causes of dyspnea at 45",
        )],
    );
    let sub = agents::specialists_decompose(&mut env.session(), &team()).unwrap();
    assert!(sub.anonymized);
    assert!(sub.items.iter().all(|i| !i.contains("John") && !i.contains("Smith")), "{:?}", sub.items);
}

#[test]
fn decomposition_caps_at_three() {
    let env = Env::new(
        text_case(),
        vec![ScriptRule::substring("Split the following", "1. a?\n2. b?\n3. c?\n4. d?")],
    );
    let sub = agents::specialists_decompose(&mut env.session(), &team()).unwrap();
    assert_eq!(sub.items, ["a?", "b?", "c?"]);
}

#[test]
fn decomposition_falls_back_to_the_question() {
    let case = MedicalCase::text("p", "Patient John Smith has dyspnea.");
    let env = Env::new(case, vec![ScriptRule::substring("Split the following", "Sorry, no.")]);
    let sub = agents::specialists_decompose(&mut env.session(), &team()).unwrap();
    assert_eq!(sub.items, ["Patient [PATIENT] has dyspnea."]);
}

fn doc(n: u32) -> SearchResult {
    SearchResult {
        title: format!("title {n}"),
        snippet: format!("snippet {n}"),
        url: format!("https://example.org/{n}"),
    }
}

fn with_search(env: &mut Env, entries: BTreeMap<String, Vec<SearchResult>>) {
    env.backends.search = Arc::new(FixtureSearch::new("fixture:test", entries));
}

#[test]
fn retrieval_deduplicates_by_url() {
    let mut env = Env::new(text_case(), vec![]);
    with_search(
        &mut env,
        BTreeMap::from([
            ("q1".to_string(), vec![doc(1), doc(2), doc(3)]),
            ("q2".to_string(), vec![doc(3), doc(4)]),
        ]),
    );
    let sub = SubProblems {
        items: vec!["q1".into(), "q2".into()],
        anonymized: true,
    };
    let docs = agents::assistant_retrieve(&mut env.session(), &sub, 5).unwrap();
    assert_eq!(docs.docs.len(), 4);
    assert_eq!(docs.docs[3].source_item, 1);
}

#[test]
fn retrieval_refuses_raw_items() {
    let env = Env::new(text_case(), vec![]);
    let sub = SubProblems {
        items: vec!["q".into()],
        anonymized: false,
    };
    assert!(matches!(
        agents::assistant_retrieve(&mut env.session(), &sub, 5),
        Err(AgentError::NotAnonymized)
    ));
}

#[test]
fn unknown_queries_give_no_docs() {
    let mut env = Env::new(text_case(), vec![]);
    with_search(&mut env, BTreeMap::new());
    let sub = SubProblems {
        items: vec!["x".into(), "y".into()],
        anonymized: true,
    };
    let docs = agents::assistant_retrieve(&mut env.session(), &sub, 5).unwrap();
    assert!(docs.docs.is_empty() && docs.failed_items.is_empty());
}

#[test]
fn retrieval_fails_only_when_every_search_fails() {
    let env = Env::new(text_case(), vec![]);
    let sub = SubProblems {
        items: vec!["   ".into()],
        anonymized: true,
    };
    assert!(matches!(
        agents::assistant_retrieve(&mut env.session(), &sub, 5),
        Err(AgentError::AllRetrievalsFailed(_))
    ));
    let sub = SubProblems {
        items: vec!["   ".into(), "fine".into()],
        anonymized: true,
    };
    let docs = agents::assistant_retrieve(&mut env.session(), &sub, 5).unwrap();
    assert_eq!(docs.failed_items, [0]);
}

#[test]
fn empty_docs_skip_the_summary_call() {
    let env = Env::new(text_case(), vec![]);
    let mut s = env.session();
    let sum = agents::assistant_summarize(&mut s, &RetrievedDocs::default()).unwrap();
    assert_eq!(sum, Summary::default());
    assert_eq!(calls(&s), 0);
}

#[test]
fn summary_of_four_docs() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("search results briefly in 200", "S")]);
    let docs = RetrievedDocs {
        docs: (1..=4).map(|n| RetrievedDoc { source_item: 0, result: doc(n) }).collect(),
        failed_items: vec![],
    };
    let mut s = env.session();
    let sum = agents::assistant_summarize(&mut s, &docs).unwrap();
    assert_eq!((sum.text.as_str(), sum.source_count), ("S", 4));
    assert!(prompts_of(&s, Stage::Summarize)[0].contains("snippet 4"));
}

#[test]
fn media_description_is_cached() {
    let env = Env::new(
        common::case("i1"),
        vec![ScriptRule::substring("briefly in 100 words", "chest radiograph, left effusion")],
    );
    let mut s = env.session();
    assert_eq!(agents::describe_media(&mut s).unwrap(), "chest radiograph, left effusion");
    assert_eq!(agents::describe_media(&mut s).unwrap(), "chest radiograph, left effusion");
    assert_eq!(calls(&s), 1);
}

#[test]
fn text_case_has_no_media_to_describe() {
    let env = Env::new(text_case(), vec![]);
    assert!(matches!(agents::describe_media(&mut env.session()), Err(AgentError::NoMedia(_))));
}

const OPINION: &str = "**Assessment Steps**:\n- Initial Assessment: x\n**Possible Answers**:\n\
    - Answer 1: Pneumothorax\nReasoning: a\n- Answer 2: Effusion\nReasoning: b\n- Answer 3: Atelectasis\nReasoning: c\n\
    **Conclusion**: Pneumothorax.";

#[test]
fn opinions_are_independent_per_role() {
    let env = Env::new(
        text_case(),
        vec![
            ScriptRule::substring("You are a Pulmonologist", OPINION),
            ScriptRule::substring("You are a Cardiologist", "**Conclusion**: cardiac cause unlikely."),
        ],
    );
    let mut s = env.session();
    let ctx = OpinionContext::default();
    let a = agents::specialist_opine(&mut s, &team()[0], &classification("Medicine"), &ctx).unwrap();
    let b = agents::specialist_opine(&mut s, &team()[1], &classification("Medicine"), &ctx).unwrap();
    assert_eq!(a.candidates.len(), 3);
    assert_ne!(a, b);
    assert!(!prompts_of(&s, Stage::Opine)[0].contains("Retrieved evidence summary"));
}

#[test]
fn specialist_sees_summary_but_radiologist_does_not() {
    let env = Env::new(common::case("i1"), vec![ScriptRule::substring("thoughtfully", OPINION)]);
    let mut s = env.session();
    let summary = Summary {
        text: "SUMMARY-TEXT".into(),
        source_count: 1,
    };
    let ctx = OpinionContext {
        summary: Some(&summary),
        ..Default::default()
    };
    agents::specialist_opine(&mut s, &team()[0], &classification("lung"), &ctx).unwrap();
    let rad = agents::radiologist_opine(&mut s, &classification("lung")).unwrap();
    assert_eq!(rad.role, "Radiologist");
    assert!(prompts_of(&s, Stage::Opine)[0].contains("SUMMARY-TEXT"));
    assert!(!prompts_of(&s, Stage::Radiology)[0].contains("SUMMARY-TEXT"));
}

#[test]
fn radiologist_skips_text_cases() {
    let env = Env::new(text_case(), vec![]);
    assert!(matches!(
        agents::radiologist_opine(&mut env.session(), &classification("x")),
        Err(AgentError::NoOpinions | AgentError::NoMedia(_))
    ));
}

#[test]
fn synthesis_sees_every_opinion_in_order() {
    let report = "**Possible Answers**:\n- Answer 1: P\n**Agreements**:\n- all\n**Disagreements**:\n- none\n**Conclusions**:\n- P";
    let env = Env::new(text_case(), vec![ScriptRule::substring("moderator", report)]);
    let mut s = env.session();
    let opinions: Vec<_> = ["first-raw", "second-raw", "third-raw"]
        .iter()
        .map(|raw| parsing::parse_opinion(raw, "R"))
        .collect();
    let r = agents::director_synthesize(&mut s, &opinions, None, false).unwrap();
    let prompt = &prompts_of(&s, Stage::Synthesize)[0];
    let (a, b, c) = (
        prompt.find("first-raw").unwrap(),
        prompt.find("second-raw").unwrap(),
        prompt.find("third-raw").unwrap(),
    );
    assert!(a < b && b < c);
    assert!(prompt.contains("detailed summary of the discussions"));
    assert!(!r.agreements.is_empty() && !r.disagreements.is_empty() && !r.conclusions.is_empty());
    assert_eq!(r.raw, report);
}

#[test]
fn votes_and_reviews() {
    let env = Env::new(
        text_case(),
        vec![
            ScriptRule::substring("You are a Pulmonologist", "yes"),
            ScriptRule::substring("You are a Cardiologist", "No."),
            ScriptRule::substring("rollowing paragraph", "no"),
        ],
    );
    let mut s = env.session();
    let report = parsing::parse_report("**Conclusions**: P");
    assert!(agents::specialist_vote(&mut s, &team()[0], &report).unwrap().value);
    assert!(!agents::specialist_vote(&mut s, &team()[1], &report).unwrap().value);
    assert!(!agents::director_review(&mut s, "text").unwrap());
    assert!(prompts_of(&s, Stage::Review)[0].contains("redundant statements, or invalid outputs"));
    assert!(prompts_of(&s, Stage::Vote)[0].contains("agree with the summery above"));
}

#[test]
fn flagged_review() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("rollowing paragraph", "yes")]);
    assert!(agents::director_review(&mut env.session(), "text").unwrap());
}

#[test]
fn finalize_option_case() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("Meeting record:", "The answer is **B**.")]);
    let mut s = env.session();
    let d = agents::director_finalize(&mut s, &parsing::parse_report("r")).unwrap();
    assert_eq!(d.answer_label.as_deref(), Some("B"));
    assert_eq!(d.answer_text, "Atelectasis");
    assert!(prompts_of(&s, Stage::Answer)[0].contains("Meeting record:"));
}

#[test]
fn finalize_open_case() {
    let env = Env::new(
        MedicalCase::text("o", "What is the lesion?"),
        vec![ScriptRule::substring("Meeting record:", "Liver lesion.")],
    );
    let d = agents::director_finalize(&mut env.session(), &parsing::parse_report("r")).unwrap();
    assert_eq!((d.answer_label, d.answer_text.as_str()), (None, "Liver lesion."));
}

#[test]
fn finalize_fails_after_one_reprompt() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("Meeting record:", "Hard to say.")]);
    let mut s = env.session();
    assert!(matches!(
        agents::director_finalize(&mut s, &parsing::parse_report("r")),
        Err(AgentError::FinalizationFailed)
    ));
    assert_eq!(calls(&s), 2);
    assert!(prompts_of(&s, Stage::Answer)[1].ends_with("\nState the final answer as a single option letter."));
}

#[test]
fn overall_review_is_advisory() {
    let env = Env::new(text_case(), vec![ScriptRule::substring("medical assistant", "no")]);
    let mut s = env.session();
    let d = agents::read_answer(&s.case.clone(), "The answer is **B**.").unwrap();
    assert!(!agents::assistant_overall_review(&mut s, &d).unwrap());
    assert!(prompts_of(&s, Stage::OverallReview)[0].starts_with("Input: You're a medical assistant."));
    assert_eq!(d.answer_label.as_deref(), Some("B"));
}

#[test]
fn media_calls_use_the_multimodal_backend() {
    let text_only = ScriptedChat::new("scripted:text", vec![]);
    let mm = ScriptedChat::new("scripted:mm", vec![ScriptRule::substring("briefly in 100 words", "desc")]);
    let case = common::case("a1");
    let config = PipelineConfig::default();
    let prompts = PromptRegistry::builtin();
    let backends = Backends::new(Arc::new(text_only), Arc::new(NullSearch))
        .with_multimodal(Arc::new(mm))
        .with_media_root(common::fixtures());
    let mut s = CaseSession::new(&case, &config, &prompts, &backends);
    assert_eq!(agents::describe_media(&mut s).unwrap(), "desc");
    assert_eq!(case.modality, Modality::Audio);
}
