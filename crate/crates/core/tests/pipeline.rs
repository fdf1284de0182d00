mod common;

use std::sync::Arc;

use mam_core::backends::{ScriptRule, ScriptedChat};
use mam_core::pipeline::{run_case, run_discernment, PipelineError};
use mam_core::transcript::{EventPayload, Outcome};
use mam_core::{AblationMode, PipelineConfig, PromptRegistry, Stage};

fn config(mode: AblationMode) -> PipelineConfig {
    PipelineConfig::default().with_mode(mode)
}

#[test]
fn every_fixture_case_completes_in_every_mode() {
    let prompts = PromptRegistry::builtin();
    let backends = common::backends();
    for mode in AblationMode::ALL {
        for case in common::cases() {
            let out = run_case(&case, &config(mode), &prompts, &backends)
                .unwrap_or_else(|f| panic!("{mode:?} {}: {}", f.case_id, f.error));
            out.transcript.verify().unwrap();
            assert!(out.transcript.is_finalized());
        }
    }
}

#[test]
fn all_yes_voters_agree_in_one_round() {
    let out = run_case(
        &common::case("t1"),
        &config(AblationMode::Discussion),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    assert_eq!(out.rounds_used, 1);
    assert!(out.consensus_reached);
    assert_eq!(out.final_diagnosis.answer_label.as_deref(), Some("C"));
    assert!(out.final_diagnosis.reviewed);
    assert_eq!(out.team.len(), 3);
}

#[test]
fn dissent_runs_every_round_then_finalizes() {
    let case = common::case("t4");
    for rounds in 1..=3 {
        let mut cfg = config(AblationMode::Discussion);
        cfg.max_rounds = rounds;
        let out = run_case(&case, &cfg, &PromptRegistry::builtin(), &common::backends()).unwrap();
        assert_eq!(out.rounds_used, rounds);
        assert!(!out.consensus_reached);
        assert_eq!(out.final_diagnosis.answer_label.as_deref(), Some("B"));
        let tallies = out.transcript.events.iter().filter(|e| e.stage == Stage::Tally).count();
        assert_eq!(tallies, rounds);
    }
}

#[test]
fn rambling_vote_forces_another_round() {
    let chat = ScriptedChat::new(
        "scripted:ramble",
        [
            vec![ScriptRule::substring("Do you agree with the summery above?", "It depends.")],
            common::script().rules().to_vec(),
        ]
        .concat(),
    );
    let mut cfg = config(AblationMode::Discussion);
    cfg.max_rounds = 2;
    let out = run_case(&common::case("t1"), &cfg, &PromptRegistry::builtin(), &common::backends_with(Arc::new(chat))).unwrap();
    assert_eq!(out.rounds_used, 2);
    assert!(!out.consensus_reached);
}

#[test]
fn direct_text_case_makes_one_call() {
    let out = run_case(
        &common::case("t2"),
        &config(AblationMode::Direct),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    assert_eq!(out.transcript.chat_call_count(), 1);
    assert_eq!(out.final_diagnosis.answer_label.as_deref(), Some("A"));
}

#[test]
fn direct_media_case_attaches_media_without_a_description_call() {
    let out = run_case(
        &common::case("i1"),
        &config(AblationMode::Direct),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    let reqs: Vec<_> = out.transcript.chat_requests().collect();
    assert_eq!(reqs.len(), 1);
    assert!(reqs[0].1.media.is_some());
}

#[test]
fn unparseable_single_shot_answer_is_kept_as_text() {
    let out = run_case(
        &common::case("t6"),
        &config(AblationMode::Direct),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    assert_eq!(out.final_diagnosis.answer_label, None);
    assert_eq!(out.final_diagnosis.answer_text, "It depends on the diet.");
}

#[test]
fn retrieval_mode_injects_the_summary_for_specialists_only() {
    let out = run_case(
        &common::case("i1"),
        &config(AblationMode::Retrieval),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    let t = &out.transcript;
    let opine: Vec<_> = t.chat_requests().filter(|(e, _)| e.stage == Stage::Opine).collect();
    assert!(!opine.is_empty());
    assert!(opine.iter().all(|(_, r)| r.full_text().contains("RETRIEVED-EVIDENCE")));
    let rad: Vec<_> = t.chat_requests().filter(|(e, _)| e.stage == Stage::Radiology).collect();
    assert_eq!(rad.len(), 1);
    assert!(!rad[0].1.full_text().contains("RETRIEVED-EVIDENCE"));
}

#[test]
fn discussion_mode_has_no_summary_section() {
    let out = run_case(
        &common::case("t1"),
        &config(AblationMode::Discussion),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    assert!(!out.transcript.has_retrieval());
    for (_, req) in out.transcript.chat_requests() {
        assert!(!req.full_text().contains("Retrieved evidence summary"));
    }
}

#[test]
fn failures_are_recorded_in_the_transcript() {
    let chat = ScriptedChat::new("scripted:empty", Vec::new());
    let err = run_case(
        &common::case("t1"),
        &config(AblationMode::Discussion),
        &PromptRegistry::builtin(),
        &common::backends_with(Arc::new(chat)),
    )
    .unwrap_err();
    assert!(matches!(err.error, PipelineError::Agent(_)));
    assert!(matches!(err.transcript.outcome, Some(Outcome::Failed { .. })));
    assert!(err
        .transcript
        .events
        .iter()
        .any(|e| matches!(e.payload, EventPayload::BackendError { .. })));
}

#[test]
fn missing_media_file_fails_the_case() {
    let mut case = common::case("i1");
    case.media_path = Some("media/absent.png".into());
    let err = run_case(&case, &config(AblationMode::Discussion), &PromptRegistry::builtin(), &common::backends()).unwrap_err();
    assert!(err.error.to_string().contains("absent.png"), "{}", err.error);
}

#[test]
fn discernment_generates_three_and_selects_one() {
    let (run, transcript) = run_discernment(
        &common::case("t1"),
        &PipelineConfig::default(),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap();
    assert_eq!(run.generated, [Some("C".into()), Some("B".into()), Some("C".into())]);
    assert_eq!(run.selected.as_deref(), Some("C"));
    assert_eq!(run.correct_count(), 2);
    let seeds: Vec<_> = transcript
        .chat_requests()
        .filter(|(e, _)| e.stage == Stage::Generate)
        .map(|(_, r)| (r.seed, r.temperature))
        .collect();
    assert_eq!(seeds, [(Some(0), 0.7), (Some(1), 0.7), (Some(2), 0.7)]);
}

#[test]
fn discernment_needs_options_and_gold() {
    let err = run_discernment(
        &common::case("t5"),
        &PipelineConfig::default(),
        &PromptRegistry::builtin(),
        &common::backends(),
    )
    .unwrap_err();
    assert!(matches!(err.error, PipelineError::NotDiscernible(_)));
}

#[test]
fn rerunning_gives_identical_bytes() {
    let prompts = PromptRegistry::builtin();
    for case in common::cases() {
        let cfg = config(AblationMode::Retrieval);
        let a = run_case(&case, &cfg, &prompts, &common::backends()).unwrap().transcript.to_json();
        let b = run_case(&case, &cfg, &prompts, &common::backends()).unwrap().transcript.to_json();
        assert_eq!(a, b, "{}", case.id);
    }
}
