mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mam_core::backends::{Backends, CachedChat, ResponseCache};
use mam_core::evaluation::{evaluate, EvalReport};
use mam_core::runner::{self, RunContext, RunError, RunKind, MANIFEST, TRANSCRIPTS};
use mam_core::transcript::EventPayload;
use mam_core::{AblationMode, MedicalCase, PipelineConfig, PromptRegistry, Transcript};

struct Fixture {
    dataset: PathBuf,
    cases: Vec<MedicalCase>,
    prompts: PromptRegistry,
    backends: Backends,
}

impl Fixture {
    fn new() -> Self {
        Self::with_backends(common::backends())
    }

    fn with_backends(backends: Backends) -> Self {
        Self {
            dataset: common::fixtures().join("dataset.jsonl"),
            cases: common::cases(),
            prompts: PromptRegistry::builtin(),
            backends,
        }
    }

    fn ctx(&self) -> RunContext<'_> {
        RunContext {
            dataset_path: &self.dataset,
            cases: &self.cases,
            prompts: &self.prompts,
            backends: &self.backends,
            jobs: 2,
        }
    }
}

fn mode(m: AblationMode) -> PipelineConfig {
    PipelineConfig::default().with_mode(m)
}

fn transcript_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join(TRANSCRIPTS))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
}

#[test]
fn run_writes_manifest_transcripts_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r1", &mode(AblationMode::Retrieval)).unwrap();
    for f in [MANIFEST, "report.json", "report.txt", "dataset.jsonl"] {
        assert!(out.dir.join(f).is_file(), "{f}");
    }
    assert_eq!(transcript_files(&out.dir).len(), 12);
    let manifest = runner::read_manifest(&out.dir).unwrap();
    assert_eq!(manifest.kind, RunKind::Evaluation);
    assert_eq!(manifest.template_hash, fx.prompts.content_hash());
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, out.report);
    assert!(std::fs::read_to_string(out.dir.join("report.txt")).unwrap().contains("Accuracy"));
}

#[test]
fn run_ids_are_never_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    runner::run(&fx.ctx(), tmp.path(), "same", &mode(AblationMode::Direct)).unwrap();
    assert!(matches!(
        runner::run(&fx.ctx(), tmp.path(), "same", &mode(AblationMode::Direct)),
        Err(RunError::RunExists(_))
    ));
}

#[test]
fn two_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let a = runner::run(&fx.ctx(), tmp.path(), "a", &mode(AblationMode::Retrieval)).unwrap();
    let b = runner::run(&fx.ctx(), tmp.path(), "b", &mode(AblationMode::Retrieval)).unwrap();
    for (x, y) in transcript_files(&a.dir).iter().zip(transcript_files(&b.dir)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(&y).unwrap(), "{}", x.display());
    }
}

#[test]
fn replay_accepts_every_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    for m in AblationMode::ALL {
        let out = runner::run(&fx.ctx(), tmp.path(), m.as_str(), &mode(m)).unwrap();
        assert_eq!(runner::replay(&out.dir, &fx.prompts).unwrap(), 12, "{m:?}");
    }
}

#[test]
fn replay_accepts_discernment_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::discernment(&fx.ctx(), tmp.path(), "d", &PipelineConfig::default()).unwrap();
    assert!(out.dir.join("discernment.json").is_file());
    assert!(runner::replay(&out.dir, &fx.prompts).unwrap() > 0);
}

/// Flips one character of the first chat response in `file` and returns that
/// event's seq.
fn tamper_first_response(file: &Path) -> u64 {
    let mut t = Transcript::from_json(&std::fs::read_to_string(file).unwrap()).unwrap();
    let ev = t
        .events
        .iter_mut()
        .find(|e| matches!(e.payload, EventPayload::ChatResponse { .. }))
        .unwrap();
    let EventPayload::ChatResponse { text, .. } = &mut ev.payload else { unreachable!() };
    let first = text.chars().next().unwrap();
    let replacement = if first == 'x' { 'y' } else { 'x' };
    text.replace_range(..first.len_utf8(), &replacement.to_string());
    let seq = ev.seq;
    std::fs::write(file, t.to_json()).unwrap();
    seq
}

#[test]
fn tampered_response_is_located() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r", &mode(AblationMode::Discussion)).unwrap();
    let file = transcript_files(&out.dir)[3].clone();
    let case_id = Transcript::from_json(&std::fs::read_to_string(&file).unwrap()).unwrap().case_id;
    let seq = tamper_first_response(&file);
    match runner::replay(&out.dir, &fx.prompts) {
        Err(RunError::ReplayDivergence { case_id: c, seq: s }) => assert_eq!((c, s), (case_id, Some(seq))),
        other => panic!("{other:?}"),
    }
}

#[test]
fn any_single_byte_flip_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r", &mode(AblationMode::Direct)).unwrap();
    let file = transcript_files(&out.dir)[0].clone();
    let original = std::fs::read(&file).unwrap();
    for pos in (0..original.len()).step_by(97) {
        let mut bytes = original.clone();
        bytes[pos] ^= 0x01;
        std::fs::write(&file, &bytes).unwrap();
        assert!(runner::replay(&out.dir, &fx.prompts).is_err(), "flip at byte {pos} went unnoticed");
    }
    std::fs::write(&file, &original).unwrap();
    runner::replay(&out.dir, &fx.prompts).unwrap();
}

#[test]
fn replay_needs_the_same_templates() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r", &mode(AblationMode::Direct)).unwrap();
    let other = PromptRegistry::builtin().with_override(mam_core::TemplateId::Direct, "Q: {question}");
    assert!(matches!(runner::replay(&out.dir, &other), Err(RunError::TemplateMismatch)));
}

#[test]
fn missing_manifest_fails_before_anything_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r", &mode(AblationMode::Direct)).unwrap();
    std::fs::remove_file(out.dir.join(MANIFEST)).unwrap();
    assert!(matches!(runner::replay(&out.dir, &fx.prompts), Err(RunError::MissingManifest(_))));
}

#[test]
fn ablation_shares_the_cache_and_matches_direct() {
    let tmp = tempfile::tempdir().unwrap();
    let cached = Arc::new(CachedChat::new(common::script(), ResponseCache::open(tmp.path().join("cache")).unwrap()));
    let stats = cached.stats();
    let fx = Fixture::with_backends(common::backends_with(cached));
    let out = runner::ablate(&fx.ctx(), tmp.path(), "abl", &PipelineConfig::default()).unwrap();

    let modes: Vec<AblationMode> = out.reports.iter().map(|r| r.mode).collect();
    assert_eq!(modes, AblationMode::ALL);
    assert!(out.table.starts_with("Dataset | Direct | +Roles | +Discussion | +Retrieval"));
    for m in AblationMode::ALL {
        assert!(out.dir.join(m.as_str()).join(MANIFEST).is_file());
    }
    assert!(out.dir.join("ablation.json").is_file());
    assert!(stats.hits() > 0, "classification and role generation repeat across modes");

    let direct = evaluate("dataset", &fx.cases, &mode(AblationMode::Direct), &fx.prompts, &common::backends(), 1);
    assert_eq!(out.reports[0].accuracy, direct.report.accuracy);
    for m in AblationMode::ALL {
        runner::replay(&out.dir.join(m.as_str()), &fx.prompts).unwrap();
    }
}

#[test]
fn sweep_writes_one_subrun_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::sweep(
        &fx.ctx(),
        tmp.path(),
        "sw",
        &mode(AblationMode::Discussion),
        mam_core::evaluation::SweepAxis::Roles,
        &[1, 3, 5],
    )
    .unwrap();
    assert_eq!(out.report.points.len(), 3);
    for v in [1, 3, 5] {
        assert!(out.dir.join(format!("roles-{v}")).join(MANIFEST).is_file());
    }
}

#[test]
fn run_files_never_contain_secrets() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = Fixture::new();
    let out = runner::run(&fx.ctx(), tmp.path(), "r", &mode(AblationMode::Retrieval)).unwrap();
    let manifest = std::fs::read_to_string(out.dir.join(MANIFEST)).unwrap();
    for needle in ["api_key", "Authorization", "Bearer"] {
        assert!(!manifest.contains(needle), "{needle}");
    }
}
