//! Run directories: manifest, per-case transcripts, reports, and replay.
//!
//! ```text
//! <out>/<run_id>/manifest.json
//!               /dataset.jsonl
//!               /transcripts/<case_id>.json
//!               /report.json
//!               /report.txt
//! ```
//! Ablations and sweeps nest one such directory per mode or value.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backends, ReplayChat, ReplaySearch};
use crate::case::MedicalCase;
use crate::config::{AblationMode, PipelineConfig};
use crate::evaluation::{self, EvalError, EvalReport, Evaluation, SweepAxis, SweepReport};
use crate::pipeline::{self, DiscernmentRun};
use crate::prompts::PromptRegistry;
use crate::transcript::{Transcript, TranscriptError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run directory {0} already exists")]
    RunExists(String),
    #[error("no manifest in {0}")]
    MissingManifest(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("transcript {path}: {source}")]
    Transcript { path: String, source: TranscriptError },
    #[error("templates differ from the ones the run used")]
    TemplateMismatch,
    #[error("transcript for unknown case `{0}`")]
    UnknownCase(String),
    #[error("replay of case `{case_id}` diverges{}", .seq.map(|s| format!(" at seq {s}")).unwrap_or_default())]
    ReplayDivergence { case_id: String, seq: Option<u64> },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Evaluation,
    Discernment,
}

/// Backend identities only; never endpoints' credentials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptors {
    pub chat: String,
    pub multimodal: String,
    pub search: String,
}

impl BackendDescriptors {
    pub fn of(backends: &Backends) -> Self {
        Self {
            chat: backends.chat.id().to_string(),
            multimodal: backends.multimodal.id().to_string(),
            search: backends.search.id().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub kind: RunKind,
    pub config: PipelineConfig,
    pub dataset: String,
    pub media_root: String,
    pub backends: BackendDescriptors,
    pub template_hash: String,
}

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_COPY: &str = "dataset.jsonl";
pub const TRANSCRIPTS: &str = "transcripts";

/// Writes through a temp file and a rename so readers never see a torn file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Creates `parent/name`, refusing to reuse an existing directory.
pub fn create_run_dir(parent: &Path, name: &str) -> Result<PathBuf, RunError> {
    std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let dir = parent.join(name);
    match std::fs::create_dir(&dir) {
        Ok(()) => Ok(dir),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::RunExists(dir.display().to_string())),
        Err(e) => Err(io_err(&dir, e)),
    }
}

/// File name for a case transcript; characters unsafe in paths become `_`.
pub fn transcript_file_name(case_id: &str) -> String {
    let safe: String = case_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Shared inputs of every run.
pub struct RunContext<'a> {
    pub dataset_path: &'a Path,
    pub cases: &'a [MedicalCase],
    pub prompts: &'a PromptRegistry,
    pub backends: &'a Backends,
    pub jobs: usize,
}

impl RunContext<'_> {
    pub fn dataset_id(&self) -> String {
        self.dataset_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string()
    }

    fn manifest(&self, run_id: &str, kind: RunKind, config: &PipelineConfig) -> RunManifest {
        RunManifest {
            run_id: run_id.to_string(),
            timestamp: unix_now(),
            kind,
            config: config.clone(),
            dataset: self.dataset_path.display().to_string(),
            media_root: self.backends.media_root.display().to_string(),
            backends: BackendDescriptors::of(self.backends),
            template_hash: self.prompts.content_hash(),
        }
    }

    /// Manifest and dataset snapshot, written before any case runs.
    fn prepare(&self, dir: &Path, run_id: &str, kind: RunKind, config: &PipelineConfig) -> Result<(), RunError> {
        write_json(&dir.join(MANIFEST), &self.manifest(run_id, kind, config))?;
        let snapshot: String = self
            .cases
            .iter()
            .map(|c| serde_json::to_string(c).expect("case serializes") + "\n")
            .collect();
        write_atomic(&dir.join(DATASET_COPY), snapshot.as_bytes())?;
        std::fs::create_dir(dir.join(TRANSCRIPTS)).map_err(|e| io_err(dir, e))
    }
}

fn write_transcripts(dir: &Path, transcripts: &[Transcript]) -> Result<(), RunError> {
    let tdir = dir.join(TRANSCRIPTS);
    for t in transcripts {
        write_atomic(&tdir.join(transcript_file_name(&t.case_id)), t.to_json().as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: EvalReport,
}

/// Evaluates the dataset into a fresh run directory `parent/run_id`.
pub fn run(ctx: &RunContext<'_>, parent: &Path, run_id: &str, config: &PipelineConfig) -> Result<RunOutput, RunError> {
    let dir = create_run_dir(parent, run_id)?;
    ctx.prepare(&dir, run_id, RunKind::Evaluation, config)?;
    let Evaluation { report, transcripts } =
        evaluation::evaluate(&ctx.dataset_id(), ctx.cases, config, ctx.prompts, ctx.backends, ctx.jobs);
    write_transcripts(&dir, &transcripts)?;
    write_json(&dir.join("report.json"), &report)?;
    write_atomic(&dir.join("report.txt"), evaluation::render_report(&report).as_bytes())?;
    Ok(RunOutput { dir, report })
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub dir: PathBuf,
    /// Reports in Direct → Retrieval order.
    pub reports: Vec<EvalReport>,
    pub table: String,
}

/// All four modes, one sub-run each, under `parent/run_id`. Backends should
/// share a response cache so identical requests across modes are answered
/// once.
pub fn ablate(ctx: &RunContext<'_>, parent: &Path, run_id: &str, config: &PipelineConfig) -> Result<AblationOutput, RunError> {
    let dir = create_run_dir(parent, run_id)?;
    let mut reports = Vec::new();
    for mode in AblationMode::ALL {
        let out = run(ctx, &dir, mode.as_str(), &config.clone().with_mode(mode))?;
        reports.push(out.report);
    }
    let table = evaluation::render_ablation(&reports);
    write_json(&dir.join("ablation.json"), &reports)?;
    write_atomic(&dir.join("ablation.txt"), table.as_bytes())?;
    Ok(AblationOutput { dir, reports, table })
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub report: SweepReport,
    pub table: String,
}

/// One sub-run per value, named `<axis>-<value>`.
pub fn sweep(
    ctx: &RunContext<'_>,
    parent: &Path,
    run_id: &str,
    config: &PipelineConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<SweepOutput, RunError> {
    if values.is_empty() {
        return Err(EvalError::EmptySweep.into());
    }
    let dir = create_run_dir(parent, run_id)?;
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    let mut points = Vec::new();
    for value in values {
        let cfg = axis.apply(config, value);
        let out = run(ctx, &dir, &format!("{}-{value}", axis.as_str()), &cfg)?;
        points.push(evaluation::SweepPoint {
            value,
            accuracy: out.report.accuracy,
            failures: out.report.failures().count(),
        });
    }
    let report = SweepReport { axis, points };
    let table = evaluation::render_sweep(&report);
    write_json(&dir.join("sweep.json"), &report)?;
    write_atomic(&dir.join("sweep.txt"), table.as_bytes())?;
    Ok(SweepOutput { dir, report, table })
}

#[derive(Debug, Clone)]
pub struct DiscernmentOutput {
    pub dir: PathBuf,
    pub runs: Vec<DiscernmentRun>,
    /// Case ids that failed, with their errors.
    pub failures: Vec<(String, String)>,
    pub metrics: Result<evaluation::DiscernmentMetrics, String>,
}

pub fn discernment(ctx: &RunContext<'_>, parent: &Path, run_id: &str, config: &PipelineConfig) -> Result<DiscernmentOutput, RunError> {
    let dir = create_run_dir(parent, run_id)?;
    ctx.prepare(&dir, run_id, RunKind::Discernment, config)?;
    let results = evaluation::map_cases(ctx.cases, ctx.jobs, |case| {
        pipeline::run_discernment(case, config, ctx.prompts, ctx.backends)
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut transcripts = Vec::new();
    for r in results {
        match r {
            Ok((run, t)) => {
                runs.push(run);
                transcripts.push(t);
            }
            Err(f) => {
                failures.push((f.case_id.clone(), f.error.to_string()));
                transcripts.push(f.transcript);
            }
        }
    }
    write_transcripts(&dir, &transcripts)?;
    let metrics = evaluation::discernment_metrics(&runs).map_err(|e| e.to_string());
    write_json(
        &dir.join("discernment.json"),
        &serde_json::json!({ "runs": runs, "failures": failures, "metrics": metrics.as_ref().ok() }),
    )?;
    let text = match &metrics {
        Ok(m) => evaluation::render_discernment(m),
        Err(e) => format!("{e}\n"),
    };
    write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    Ok(DiscernmentOutput {
        dir,
        runs,
        failures,
        metrics,
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, RunError> {
    let path = run_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|_| RunError::MissingManifest(run_dir.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

/// Seq of the first event that differs, or `None` when only the outcome
/// or the event count differs.
fn first_divergence(recorded: &Transcript, replayed: &Transcript) -> Option<u64> {
    recorded
        .events
        .iter()
        .zip(&replayed.events)
        .find(|(a, b)| a != b)
        .map(|(a, _)| a.seq)
        .or_else(|| {
            let n = recorded.events.len().min(replayed.events.len());
            (recorded.events.len() != replayed.events.len()).then_some(n as u64 + 1)
        })
}

/// Re-executes every case of a run with its transcript as the response
/// oracle and checks the regenerated transcript is byte-identical.
/// Returns the number of cases verified.
pub fn replay(run_dir: &Path, prompts: &PromptRegistry) -> Result<usize, RunError> {
    let manifest = read_manifest(run_dir)?;
    if manifest.template_hash != prompts.content_hash() {
        return Err(RunError::TemplateMismatch);
    }
    let cases = evaluation::load_dataset(&run_dir.join(DATASET_COPY))?;
    let tdir = run_dir.join(TRANSCRIPTS);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&tdir)
        .map_err(|e| io_err(&tdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    files.sort();
    for path in &files {
        let stored = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let recorded = Transcript::from_json(&stored).map_err(|_| RunError::ReplayDivergence {
            case_id: path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            seq: None,
        })?;
        let case = cases
            .iter()
            .find(|c| c.id == recorded.case_id)
            .ok_or_else(|| RunError::UnknownCase(recorded.case_id.clone()))?;
        let chat = Arc::new(ReplayChat::from_transcript(&recorded));
        let backends = Backends::new(chat.clone(), Arc::new(ReplaySearch::from_transcript(&recorded)))
            .with_multimodal(chat)
            .with_media_root(&manifest.media_root);
        let replayed = match manifest.kind {
            RunKind::Evaluation => match pipeline::run_case(case, &recorded.config, prompts, &backends) {
                Ok(o) => o.transcript,
                Err(f) => f.transcript,
            },
            RunKind::Discernment => match pipeline::run_discernment(case, &recorded.config, prompts, &backends) {
                Ok((_, t)) => t,
                Err(f) => f.transcript,
            },
        };
        if replayed.to_json() != stored {
            return Err(RunError::ReplayDivergence {
                case_id: recorded.case_id.clone(),
                seq: first_divergence(&recorded, &replayed),
            });
        }
    }
    Ok(files.len())
}
