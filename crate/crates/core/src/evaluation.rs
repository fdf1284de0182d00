//! Dataset ingestion, scoring, and the evaluation metrics.
//!
//! Every fraction is an exact [`Ratio`]; an empty denominator yields
//! [`Metric::NotApplicable`] rather than zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backends;
use crate::case::{validate_case, CaseViolation, MedicalCase};
use crate::config::{AblationMode, PipelineConfig};
use crate::model::FinalDiagnosis;
use crate::pipeline::{self, DiscernmentRun};
use crate::prompts::PromptRegistry;
use crate::transcript::{Outcome, Transcript};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read dataset {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("line {line}: {}", .violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationError { line: usize, violations: Vec<CaseViolation> },
    #[error("line {line}: duplicate case id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("case `{0}` has no gold answer")]
    NoGold(String),
    #[error("result sets cover different cases")]
    CaseSetMismatch,
    #[error("no transcript contains retrieval events")]
    NoRetrievalEvents,
    #[error("no case has a correct answer among its generations")]
    EmptyAfterFilter,
    #[error("sweep needs at least one value")]
    EmptySweep,
}

/// An exact fraction, or an explicit marker that the denominator was empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Value(Ratio<u64>),
    NotApplicable,
}

impl Metric {
    pub fn from_counts(numer: u64, denom: u64) -> Self {
        if denom == 0 {
            Metric::NotApplicable
        } else {
            Metric::Value(Ratio::new(numer, denom))
        }
    }

    pub fn ratio(&self) -> Option<Ratio<u64>> {
        match self {
            Metric::Value(r) => Some(*r),
            Metric::NotApplicable => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.ratio().map(|r| *r.numer() as f64 / *r.denom() as f64)
    }

    /// Percentage with one decimal.
    pub fn percent(&self) -> String {
        match self.as_f64() {
            Some(v) => format!("{:.1}", v * 100.0),
            None => "n/a".into(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(r) => write!(f, "{r}"),
            Metric::NotApplicable => f.write_str("n/a"),
        }
    }
}

/// One case per non-blank line. Line numbers in errors are 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<MedicalCase>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<MedicalCase>, EvalError> {
    let mut cases = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let case: MedicalCase = serde_json::from_str(raw).map_err(|e| EvalError::ParseError {
            line,
            reason: e.to_string(),
        })?;
        let case = validate_case(case).map_err(|violations| EvalError::ValidationError { line, violations })?;
        if !ids.insert(case.id.clone()) {
            return Err(EvalError::DuplicateId { line, id: case.id });
        }
        cases.push(case);
    }
    Ok(cases)
}

fn normalize(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Label equality for option cases; normalized text equality otherwise.
pub fn score_answer(predicted: &FinalDiagnosis, case: &MedicalCase) -> Result<bool, EvalError> {
    let gold = case.gold_answer.as_deref().ok_or_else(|| EvalError::NoGold(case.id.clone()))?;
    if case.options.is_empty() {
        Ok(normalize(&predicted.answer_text) == normalize(gold))
    } else {
        Ok(predicted.answer_label.as_deref() == Some(gold))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub predicted: Option<String>,
    pub gold: Option<String>,
    /// `None` for unlabeled cases. Failed cases with a gold count as wrong.
    pub correct: Option<bool>,
    pub rounds_used: usize,
    pub consensus_reached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CaseResult {
    /// Result reconstructed from a finalized transcript.
    pub fn from_transcript(case: &MedicalCase, transcript: &Transcript) -> Self {
        let gold = case.gold_answer.clone();
        match &transcript.outcome {
            Some(Outcome::Completed {
                final_diagnosis,
                rounds_used,
                consensus_reached,
                ..
            }) => CaseResult {
                case_id: case.id.clone(),
                predicted: Some(final_diagnosis.predicted().to_string()),
                correct: score_answer(final_diagnosis, case).ok(),
                gold,
                rounds_used: *rounds_used,
                consensus_reached: *consensus_reached,
                error: None,
            },
            Some(Outcome::Failed { error }) => CaseResult {
                case_id: case.id.clone(),
                predicted: None,
                correct: gold.as_ref().map(|_| false),
                gold,
                rounds_used: 0,
                consensus_reached: false,
                error: Some(error.clone()),
            },
            None => CaseResult {
                case_id: case.id.clone(),
                predicted: None,
                correct: gold.as_ref().map(|_| false),
                gold,
                rounds_used: 0,
                consensus_reached: false,
                error: Some("transcript not finalized".into()),
            },
        }
    }
}

/// Fraction of labeled results that are correct.
pub fn accuracy(results: &[CaseResult]) -> Metric {
    let labeled: Vec<bool> = results.iter().filter_map(|r| r.correct).collect();
    Metric::from_counts(labeled.iter().filter(|c| **c).count() as u64, labeled.len() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub mode: AblationMode,
    pub n_cases: usize,
    pub accuracy: Metric,
    pub per_case: Vec<CaseResult>,
}

impl EvalReport {
    pub fn new(dataset_id: impl Into<String>, mode: AblationMode, per_case: Vec<CaseResult>) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            mode,
            n_cases: per_case.len(),
            accuracy: accuracy(&per_case),
            per_case,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.per_case.iter().filter(|r| r.error.is_some())
    }
}

fn correctness_map(results: &[CaseResult]) -> BTreeMap<&str, bool> {
    results
        .iter()
        .map(|r| (r.case_id.as_str(), r.correct == Some(true)))
        .collect()
}

/// Among cases Direct answers correctly, the fraction MAM also answers
/// correctly.
pub fn consistency(direct: &[CaseResult], mam: &[CaseResult]) -> Result<Metric, EvalError> {
    let d = correctness_map(direct);
    let m = correctness_map(mam);
    if d.len() != direct.len() || !d.keys().eq(m.keys()) || m.len() != mam.len() {
        return Err(EvalError::CaseSetMismatch);
    }
    let base: Vec<&str> = d.iter().filter(|(_, ok)| **ok).map(|(id, _)| *id).collect();
    let both = base.iter().filter(|id| m[**id]).count();
    Ok(Metric::from_counts(both as u64, base.len() as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: Metric,
    /// `(case_id, retrieved content contains the gold)`, in transcript order.
    pub per_case: Vec<(String, bool)>,
}

/// Whether the gold answer text appears in the retrieved titles and
/// snippets (normalized substring match).
pub fn retrieval_hit(transcript: &Transcript, case: &MedicalCase) -> Option<bool> {
    let gold = normalize(case.gold_text()?);
    if gold.is_empty() {
        return Some(false);
    }
    let content: String = transcript
        .search_results()
        .map(|r| format!("{} {} ", r.title, r.snippet))
        .collect();
    Some(format!(" {} ", normalize(&content)).contains(&format!(" {gold} ")))
}

/// Fraction of labeled cases whose retrieved content contains the gold.
pub fn retrieval_recall(transcripts: &[Transcript], cases: &[MedicalCase]) -> Result<RecallReport, EvalError> {
    if !transcripts.iter().any(Transcript::has_retrieval) {
        return Err(EvalError::NoRetrievalEvents);
    }
    let by_id: BTreeMap<&str, &MedicalCase> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut per_case = Vec::new();
    for t in transcripts {
        let case = by_id.get(t.case_id.as_str()).ok_or(EvalError::CaseSetMismatch)?;
        if let Some(hit) = retrieval_hit(t, case) {
            per_case.push((t.case_id.clone(), hit));
        }
    }
    let hits = per_case.iter().filter(|(_, h)| *h).count();
    Ok(RecallReport {
        recall: Metric::from_counts(hits as u64, per_case.len() as u64),
        per_case,
    })
}

/// Accuracy restricted to the cases whose retrieval contained the gold.
pub fn answer_correct_given_recall(recall: &RecallReport, results: &[CaseResult]) -> Metric {
    let hits: BTreeSet<&str> = recall
        .per_case
        .iter()
        .filter(|(_, h)| *h)
        .map(|(id, _)| id.as_str())
        .collect();
    let correct = results
        .iter()
        .filter(|r| hits.contains(r.case_id.as_str()) && r.correct == Some(true))
        .count();
    Metric::from_counts(correct as u64, hits.len() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscernmentMetrics {
    /// Mean probability that a uniform pick among the generations is correct.
    pub expectation: Metric,
    /// Fraction of kept cases whose selection is correct.
    pub reasoning: Metric,
    pub kept: usize,
    pub total: usize,
}

/// Keeps runs with at least one correct generation, then scores them.
pub fn discernment_metrics(runs: &[DiscernmentRun]) -> Result<DiscernmentMetrics, EvalError> {
    let kept: Vec<&DiscernmentRun> = runs
        .iter()
        .filter(|r| r.correct_count() > 0 && !r.generated.is_empty())
        .collect();
    if kept.is_empty() {
        return Err(EvalError::EmptyAfterFilter);
    }
    let sum: Ratio<u64> = kept
        .iter()
        .map(|r| Ratio::new(r.correct_count() as u64, r.generated.len() as u64))
        .fold(Ratio::from_integer(0), |a, b| a + b);
    let n = kept.len() as u64;
    Ok(DiscernmentMetrics {
        expectation: Metric::Value(sum / Ratio::from_integer(n)),
        reasoning: Metric::from_counts(kept.iter().filter(|r| r.selected_correct()).count() as u64, n),
        kept: kept.len(),
        total: runs.len(),
    })
}

/// A pipeline run over a case set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Finalized transcripts, in case order.
    pub transcripts: Vec<Transcript>,
}

/// Runs every case, at most `jobs` concurrently. Output order follows the
/// input order regardless of `jobs`.
pub fn evaluate(
    dataset_id: &str,
    cases: &[MedicalCase],
    config: &PipelineConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    jobs: usize,
) -> Evaluation {
    let transcripts = map_cases(cases, jobs, |case| match pipeline::run_case(case, config, prompts, backends) {
        Ok(outcome) => outcome.transcript,
        Err(failure) => failure.transcript,
    });
    let per_case = cases
        .iter()
        .zip(&transcripts)
        .map(|(c, t)| CaseResult::from_transcript(c, t))
        .collect();
    Evaluation {
        report: EvalReport::new(dataset_id, config.ablation_mode, per_case),
        transcripts,
    }
}

/// Applies `f` to every case on up to `jobs` threads, keeping input order.
pub fn map_cases<T, F>(cases: &[MedicalCase], jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&MedicalCase) -> T + Sync,
{
    let jobs = jobs.clamp(1, cases.len().max(1));
    if jobs == 1 {
        return cases.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..cases.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = cases.get(i) else { break };
                let out = f(case);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|s| s.expect("every case ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rounds,
    Roles,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Rounds => "rounds",
            SweepAxis::Roles => "roles",
        }
    }

    pub fn apply(self, config: &PipelineConfig, value: usize) -> PipelineConfig {
        let mut c = config.clone();
        match self {
            SweepAxis::Rounds => c.max_rounds = value,
            SweepAxis::Roles => c.n_specialists = value,
        }
        c
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rounds" => Ok(SweepAxis::Rounds),
            "roles" => Ok(SweepAxis::Roles),
            other => Err(format!("unknown sweep axis `{other}` (expected rounds or roles)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub accuracy: Metric,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// One evaluation per value of `axis`, everything else frozen. Points come
/// back sorted by value; duplicate values are run once.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    dataset_id: &str,
    cases: &[MedicalCase],
    config: &PipelineConfig,
    axis: SweepAxis,
    values: &[usize],
    prompts: &PromptRegistry,
    backends: &Backends,
    jobs: usize,
) -> Result<(SweepReport, Vec<Evaluation>), EvalError> {
    let values: BTreeSet<usize> = values.iter().copied().collect();
    if values.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut points = Vec::new();
    let mut evaluations = Vec::new();
    for value in values {
        let cfg = axis.apply(config, value);
        let ev = evaluate(dataset_id, cases, &cfg, prompts, backends, jobs);
        points.push(SweepPoint {
            value,
            accuracy: ev.report.accuracy,
            failures: ev.report.failures().count(),
        });
        evaluations.push(ev);
    }
    Ok((SweepReport { axis, points }, evaluations))
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(header)];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.extend(rows.iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

pub fn render_report(report: &EvalReport) -> String {
    let header = ["Dataset", "Mode", "Cases", "Accuracy"].map(String::from);
    let row = vec![
        report.dataset_id.clone(),
        report.mode.column_title().to_string(),
        report.n_cases.to_string(),
        report.accuracy.percent(),
    ];
    let mut out = render_table(&header, &[row]);
    let failed: Vec<&str> = report.failures().map(|r| r.case_id.as_str()).collect();
    if !failed.is_empty() {
        out.push_str(&format!("failed cases: {}\n", failed.join(", ")));
    }
    out
}

/// One row per dataset, columns Direct, +Roles, +Discussion, +Retrieval.
pub fn render_ablation(reports: &[EvalReport]) -> String {
    let mut header = vec!["Dataset".to_string()];
    header.extend(AblationMode::ALL.iter().map(|m| m.column_title().to_string()));
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset_id.as_str()) {
            datasets.push(&r.dataset_id);
        }
    }
    let rows: Vec<Vec<String>> = datasets
        .iter()
        .map(|d| {
            let mut row = vec![d.to_string()];
            for mode in AblationMode::ALL {
                let cell = reports
                    .iter()
                    .find(|r| r.dataset_id == *d && r.mode == mode)
                    .map_or("-".to_string(), |r| r.accuracy.percent());
                row.push(cell);
            }
            row
        })
        .collect();
    render_table(&header, &rows)
}

pub fn render_sweep(report: &SweepReport) -> String {
    let header = [report.axis.as_str().to_string(), "Accuracy".into(), "Failures".into()];
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| vec![p.value.to_string(), p.accuracy.percent(), p.failures.to_string()])
        .collect();
    render_table(&header, &rows)
}

pub fn render_discernment(m: &DiscernmentMetrics) -> String {
    let header = ["Expectation", "Reasoning", "Kept", "Total"].map(String::from);
    let row = vec![
        m.expectation.percent(),
        m.reasoning.percent(),
        m.kept.to_string(),
        m.total.to_string(),
    ];
    render_table(&header, &[row])
}
