//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists (round-tripped through JSON); long runs release the GIL.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use mam_core::backends::{BackendSpecs, Backends};
use mam_core::evaluation;
use mam_core::model::Vote;
use mam_core::runner::{self, RunContext};
use mam_core::{agents, parsing, pipeline, AblationMode, AnswerOption, MedicalCase, PipelineConfig, PromptRegistry, Transcript};

create_exception!(mam, MamError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    MamError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn config_of(config: Option<&Bound<'_, PyAny>>, mode: Option<&str>) -> PyResult<PipelineConfig> {
    let mut c: PipelineConfig = match config {
        Some(obj) => from_py(obj)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = mode {
        c.ablation_mode = m.parse::<AblationMode>().map_err(value_err)?;
    }
    c.validate().map_err(value_err)?;
    Ok(c)
}

fn default_run_id(kind: &str) -> String {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{kind}-{}-{:03}", now.as_secs(), now.subsec_millis())
}

/// Scrubs names, identifiers, dates, phone numbers and emails.
#[pyfunction]
fn anonymize(text: &str) -> String {
    agents::anonymize(text)
}

/// First vocabulary label found in `text`.
#[pyfunction]
fn parse_label(text: &str, vocab: Vec<String>) -> PyResult<String> {
    let vocab: Vec<&str> = vocab.iter().map(String::as_str).collect();
    parsing::parse_label(text, &vocab).map_err(value_err)
}

/// Option label named by a free-text answer. `options` is a list of
/// `(label, text)` pairs.
#[pyfunction]
fn parse_final_answer(text: &str, options: Vec<(String, String)>) -> PyResult<String> {
    let options: Vec<AnswerOption> = options.into_iter().map(|(l, t)| AnswerOption::new(l, t)).collect();
    parsing::parse_final_answer(text, &options).map_err(value_err)
}

/// Whether a vote reply endorses the report.
#[pyfunction]
fn parse_vote(text: &str) -> bool {
    parsing::parse_vote(text)
}

/// Role list (`[{"name", "responsibilities"}]`) from a referral reply.
#[pyfunction]
fn parse_roles<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &parsing::parse_roles(text).map_err(value_err)?)
}

/// `(endorsements, unanimous)` for a list of yes/no votes.
#[pyfunction]
fn tally_votes(votes: Vec<bool>) -> PyResult<(usize, bool)> {
    let votes: Vec<Vote> = votes
        .into_iter()
        .enumerate()
        .map(|(i, value)| Vote {
            voter: format!("voter {i}"),
            value,
            raw: String::new(),
        })
        .collect();
    pipeline::tally_votes(&votes, votes.len()).map_err(err)
}

#[pyfunction]
fn template_ids() -> Vec<String> {
    mam_core::TemplateId::ALL.iter().map(|t| t.as_str().to_string()).collect()
}

/// Placeholder names of a built-in template, in order of first use.
#[pyfunction]
fn template_slots(id: &str) -> PyResult<Vec<String>> {
    Ok(PromptRegistry::builtin().get(id.parse().map_err(value_err)?).placeholders.clone())
}

#[pyfunction]
fn render_template(id: &str, bindings: HashMap<String, String>) -> PyResult<String> {
    let pairs: Vec<(&str, &str)> = bindings.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    PromptRegistry::builtin()
        .render(id.parse().map_err(value_err)?, &pairs)
        .map_err(value_err)
}

/// Content hash of the built-in templates, as recorded in run manifests.
#[pyfunction]
fn template_hash() -> String {
    PromptRegistry::builtin().content_hash()
}

#[pyfunction]
fn default_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &PipelineConfig::default())
}

/// Returns the case unchanged, or raises `ValueError` listing every violation.
#[pyfunction]
fn validate_case<'py>(case: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let c: MedicalCase = from_py(case)?;
    match mam_core::validate_case(c) {
        Ok(c) => to_py(case.py(), &c),
        Err(v) => Err(value_err(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))),
    }
}

#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &evaluation::load_dataset(&path).map_err(err)?)
}

/// Checks a transcript's digest chain; raises `MamError` when broken.
#[pyfunction]
fn verify_transcript(json: &str) -> PyResult<()> {
    Transcript::from_json(json).and_then(|t| t.verify()).map_err(err)
}

fn backends(backend: String, search_backend: String, cache_dir: Option<PathBuf>, media_root: PathBuf) -> PyResult<Backends> {
    let specs = BackendSpecs {
        chat: backend,
        multimodal: None,
        search: search_backend,
        cache_dir,
        media_root,
    };
    specs.build().map_err(err)
}

/// Runs one case. Returns a dict with `final_answer`, `rounds_used`,
/// `consensus_reached` and `transcript`, or `error` and `transcript`.
#[pyfunction]
#[pyo3(signature = (case, backend, search_backend = "none".to_string(), config = None, mode = None, media_root = PathBuf::from(".")))]
fn run_case<'py>(
    case: &Bound<'py, PyAny>,
    backend: String,
    search_backend: String,
    config: Option<&Bound<'py, PyAny>>,
    mode: Option<&str>,
    media_root: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    let py = case.py();
    let c: MedicalCase = from_py(case)?;
    let config = config_of(config, mode)?;
    let b = backends(backend, search_backend, None, media_root)?;
    let out = py.detach(|| pipeline::run_case(&c, &config, &PromptRegistry::builtin(), &b));
    let value = match out {
        Ok(o) => serde_json::json!({
            "case_id": o.case_id,
            "final_answer": o.final_diagnosis.answer_label,
            "rounds_used": o.rounds_used,
            "consensus_reached": o.consensus_reached,
            "transcript": o.transcript,
        }),
        Err(f) => serde_json::json!({
            "case_id": f.case_id,
            "error": f.error.to_string(),
            "transcript": f.transcript,
        }),
    };
    to_py(py, &value)
}

struct RunArgs {
    dataset: PathBuf,
    cases: Vec<MedicalCase>,
    backends: Backends,
    out: PathBuf,
    run_id: String,
    config: PipelineConfig,
    jobs: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_args(
    kind: &str,
    dataset: PathBuf,
    backend: String,
    search_backend: String,
    out: PathBuf,
    run_id: Option<String>,
    config: Option<&Bound<'_, PyAny>>,
    mode: Option<&str>,
    jobs: usize,
    cache_dir: Option<PathBuf>,
    media_root: Option<PathBuf>,
) -> PyResult<RunArgs> {
    let cases = evaluation::load_dataset(&dataset).map_err(err)?;
    let media_root = media_root.unwrap_or_else(|| dataset.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    Ok(RunArgs {
        cases,
        backends: backends(backend, search_backend, cache_dir, media_root)?,
        out,
        run_id: run_id.unwrap_or_else(|| default_run_id(kind)),
        config: config_of(config, mode)?,
        jobs: jobs.max(1),
        dataset,
    })
}

impl RunArgs {
    fn ctx<'a>(&'a self, prompts: &'a PromptRegistry) -> RunContext<'a> {
        RunContext {
            dataset_path: &self.dataset,
            cases: &self.cases,
            prompts,
            backends: &self.backends,
            jobs: self.jobs,
        }
    }
}

/// Evaluates a dataset into `out/run_id`. Returns `{"dir", "report"}`.
#[pyfunction]
#[pyo3(signature = (dataset, backend, search_backend = "none".to_string(), out = PathBuf::from("runs"), run_id = None, config = None, mode = None, jobs = 1, cache_dir = None, media_root = None))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    backend: String,
    search_backend: String,
    out: PathBuf,
    run_id: Option<String>,
    config: Option<&Bound<'py, PyAny>>,
    mode: Option<&str>,
    jobs: usize,
    cache_dir: Option<PathBuf>,
    media_root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let a = run_args("run", dataset, backend, search_backend, out, run_id, config, mode, jobs, cache_dir, media_root)?;
    let prompts = PromptRegistry::builtin();
    let o = py
        .detach(|| runner::run(&a.ctx(&prompts), &a.out, &a.run_id, &a.config))
        .map_err(err)?;
    to_py(py, &serde_json::json!({ "dir": o.dir, "report": o.report }))
}

/// All four ablation modes with a shared cache (default `out/cache`).
/// Returns `{"dir", "table", "reports"}`.
#[pyfunction]
#[pyo3(signature = (dataset, backend, search_backend = "none".to_string(), out = PathBuf::from("runs"), run_id = None, config = None, jobs = 1, cache_dir = None, media_root = None))]
#[allow(clippy::too_many_arguments)]
fn ablate<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    backend: String,
    search_backend: String,
    out: PathBuf,
    run_id: Option<String>,
    config: Option<&Bound<'py, PyAny>>,
    jobs: usize,
    cache_dir: Option<PathBuf>,
    media_root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cache_dir = cache_dir.or_else(|| Some(out.join("cache")));
    let a = run_args("ablate", dataset, backend, search_backend, out, run_id, config, None, jobs, cache_dir, media_root)?;
    let prompts = PromptRegistry::builtin();
    let o = py
        .detach(|| runner::ablate(&a.ctx(&prompts), &a.out, &a.run_id, &a.config))
        .map_err(err)?;
    to_py(py, &serde_json::json!({ "dir": o.dir, "table": o.table, "reports": o.reports }))
}

/// Re-executes a run from its transcripts. Returns the number of cases
/// verified; raises `MamError` on divergence.
#[pyfunction]
fn replay(py: Python<'_>, run_dir: PathBuf) -> PyResult<usize> {
    let prompts = PromptRegistry::builtin();
    py.detach(|| runner::replay(&run_dir, &prompts)).map_err(err)
}

#[pymodule]
fn mam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MamError", m.py().get_type::<MamError>())?;
    m.add_function(wrap_pyfunction!(anonymize, m)?)?;
    m.add_function(wrap_pyfunction!(parse_label, m)?)?;
    m.add_function(wrap_pyfunction!(parse_final_answer, m)?)?;
    m.add_function(wrap_pyfunction!(parse_vote, m)?)?;
    m.add_function(wrap_pyfunction!(parse_roles, m)?)?;
    m.add_function(wrap_pyfunction!(tally_votes, m)?)?;
    m.add_function(wrap_pyfunction!(template_ids, m)?)?;
    m.add_function(wrap_pyfunction!(template_slots, m)?)?;
    m.add_function(wrap_pyfunction!(render_template, m)?)?;
    m.add_function(wrap_pyfunction!(template_hash, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(validate_case, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(verify_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(run_case, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
