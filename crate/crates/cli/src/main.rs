use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mam_core::agents::{gp_classify, CaseSession};
use mam_core::backends::{BackendSpecs, Backends};
use mam_core::evaluation::{self, CaseResult, EvalReport, Metric, SweepAxis};
use mam_core::runner::{self, RunContext, RunKind, DATASET_COPY, TRANSCRIPTS};
use mam_core::{AblationMode, MedicalCase, PipelineConfig, PromptRegistry, Transcript};

#[derive(Parser)]
#[command(name = "mam", version, about = "Multi-agent medical diagnosis runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify each case (modality, body part, disease type) and print JSON lines.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Only classify this case id.
        #[arg(long)]
        case: Option<String>,
    },
    /// Evaluate the dataset in one ablation mode.
    Run(Common),
    /// Evaluate all four ablation modes with a shared response cache.
    Ablate(Common),
    /// Evaluate once per value of rounds or roles.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `rounds` or `roles`.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 1,3,5.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Self-consistency answer selection with expectation and reasoning metrics.
    Discernment(Common),
    /// Re-execute a run from its transcripts and check they are byte-identical.
    Replay {
        run_dir: PathBuf,
        /// Template override directory used by the run.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Recompute metrics from finished run directories.
    Metrics {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Direct-mode run to compute consistency against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSONL dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    roles: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// `scripted:<path>` or `http:<model>`.
    #[arg(long)]
    backend: String,
    /// Backend for calls that carry media. Defaults to the chat backend
    /// (with media enabled for `http:`).
    #[arg(long)]
    multimodal_backend: Option<String>,
    /// `fixture:<path>`, `http`, or `none`.
    #[arg(long, default_value = "none")]
    search_backend: String,
    /// Response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Base directory for relative media paths. Defaults to the dataset's directory.
    #[arg(long)]
    media_root: Option<PathBuf>,
    /// Directory of `<template id>.txt` files overriding built-in templates.
    #[arg(long)]
    templates: Option<PathBuf>,
}

impl Common {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.mode {
            c.ablation_mode = m;
        }
        if let Some(r) = self.rounds {
            c.max_rounds = r;
        }
        if let Some(r) = self.roles {
            c.n_specialists = r;
        }
        if let Some(k) = self.top_k {
            c.retrieval_top_k = k;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.temperature {
            c.temperature = t;
        }
        c.validate()?;
        Ok(c)
    }

    fn media_root(&self) -> PathBuf {
        self.media_root.clone().unwrap_or_else(|| {
            self.dataset
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
        })
    }

    fn backends(&self, default_cache: Option<PathBuf>) -> Result<Backends> {
        let specs = BackendSpecs {
            chat: self.backend.clone(),
            multimodal: self.multimodal_backend.clone(),
            search: self.search_backend.clone(),
            cache_dir: self.cache_dir.clone().or(default_cache),
            media_root: self.media_root(),
        };
        Ok(specs.build()?)
    }

    fn run_id(&self, kind: &str) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            format!("{kind}-{}-{:03}", now.as_secs(), now.subsec_millis())
        })
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn prompts(overrides: Option<&Path>) -> Result<PromptRegistry> {
    Ok(match overrides {
        Some(dir) => PromptRegistry::with_overrides_from(dir)?,
        None => PromptRegistry::builtin(),
    })
}

/// 0 when every case succeeded, 2 when some failed, 1 when all did.
fn status(failed: usize, total: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else if failed < total {
        ExitCode::from(2)
    } else {
        ExitCode::FAILURE
    }
}

fn report_status(reports: &[&EvalReport]) -> ExitCode {
    let failed: usize = reports.iter().map(|r| r.failures().count()).sum();
    let total: usize = reports.iter().map(|r| r.n_cases).sum();
    for r in reports {
        for f in r.failures() {
            eprintln!("{} ({}): {}", f.case_id, r.mode, f.error.as_deref().unwrap_or_default());
        }
    }
    status(failed, total)
}

fn with_context<T>(common: &Common, default_cache: Option<PathBuf>, f: impl FnOnce(&RunContext<'_>) -> Result<T>) -> Result<T> {
    let cases = evaluation::load_dataset(&common.dataset)?;
    let prompts = prompts(common.templates.as_deref())?;
    let backends = common.backends(default_cache)?;
    let ctx = RunContext {
        dataset_path: &common.dataset,
        cases: &cases,
        prompts: &prompts,
        backends: &backends,
        jobs: common.jobs.max(1),
    };
    f(&ctx)
}

fn classify(common: &Common, only: Option<&str>) -> Result<ExitCode> {
    let config = common.pipeline_config()?;
    let prompts = prompts(common.templates.as_deref())?;
    let backends = common.backends(None)?;
    let cases: Vec<MedicalCase> = evaluation::load_dataset(&common.dataset)?
        .into_iter()
        .filter(|c| only.is_none_or(|id| c.id == id))
        .collect();
    if cases.is_empty() {
        bail!("no matching cases");
    }
    let mut failed = 0;
    for case in &cases {
        let mut session = CaseSession::new(case, &config, &prompts, &backends);
        match gp_classify(&mut session) {
            Ok(c) => println!("{}", serde_json::json!({ "case_id": case.id, "classification": c })),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", case.id);
            }
        }
    }
    Ok(status(failed, cases.len()))
}

fn load_transcripts(run_dir: &Path) -> Result<Vec<Transcript>> {
    let dir = run_dir.join(TRANSCRIPTS);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| Transcript::from_json(&read(p)?).with_context(|| format!("transcript {}", p.display())))
        .collect()
}

struct LoadedRun {
    cases: Vec<MedicalCase>,
    transcripts: Vec<Transcript>,
    results: Vec<CaseResult>,
    mode: AblationMode,
}

fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let manifest = runner::read_manifest(run_dir)?;
    if manifest.kind != RunKind::Evaluation {
        bail!("{} is not an evaluation run", run_dir.display());
    }
    let cases = evaluation::load_dataset(&run_dir.join(DATASET_COPY))?;
    let transcripts = load_transcripts(run_dir)?;
    let results = transcripts
        .iter()
        .map(|t| {
            let case = cases
                .iter()
                .find(|c| c.id == t.case_id)
                .ok_or_else(|| anyhow!("transcript for unknown case `{}`", t.case_id))?;
            Ok(CaseResult::from_transcript(case, t))
        })
        .collect::<Result<_>>()?;
    Ok(LoadedRun {
        cases,
        transcripts,
        results,
        mode: manifest.config.ablation_mode,
    })
}

fn show(name: &str, m: &Metric) {
    println!("  {name}: {}", m.percent());
}

fn metrics(run_dirs: &[PathBuf], baseline: Option<&Path>) -> Result<ExitCode> {
    let base = baseline.map(load_run).transpose()?;
    for dir in run_dirs {
        let run = load_run(dir)?;
        println!("{} ({})", dir.display(), run.mode);
        show("accuracy", &evaluation::accuracy(&run.results));
        if run.mode.retrieves() {
            let recall = evaluation::retrieval_recall(&run.transcripts, &run.cases)?;
            show("retrieval recall", &recall.recall);
            show("answer correct | hit", &evaluation::answer_correct_given_recall(&recall, &run.results));
        }
        if let Some(b) = &base {
            show("consistency", &evaluation::consistency(&b.results, &run.results)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Classify { common, case } => classify(&common, case.as_deref()),
        Command::Run(common) => {
            let config = common.pipeline_config()?;
            let out = with_context(&common, None, |ctx| Ok(runner::run(ctx, &common.out, &common.run_id("run"), &config)?))?;
            print!("{}", evaluation::render_report(&out.report));
            println!("run directory: {}", out.dir.display());
            Ok(report_status(&[&out.report]))
        }
        Command::Ablate(common) => {
            let config = common.pipeline_config()?;
            let out = with_context(&common, Some(common.out.join("cache")), |ctx| {
                Ok(runner::ablate(ctx, &common.out, &common.run_id("ablate"), &config)?)
            })?;
            print!("{}", out.table);
            println!("run directory: {}", out.dir.display());
            Ok(report_status(&out.reports.iter().collect::<Vec<_>>()))
        }
        Command::Sweep { common, axis, values } => {
            let config = common.pipeline_config()?;
            let out = with_context(&common, None, |ctx| {
                Ok(runner::sweep(ctx, &common.out, &common.run_id("sweep"), &config, axis, &values)?)
            })?;
            print!("{}", out.table);
            println!("run directory: {}", out.dir.display());
            let failed = out.report.points.iter().map(|p| p.failures).sum::<usize>();
            let total = out.report.points.len() * evaluation::load_dataset(&common.dataset)?.len();
            Ok(status(failed, total))
        }
        Command::Discernment(common) => {
            let config = common.pipeline_config()?;
            let out = with_context(&common, None, |ctx| {
                Ok(runner::discernment(ctx, &common.out, &common.run_id("discernment"), &config)?)
            })?;
            for (id, e) in &out.failures {
                eprintln!("{id}: {e}");
            }
            println!("run directory: {}", out.dir.display());
            match &out.metrics {
                Ok(m) => {
                    print!("{}", evaluation::render_discernment(m));
                    Ok(status(out.failures.len(), out.failures.len() + out.runs.len()))
                }
                Err(e) => {
                    eprintln!("{e}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::Replay { run_dir, templates } => {
            let n = runner::replay(&run_dir, &prompts(templates.as_deref())?)?;
            println!("replayed {n} transcripts: identical");
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { run_dirs, baseline } => metrics(&run_dirs, baseline.as_deref()),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
