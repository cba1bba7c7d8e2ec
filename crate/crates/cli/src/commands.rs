use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use irake_core::cases::{sample_records, CaseLibrary};
use irake_core::controller::{CaseSelection, Engine};
use irake_core::dataset::{dataset_to_json, load_dataset, DatasetStats, EvalCase};
use irake_core::embedding::{CachedEmbedder, Embedder, HashBagEmbedder, RemoteEmbedder};
use irake_core::error::SolveError;
use irake_core::eval::{run_eval, BatchSetting, EvalContext, EvalOptions};
use irake_core::llm::{HttpChatBackend, LlmBackend, ScriptedBackend};
use irake_core::memory::EditedFactMemory;
use irake_core::model::{CaseRecord, FactEdit, GuidedBy};
use irake_core::prompts::PromptCatalog;
use irake_core::synth;
use irake_core::transport;
use serde::Serialize;

use crate::config::{require_dataset, write_json, RunConfigFile};
use crate::ExitError;

const DEFAULT_TIMEOUT_SECS: u64 = 60;

fn api_key(cfg: &RunConfigFile) -> Option<String> {
    cfg.backends
        .api_key_env_var
        .as_deref()
        .and_then(|var| std::env::var(var).ok())
        .filter(|k| !k.is_empty())
}

fn timeout(cfg: &RunConfigFile) -> Duration {
    Duration::from_secs(cfg.backends.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS))
}

pub fn llm_backend(cfg: &RunConfigFile) -> anyhow::Result<Box<dyn LlmBackend>> {
    if let Some(path) = &cfg.backends.script {
        let script = ScriptedBackend::load(path).map_err(ExitError::config)?;
        return Ok(Box::new(script));
    }
    if cfg.backends.offline {
        return Err(ExitError::config(
            "offline mode needs a scripted backend: set backends.script or pass --script",
        )
        .into());
    }
    let endpoint = cfg.backends.chat_endpoint.as_deref().ok_or_else(|| {
        ExitError::config("missing chat endpoint: set backends.chat_endpoint, pass --chat-endpoint, or use --script")
    })?;
    let model = cfg
        .backends
        .chat_model
        .as_deref()
        .ok_or_else(|| ExitError::config("missing chat model: set backends.chat_model or pass --chat-model"))?;
    let backend = HttpChatBackend::new(endpoint, model, api_key(cfg), timeout(cfg))
        .map_err(|e| ExitError::backend(e.to_string()))?;
    Ok(Box::new(backend))
}

pub fn embedder(cfg: &RunConfigFile) -> anyhow::Result<Arc<dyn Embedder>> {
    match (&cfg.backends.embed_endpoint, cfg.backends.offline) {
        (Some(endpoint), false) => {
            let model = cfg.backends.embed_model.as_deref().ok_or_else(|| {
                ExitError::config("missing embedding model: set backends.embed_model or pass --embed-model")
            })?;
            let remote = RemoteEmbedder::new(endpoint, model, api_key(cfg), timeout(cfg))
                .map_err(|e| ExitError::backend(e.to_string()))?;
            Ok(Arc::new(CachedEmbedder::new(remote)))
        }
        _ => Ok(Arc::new(HashBagEmbedder::default())),
    }
}

fn prompts(cfg: &RunConfigFile) -> anyhow::Result<PromptCatalog> {
    match &cfg.paths.prompts_dir {
        Some(dir) => PromptCatalog::from_dir(dir).map_err(|e| ExitError::config(e.to_string()).into()),
        None => Ok(PromptCatalog::builtin()),
    }
}

fn load_cases(path: &Path) -> anyhow::Result<Vec<EvalCase>> {
    load_dataset(path).map_err(|e| ExitError::config(format!("cannot load dataset {}: {e}", path.display())).into())
}

fn load_edits(path: &Path) -> anyhow::Result<Vec<FactEdit>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExitError::config(format!("cannot read edits {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ExitError::config(format!("invalid edits file {}: {e}", path.display())).into())
}

fn load_library(cfg: &RunConfigFile, embedder: &Arc<dyn Embedder>) -> anyhow::Result<Option<CaseLibrary>> {
    let Some(path) = &cfg.paths.case_library else {
        return Ok(None);
    };
    let library = CaseLibrary::load(Arc::clone(embedder), path)
        .map_err(|e| ExitError::config(format!("cannot load case library {}: {e}", path.display())))?;
    Ok(Some(library))
}

fn solve_error(e: SolveError) -> anyhow::Error {
    match e {
        SolveError::Aborted { .. } => ExitError::aborted(e.to_string()).into(),
        SolveError::Config(_) | SolveError::EmptyQuestion => ExitError::config(e.to_string()).into(),
        e if e.is_backend_failure() => ExitError::backend(e.to_string()).into(),
        e => anyhow::Error::new(e),
    }
}

/// Fails if an offline run touched the network.
fn check_offline(cfg: &RunConfigFile) -> anyhow::Result<()> {
    let sent = transport::requests_sent();
    if cfg.backends.offline && sent > 0 {
        anyhow::bail!("offline run sent {sent} network requests");
    }
    Ok(())
}

pub struct SolveArgs {
    pub question: Option<String>,
    pub edits: Option<PathBuf>,
    pub case_id: Option<String>,
    pub random_case: bool,
    pub print_trace: bool,
}

pub fn solve(cfg: &RunConfigFile, args: SolveArgs) -> anyhow::Result<()> {
    let embedder = embedder(cfg)?;
    let case = match &args.case_id {
        Some(id) => {
            let path = require_dataset(cfg)?;
            let case = load_cases(path)?
                .into_iter()
                .find(|c| &c.case_id == id)
                .ok_or_else(|| ExitError::config(format!("case `{id}` not found in {}", path.display())))?;
            Some(case)
        }
        None => None,
    };
    let edits = match (&args.edits, &case) {
        (Some(path), _) => load_edits(path)?,
        (None, Some(case)) => case.edits.clone(),
        (None, None) => {
            return Err(ExitError::config("no edited facts given: pass --edits FILE or --case-id with a dataset").into())
        }
    };
    let case_question = case.and_then(|c| c.questions.into_iter().next());
    let question = args
        .question
        .or(case_question)
        .ok_or_else(|| ExitError::config("no question given"))?;
    let memory = EditedFactMemory::from_edits(Arc::clone(&embedder), edits.iter())
        .map_err(|e| ExitError::config(e.to_string()))?;
    let library = load_library(cfg, &embedder)?;
    let llm = llm_backend(cfg)?;
    let prompts = prompts(cfg)?;

    let mut engine = Engine::new(&memory, llm.as_ref(), &prompts, &cfg.engine);
    if let Some(lib) = &library {
        engine = engine.with_library(lib);
    }
    if args.random_case {
        engine = engine.with_case_selection(CaseSelection::Random {
            seed: cfg.seed.unwrap_or(0),
        });
    }
    let result = engine.solve(&question).map_err(solve_error)?;
    check_offline(cfg)?;

    println!("{}", result.final_answer);
    if args.print_trace {
        for (i, step) in result.trace.iter().enumerate() {
            let source = match &step.retrieved_edit {
                Some(e) => format!("edit: {} / {}", e.subject, e.relation),
                None => "model".to_string(),
            };
            let guided = match step.guided_by {
                GuidedBy::None => "none",
                GuidedBy::Fact => "fact",
                GuidedBy::Case => "case",
                GuidedBy::Both => "both",
            };
            eprintln!("{}. {} -> {} [{source}; guided_by {guided}]", i + 1, step.subquestion, step.answer);
        }
        if result.backtrack_count > 0 {
            eprintln!("backtracks: {}", result.backtrack_count);
        }
    }
    if let Some(path) = &cfg.paths.report_out {
        #[derive(Serialize)]
        struct TraceFile<'a> {
            config: &'a irake_core::model::EngineConfig,
            result: &'a irake_core::controller::SolveResult,
        }
        write_json(path, &TraceFile { config: &cfg.engine, result: &result })?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub setting: BatchSetting,
    pub limit: Option<usize>,
    pub extra_edits: Option<PathBuf>,
    pub online_append: bool,
    pub save_library: Option<PathBuf>,
    pub random_case: bool,
}

fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

pub fn eval(cfg: &RunConfigFile, args: EvalArgs) -> anyhow::Result<()> {
    let mut cases = load_cases(require_dataset(cfg)?)?;
    if let Some(limit) = args.limit {
        cases.truncate(limit);
    }
    let extra_edits = match &args.extra_edits {
        Some(path) => load_edits(path)?,
        None => Vec::new(),
    };
    let embedder = embedder(cfg)?;
    let mut library = load_library(cfg, &embedder)?;
    if args.online_append {
        let lib = library.get_or_insert_with(|| CaseLibrary::new(Arc::clone(&embedder)));
        lib.unfreeze();
    }
    let llm = llm_backend(cfg)?;
    let prompts = prompts(cfg)?;
    let ctx = EvalContext {
        llm: llm.as_ref(),
        fact_embedder: Arc::clone(&embedder),
        prompts: &prompts,
    };
    let options = EvalOptions {
        config: cfg.engine.clone(),
        case_selection: if args.random_case {
            CaseSelection::Random {
                seed: cfg.seed.unwrap_or(0),
            }
        } else {
            CaseSelection::MostSimilar
        },
        parallelism: cfg.parallel.unwrap_or(1),
        extra_edits,
    };
    let report = run_eval(&cases, args.setting, &options, &ctx, library.as_mut()).map_err(solve_error)?;
    check_offline(cfg)?;

    let json = cfg
        .paths
        .report_out
        .clone()
        .unwrap_or_else(|| PathBuf::from("irake-report.json"));
    write_json(&json, &report)?;
    report
        .write_csv(csv_path(&json))
        .with_context(|| format!("writing {}", csv_path(&json).display()))?;
    if let (Some(lib), Some(path)) = (&library, &args.save_library) {
        lib.save(path).with_context(|| format!("writing {}", path.display()))?;
    }

    println!("{}", report.summary_line());
    println!(
        "case-guided questions {} (theta {:.2}), fact-guided steps {}, backtracks {}, failed solves {}",
        report.case_guided_questions,
        cfg.engine.case_similarity_threshold,
        report.fact_guided_steps,
        report.backtracks,
        report.aborted_solves
    );
    println!("report: {} and {}", json.display(), csv_path(&json).display());
    if report.backend_failures > 0 {
        return Err(ExitError::backend(format!(
            "{} solves failed because a backend was unavailable",
            report.backend_failures
        ))
        .into());
    }
    Ok(())
}

pub fn build_library(cfg: &RunConfigFile, sample_size: usize, out: &Path) -> anyhow::Result<()> {
    let cases = load_cases(require_dataset(cfg)?)?;
    let records: Vec<CaseRecord> = cases.iter().map(|c| c.oracle_record(0)).collect();
    let sampled = sample_records(&records, sample_size, cfg.seed.unwrap_or(0));
    write_json(out, &sampled).map_err(|e| ExitError::config(format!("{e:#}")))?;
    println!("wrote {} of {} records to {}", sampled.len(), records.len(), out.display());
    Ok(())
}

pub fn inspect_library(cfg: &RunConfigFile, question: Option<&str>, top: usize) -> anyhow::Result<()> {
    let embedder = embedder(cfg)?;
    let library = load_library(cfg, &embedder)?
        .ok_or_else(|| ExitError::config("missing case library: set paths.case_library or pass --case-library"))?;
    println!("{} records", library.len());
    let Some(question) = question else {
        for (i, record) in library.records().enumerate() {
            println!("{i}\t{} steps\t{}", record.steps.len(), record.question);
        }
        return Ok(());
    };
    let sims = library.similarities(question).map_err(|e| ExitError::backend(e.to_string()))?;
    let mut ranked: Vec<(usize, f64)> = sims.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let records: Vec<&CaseRecord> = library.records().collect();
    for (i, sim) in ranked.into_iter().take(top) {
        println!("{i}\t{sim:.4}\t{}", records[i].question);
    }
    let theta = cfg.engine.case_similarity_threshold;
    match library.lookup(question, theta).map_err(|e| ExitError::backend(e.to_string()))? {
        Some(hit) => println!("lookup at theta {theta:.2}: record {} ({:.4})", hit.index, hit.similarity),
        None => println!("lookup at theta {theta:.2}: no case"),
    }
    Ok(())
}

pub fn print_config(cfg: &RunConfigFile) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn write_run_config(dir: &Path, dataset: &str) -> anyhow::Result<()> {
    let cfg = RunConfigFile {
        backends: crate::config::Backends {
            script: Some("script.json".into()),
            offline: true,
            ..Default::default()
        },
        paths: crate::config::Paths {
            dataset: Some(dataset.into()),
            ..Default::default()
        },
        ..Default::default()
    };
    let text = toml::to_string_pretty(&cfg)?;
    std::fs::write(dir.join("config.toml"), text).context("writing config.toml")
}

pub fn scenario(name: &str, out: &Path) -> anyhow::Result<()> {
    let scenario = synth::scenario(name).ok_or_else(|| {
        ExitError::config(format!("unknown scenario `{name}` (known: {})", synth::SCENARIOS.join(", ")))
    })?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("edits.json"), &scenario.memory_edits())?;
    write_json(&out.join("script.json"), &scenario.script.to_spec())?;
    write_json(&out.join("case.json"), &dataset_to_json(std::slice::from_ref(&scenario.case)))?;
    write_run_config(out, "case.json")?;
    println!("wrote scenario `{}` to {}", scenario.name, out.display());
    println!("question: {}", scenario.case.questions[0]);
    Ok(())
}

pub fn synth(cfg: &RunConfigFile, cases: usize, distractors: usize, conflicting: usize, out: &Path) -> anyhow::Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let generated = synth::generate_cases(cases, seed, "synth-");
    let script = synth::oracle_script(&generated, cfg.engine.pre_retrieval_n.max(10));
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("cases.json"), &dataset_to_json(&generated))?;
    write_json(&out.join("script.json"), &script.to_spec())?;
    if distractors > 0 {
        let extra = synth::distractor_edits(&generated, distractors, conflicting, seed.wrapping_add(1));
        write_json(&out.join("distractors.json"), &extra)?;
    }
    write_run_config(out, "cases.json")?;
    let stats = DatasetStats::from_cases(&generated);
    println!("wrote {} cases to {}", stats.cases, out.display());
    println!("by hops {:?}, by edits {:?}", stats.by_hops, stats.by_edit_count);
    Ok(())
}
