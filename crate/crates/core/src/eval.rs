//! Batch evaluation: memory construction per batch setting, case scoring
//! (Acc, Hop-Acc, Recall of edited facts) and report output.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cases::CaseLibrary;
use crate::controller::{CaseSelection, Engine, SolveResult};
use crate::dataset::EvalCase;
use crate::embedding::Embedder;
use crate::error::{MemoryError, SolveError};
use crate::llm::{LlmBackend, Usage};
use crate::memory::EditedFactMemory;
use crate::model::{normalize_entity, EngineConfig, FactEdit};
use crate::prompts::PromptCatalog;

/// How many cases share one edited-fact memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSetting {
    OneEdited,
    HundredEdited,
    AllEdited,
}

impl BatchSetting {
    pub fn batch_size(self, total: usize) -> usize {
        match self {
            BatchSetting::OneEdited => 1,
            BatchSetting::HundredEdited => 100,
            BatchSetting::AllEdited => total.max(1),
        }
    }

    /// Consecutive index ranges, one per memory group.
    pub fn groups(self, total: usize) -> Vec<Range<usize>> {
        let size = self.batch_size(total);
        (0..total)
            .step_by(size)
            .map(|start| start..(start + size).min(total))
            .collect()
    }
}

impl FromStr for BatchSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" | "one" | "one_edited" => Ok(BatchSetting::OneEdited),
            "100" | "hundred" | "hundred_edited" => Ok(BatchSetting::HundredEdited),
            "all" | "all_edited" => Ok(BatchSetting::AllEdited),
            other => Err(format!("unknown batch setting `{other}` (expected 1, 100 or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub solved: bool,
    pub path_exact: bool,
    pub recall_fraction: f64,
}

/// A predicted chain element. Subject and relation are unknown for steps
/// answered from parametric knowledge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedTriple {
    pub subject: Option<String>,
    pub relation: Option<String>,
    pub object: String,
}

/// Maps a trace onto triples: retrieved steps take subject and relation
/// from their edit; other steps inherit the previous answer as subject and
/// leave the relation unknown.
pub fn predicted_chain(result: &SolveResult) -> Vec<PredictedTriple> {
    let mut previous: Option<&str> = None;
    result
        .trace
        .iter()
        .map(|step| {
            let triple = match &step.retrieved_edit {
                Some(edit) => PredictedTriple {
                    subject: Some(edit.subject.clone()),
                    relation: Some(edit.relation.clone()),
                    object: step.answer.clone(),
                },
                None => PredictedTriple {
                    subject: previous.map(str::to_string),
                    relation: None,
                    object: step.answer.clone(),
                },
            };
            previous = Some(&step.answer);
            triple
        })
        .collect()
}

fn chain_matches(result: &SolveResult, case: &EvalCase) -> bool {
    let predicted = predicted_chain(result);
    predicted.len() == case.gold_chain.len()
        && predicted.iter().zip(&case.gold_chain).all(|(p, g)| {
            let object_ok = normalize_entity(&p.object) == normalize_entity(&g.object);
            match &p.relation {
                Some(rel) => {
                    object_ok
                        && normalize_entity(rel) == normalize_entity(&g.relation)
                        && p.subject.as_deref().map(normalize_entity)
                            == Some(normalize_entity(&g.subject))
                }
                None => object_ok,
            }
        })
}

fn answer_matches(answer: &str, case: &EvalCase) -> bool {
    let answer = normalize_entity(answer);
    !answer.is_empty()
        && std::iter::once(&case.gold_answer)
            .chain(&case.gold_aliases)
            .any(|gold| normalize_entity(gold) == answer)
}

fn recall_of(result: &SolveResult, case: &EvalCase) -> f64 {
    let required: HashSet<_> = case.edits.iter().map(FactEdit::key).collect();
    if required.is_empty() {
        return 1.0;
    }
    let retrieved: HashSet<_> = result.retrieved_edits().map(FactEdit::key).collect();
    required.intersection(&retrieved).count() as f64 / required.len() as f64
}

/// Scores one case from the solves of its paraphrases. A case is solved if
/// any paraphrase's answer matches the gold answer or an alias, path-exact
/// if any trace reproduces the gold chain, and its recall is the best
/// per-paraphrase fraction of required edits retrieved.
pub fn score_case(case: &EvalCase, results: &[SolveResult]) -> CaseScore {
    CaseScore {
        solved: results.iter().any(|r| answer_matches(&r.final_answer, case)),
        path_exact: results.iter().any(|r| chain_matches(r, case)),
        recall_fraction: results
            .iter()
            .map(|r| recall_of(r, case))
            .fold(0.0, f64::max),
    }
}

/// Placeholder for a paraphrase whose solve aborted.
fn failed_result(question: &str) -> SolveResult {
    SolveResult {
        question: question.to_string(),
        final_answer: String::new(),
        trace: Vec::new(),
        retrieved_edit_count: 0,
        backtrack_count: 0,
        guidance_uses: Default::default(),
        truncated: false,
        stack_depth_at_exit: 0,
        case_hit: None,
        usage: Usage::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub hops: usize,
    pub edits: usize,
    pub solved: bool,
    pub path_exact: bool,
    pub recall_fraction: f64,
    pub answers: Vec<String>,
    pub errors: Vec<String>,
    /// Failed solves caused by an unreachable or failing backend.
    pub backend_failures: usize,
    pub case_guided_questions: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub seconds: f64,
    pub traces: Vec<SolveResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: BatchSetting,
    pub cases: usize,
    pub acc: f64,
    pub hop_acc: f64,
    pub recall: f64,
    /// Questions (paraphrases) that received a case-library demonstration.
    pub case_guided_questions: usize,
    pub fact_guided_steps: usize,
    pub backtracks: usize,
    pub aborted_solves: usize,
    pub backend_failures: usize,
    pub usage: Usage,
    pub seconds: f64,
    pub config: EngineConfig,
    pub per_case: Vec<CaseReport>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "Acc {:.1} Hop-Acc {:.1} Recall {:.1}",
            self.acc, self.hop_acc, self.recall
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(path, json)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record([
            "case_id", "hops", "edits", "solved", "path_exact", "recall", "tokens_in",
            "tokens_out", "seconds",
        ])?;
        for c in &self.per_case {
            writer.write_record([
                c.case_id.clone(),
                c.hops.to_string(),
                c.edits.to_string(),
                c.solved.to_string(),
                c.path_exact.to_string(),
                format!("{:.4}", c.recall_fraction),
                c.tokens_in.to_string(),
                c.tokens_out.to_string(),
                format!("{:.4}", c.seconds),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Everything besides the cases that shapes an evaluation run.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub config: EngineConfig,
    pub case_selection: CaseSelection,
    /// Worker threads; values below 2 run sequentially.
    pub parallelism: usize,
    /// Edits outside the evaluated cases that share every batch memory in
    /// the 100- and all-edited settings.
    pub extra_edits: Vec<FactEdit>,
}

/// Backends and prompts an evaluation runs against.
pub struct EvalContext<'a> {
    pub llm: &'a dyn LlmBackend,
    pub fact_embedder: Arc<dyn Embedder>,
    pub prompts: &'a PromptCatalog,
}

/// Builds the edited-fact memory of each batch group. Later edits to the
/// same `(subject, relation)` slot replace earlier ones.
pub fn build_memories(
    cases: &[EvalCase],
    setting: BatchSetting,
    extra_edits: &[FactEdit],
    embedder: &Arc<dyn Embedder>,
) -> Result<Vec<(Range<usize>, EditedFactMemory)>, MemoryError> {
    setting
        .groups(cases.len())
        .into_iter()
        .map(|range| {
            let mut memory = EditedFactMemory::new(Arc::clone(embedder));
            for case in &cases[range.clone()] {
                for edit in &case.edits {
                    memory.insert(edit.clone())?;
                }
            }
            if setting != BatchSetting::OneEdited {
                for edit in extra_edits {
                    memory.insert(edit.clone())?;
                }
            }
            Ok((range, memory))
        })
        .collect()
}

fn evaluate_case(
    case: &EvalCase,
    engine: &Engine<'_>,
) -> (CaseReport, Vec<SolveResult>, usize) {
    let started = Instant::now();
    let mut results = Vec::with_capacity(case.questions.len());
    let mut errors = Vec::new();
    let mut aborted = 0;
    let mut backend_failures = 0;
    for question in &case.questions {
        match engine.solve(question) {
            Ok(r) => results.push(r),
            Err(e) => {
                tracing::warn!(case = %case.case_id, error = %e, "solve failed");
                errors.push(e.to_string());
                aborted += 1;
                backend_failures += usize::from(e.is_backend_failure());
                let mut placeholder = failed_result(question);
                if let SolveError::Aborted { partial_trace, .. } = e {
                    placeholder.trace = partial_trace;
                }
                results.push(placeholder);
            }
        }
    }
    let score = score_case(case, &results);
    let usage = results.iter().fold(Usage::default(), |mut acc, r| {
        acc.calls += r.usage.calls;
        acc.input_tokens += r.usage.input_tokens;
        acc.output_tokens += r.usage.output_tokens;
        acc
    });
    let report = CaseReport {
        case_id: case.case_id.clone(),
        hops: case.hop_count,
        edits: case.edits.len(),
        solved: score.solved,
        path_exact: score.path_exact,
        recall_fraction: score.recall_fraction,
        answers: results.iter().map(|r| r.final_answer.clone()).collect(),
        errors,
        backend_failures,
        case_guided_questions: results.iter().filter(|r| r.case_hit.is_some()).count(),
        tokens_in: usage.input_tokens,
        tokens_out: usage.output_tokens,
        seconds: started.elapsed().as_secs_f64(),
        traces: results.clone(),
    };
    (report, results, aborted)
}

/// Solves every paraphrase of every case under `setting` and aggregates
/// the metrics. Failed solves are recorded and count as unsolved.
///
/// When `library` is present and not frozen, each solved paraphrase is
/// appended to it as a new case record; this forces sequential execution.
pub fn run_eval(
    cases: &[EvalCase],
    setting: BatchSetting,
    options: &EvalOptions,
    ctx: &EvalContext<'_>,
    mut library: Option<&mut CaseLibrary>,
) -> Result<EvalReport, SolveError> {
    options.config.validate()?;
    let started = Instant::now();
    let memories = build_memories(cases, setting, &options.extra_edits, &ctx.fact_embedder)?;
    let appending = library.as_ref().is_some_and(|l| !l.is_frozen());
    let mut slots: Vec<Option<(CaseReport, usize)>> = vec![None; cases.len()];

    for (range, memory) in &memories {
        if appending {
            for index in range.clone() {
                let lib = library.as_deref_mut().expect("library present when appending");
                let (report, results, aborted) = {
                    let mut engine = Engine::new(memory, ctx.llm, ctx.prompts, &options.config)
                        .with_case_selection(options.case_selection);
                    engine = engine.with_library(lib);
                    evaluate_case(&cases[index], &engine)
                };
                for result in results.iter().filter(|r| answer_matches(&r.final_answer, &cases[index])) {
                    if result.trace.is_empty() {
                        continue;
                    }
                    let record = crate::model::CaseRecord {
                        question: result.question.clone(),
                        steps: result.trace.clone(),
                        final_answer: result.final_answer.clone(),
                        succeeded: true,
                    };
                    if let Err(e) = lib.append(record) {
                        tracing::debug!(error = %e, "skipping case record");
                    }
                }
                slots[index] = Some((report, aborted));
            }
            continue;
        }

        let mut engine = Engine::new(memory, ctx.llm, ctx.prompts, &options.config)
            .with_case_selection(options.case_selection);
        if let Some(lib) = library.as_deref() {
            engine = engine.with_library(lib);
        }
        let workers = options.parallelism.max(1).min(range.len().max(1));
        if workers == 1 {
            for index in range.clone() {
                let (report, _, aborted) = evaluate_case(&cases[index], &engine);
                slots[index] = Some((report, aborted));
            }
        } else {
            let next = AtomicUsize::new(range.start);
            let done = Mutex::new(Vec::new());
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let index = next.fetch_add(1, Ordering::SeqCst);
                        if index >= range.end {
                            break;
                        }
                        let (report, _, aborted) = evaluate_case(&cases[index], &engine);
                        done.lock().expect("worker panicked").push((index, report, aborted));
                    });
                }
            });
            for (index, report, aborted) in done.into_inner().expect("worker panicked") {
                slots[index] = Some((report, aborted));
            }
        }
    }

    let mut per_case = Vec::with_capacity(cases.len());
    let mut aborted_solves = 0;
    for slot in slots {
        let (report, aborted) = slot.expect("every case evaluated");
        aborted_solves += aborted;
        per_case.push(report);
    }
    Ok(aggregate(setting, &options.config, per_case, aborted_solves, started.elapsed().as_secs_f64()))
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn aggregate(
    setting: BatchSetting,
    config: &EngineConfig,
    per_case: Vec<CaseReport>,
    aborted_solves: usize,
    seconds: f64,
) -> EvalReport {
    let n = per_case.len();
    let mut usage = Usage::default();
    let mut fact_guided_steps = 0;
    let mut backtracks = 0;
    for trace in per_case.iter().flat_map(|c| &c.traces) {
        usage.calls += trace.usage.calls;
        usage.input_tokens += trace.usage.input_tokens;
        usage.output_tokens += trace.usage.output_tokens;
        fact_guided_steps += trace.guidance_uses.fact;
        backtracks += trace.backtrack_count;
    }
    let recall = if n == 0 {
        0.0
    } else {
        100.0 * per_case.iter().map(|c| c.recall_fraction).sum::<f64>() / n as f64
    };
    EvalReport {
        setting,
        cases: n,
        acc: percent(per_case.iter().filter(|c| c.solved).count(), n),
        hop_acc: percent(per_case.iter().filter(|c| c.path_exact).count(), n),
        recall,
        case_guided_questions: per_case.iter().map(|c| c.case_guided_questions).sum(),
        fact_guided_steps,
        backtracks,
        aborted_solves,
        backend_failures: per_case.iter().map(|c| c.backend_failures).sum(),
        usage,
        seconds,
        config: config.clone(),
        per_case,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecompositionStep, FactTriple};

    fn case() -> EvalCase {
        let e1 = FactEdit::new("A", "r1", "", "B", "What is r1 of A?", "A r1 B").unwrap();
        let e2 = FactEdit::new("B", "r2", "", "France", "What is r2 of B?", "B r2 France").unwrap();
        EvalCase {
            case_id: "c".into(),
            questions: vec!["q1".into(), "q2".into(), "q3".into()],
            gold_answer: "France".into(),
            gold_aliases: vec!["French Republic".into()],
            edits: vec![e1, e2],
            gold_chain: vec![
                FactTriple::new("A", "r1", "B").unwrap(),
                FactTriple::new("B", "r2", "France").unwrap(),
            ],
            hop_count: 2,
            hop_questions: vec![],
        }
    }

    fn result(answer: &str, steps: Vec<DecompositionStep>) -> SolveResult {
        let mut r = failed_result("q");
        r.final_answer = answer.into();
        r.retrieved_edit_count = steps.iter().filter(|s| s.retrieved_edit.is_some()).count();
        r.trace = steps;
        r
    }

    #[test]
    fn any_of_three_with_normalization() {
        let c = case();
        let rs = [result("Paris", vec![]), result("france", vec![]), result("?", vec![])];
        assert!(score_case(&c, &rs).solved);
        let rs = [result("the french republic.", vec![]), result("", vec![]), result("", vec![])];
        assert!(!score_case(&c, &rs).solved);
        let rs = [result("French  Republic.", vec![]), result("", vec![]), result("", vec![])];
        assert!(score_case(&c, &rs).solved);
    }

    #[test]
    fn recall_is_fraction_of_required_edits() {
        let c = case();
        let one = DecompositionStep::new("What is r1 of A?", "B").with_edit(c.edits[0].clone());
        let rs = [
            result("x", vec![one.clone(), DecompositionStep::new("?", "x")]),
            result("", vec![]),
            result("", vec![]),
        ];
        assert_eq!(score_case(&c, &rs).recall_fraction, 0.5);
    }

    #[test]
    fn answer_and_path_combinations() {
        let c = case();
        let s1 = DecompositionStep::new("r1 of A?", "B").with_edit(c.edits[0].clone());
        let s2_good = DecompositionStep::new("r2 of B?", "France").with_edit(c.edits[1].clone());
        let s2_bad = DecompositionStep::new("r2 of B?", "Spain");
        let s2_param = DecompositionStep::new("r2 of B?", "France");
        let blank = || result("", vec![]);
        // (answer match, path match) for each constructed trace
        let cases = [
            (result("France", vec![s1.clone(), s2_good.clone()]), true, true),
            (result("French Republic", vec![s1.clone(), s2_bad.clone()]), true, false),
            (result("Spain", vec![s1.clone(), s2_param.clone()]), false, true),
            (result("Spain", vec![s1.clone(), s2_bad]), false, false),
        ];
        for (r, solved, path) in cases {
            let score = score_case(&c, &[r, blank(), blank()]);
            assert_eq!((score.solved, score.path_exact), (solved, path));
        }
        // wrong length never matches
        let score = score_case(&c, &[result("France", vec![s2_good]), blank(), blank()]);
        assert!(!score.path_exact);
    }

    #[test]
    fn retrieved_step_must_match_subject_and_relation() {
        let c = case();
        let wrong = FactEdit::new("Z", "r1", "", "B", "What is r1 of Z?", "s").unwrap();
        let steps = vec![
            DecompositionStep::new("?", "B").with_edit(wrong),
            DecompositionStep::new("?", "France"),
        ];
        let blank = || result("", vec![]);
        assert!(!score_case(&c, &[result("France", steps), blank(), blank()]).path_exact);
    }

    #[test]
    fn hundred_partition_arithmetic() {
        let groups = BatchSetting::HundredEdited.groups(2002);
        assert_eq!(groups.len(), 21);
        assert!(groups[..20].iter().all(|g| g.len() == 100));
        assert_eq!(groups[20].len(), 2);
        assert_eq!(BatchSetting::AllEdited.groups(2002), vec![0..2002]);
        assert_eq!(BatchSetting::OneEdited.groups(3), vec![0..1, 1..2, 2..3]);
        assert!(BatchSetting::AllEdited.groups(0).is_empty());
    }

    #[test]
    fn parses_settings() {
        assert_eq!("1".parse::<BatchSetting>().unwrap(), BatchSetting::OneEdited);
        assert_eq!("100".parse::<BatchSetting>().unwrap(), BatchSetting::HundredEdited);
        assert_eq!("all".parse::<BatchSetting>().unwrap(), BatchSetting::AllEdited);
        assert!("7".parse::<BatchSetting>().is_err());
    }
}
