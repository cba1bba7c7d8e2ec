//! Acceptance criteria 1-8. Run with
//! `cargo test -p irake-core --test acceptance -- --nocapture`
//! to see one PASS/FAIL/SKIP line per criterion.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irake_core::cases::CaseLibrary;
use irake_core::controller::{CaseSelection, Engine, SolveResult};
use irake_core::dataset::{load_dataset, EvalCase};
use irake_core::embedding::{cosine, Embedder, HashBagEmbedder};
use irake_core::eval::{build_memories, run_eval, score_case, BatchSetting, EvalContext, EvalOptions};
use irake_core::llm::{HttpChatBackend, LlmBackend};
use irake_core::memory::EditedFactMemory;
use irake_core::model::{CaseRecord, DecompositionStep, EngineConfig, FactEdit};
use irake_core::prompts::PromptCatalog;
use irake_core::synth::{self, distractor_edits, generate_cases, oracle_script};

enum Outcome {
    Pass(String),
    Skip(String),
}

fn embedder() -> Arc<dyn Embedder> {
    Arc::new(HashBagEmbedder::default())
}

fn run_criterion(number: usize, title: &str, check: impl FnOnce() -> Outcome) -> bool {
    match catch_unwind(AssertUnwindSafe(check)) {
        Ok(Outcome::Pass(detail)) => {
            println!("criterion {number} PASS  {title}: {detail}");
            true
        }
        Ok(Outcome::Skip(reason)) => {
            println!("criterion {number} SKIP  {title}: {reason}");
            true
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            println!("criterion {number} FAIL  {title}: {message}");
            false
        }
    }
}

fn eval(
    cases: &[EvalCase],
    setting: BatchSetting,
    config: EngineConfig,
    llm: &dyn LlmBackend,
    extra: Vec<FactEdit>,
    library: Option<&mut CaseLibrary>,
) -> irake_core::eval::EvalReport {
    let prompts = PromptCatalog::builtin();
    let ctx = EvalContext {
        llm,
        fact_embedder: embedder(),
        prompts: &prompts,
    };
    let options = EvalOptions {
        config,
        case_selection: CaseSelection::MostSimilar,
        parallelism: 1,
        extra_edits: extra,
    };
    run_eval(cases, setting, &options, &ctx, library).expect("evaluation runs")
}

fn oracle_suite() -> Outcome {
    let started = Instant::now();
    let cases = generate_cases(24, 2024, "oracle-");
    let script = oracle_script(&cases, 10);
    let train = generate_cases(20, 77, "train-");
    let records: Vec<CaseRecord> = train.iter().map(|c| c.oracle_record(0)).collect();
    let mut library = CaseLibrary::from_records(embedder(), records).expect("library");
    library.freeze();

    let mut lines = Vec::new();
    for setting in [BatchSetting::OneEdited, BatchSetting::HundredEdited, BatchSetting::AllEdited] {
        let report = eval(&cases, setting, EngineConfig::default(), &script, vec![], Some(&mut library));
        assert_eq!(report.aborted_solves, 0, "{setting:?}: aborted solves");
        assert!(
            report.acc == 100.0 && report.hop_acc == 100.0 && report.recall == 100.0,
            "{setting:?}: {}",
            report.summary_line()
        );
        lines.push(format!("{setting:?} {}", report.summary_line()));
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "suite took {elapsed:?}");
    Outcome::Pass(format!("24 cases, {} in {:.2}s", lines.join("; "), elapsed.as_secs_f64()))
}

fn solve_scenario(scenario: &synth::Scenario, config: &EngineConfig) -> Vec<SolveResult> {
    let memory = EditedFactMemory::from_edits(embedder(), scenario.memory_edits().iter()).expect("memory");
    let prompts = PromptCatalog::builtin();
    let engine = Engine::new(&memory, &scenario.script, &prompts, config);
    scenario
        .case
        .questions
        .iter()
        .map(|q| engine.solve(q).expect("solve succeeds"))
        .collect()
}

fn edit_skipping() -> Outcome {
    let scenario = synth::olympics();
    let guided = EngineConfig::default();
    let unguided = EngineConfig {
        fact_guidance_enabled: false,
        ..EngineConfig::default()
    };
    let with = solve_scenario(&scenario, &guided);
    let without = solve_scenario(&scenario, &unguided);
    let with_score = score_case(&scenario.case, &with);
    let without_score = score_case(&scenario.case, &without);
    for r in &without {
        assert_eq!(r.final_answer, "North America", "unguided answer");
    }
    assert!(!without_score.solved && without_score.recall_fraction < 1.0, "unguided run should fail");
    for r in &with {
        assert_eq!(r.final_answer, "Asia", "guided answer");
    }
    assert!(with_score.solved && with_score.recall_fraction == 1.0, "guided run should succeed");

    let one = eval(
        std::slice::from_ref(&scenario.case),
        BatchSetting::OneEdited,
        guided,
        &scenario.script,
        vec![],
        None,
    );
    let off = eval(
        std::slice::from_ref(&scenario.case),
        BatchSetting::OneEdited,
        unguided,
        &scenario.script,
        vec![],
        None,
    );
    assert!(one.acc > off.acc && one.recall > off.recall);
    Outcome::Pass(format!(
        "guided Acc {:.0} Recall {:.0} > unguided Acc {:.0} Recall {:.0}",
        one.acc, one.recall, off.acc, off.recall
    ))
}

fn backtracking() -> Outcome {
    let scenario = synth::danse_macabre();
    let on = solve_scenario(&scenario, &EngineConfig::default());
    let off = solve_scenario(
        &scenario,
        &EngineConfig {
            backtracking_enabled: false,
            ..EngineConfig::default()
        },
    );
    for r in &off {
        assert_eq!(r.final_answer, "Philippe of Belgium");
        assert!(r.stack_depth_at_exit >= 1, "stack should be non-empty");
        assert_eq!(r.backtrack_count, 0);
    }
    for r in &on {
        assert_eq!(r.final_answer, "Emmanuel Macron");
        assert_eq!(r.backtrack_count, 1, "exactly one pop");
        assert!(r.retrieved_edits().any(|e| e.subject == "Danse Macabre"));
    }
    let on_score = score_case(&scenario.case, &on);
    let off_score = score_case(&scenario.case, &off);
    assert!(on_score.solved && !off_score.solved);
    Outcome::Pass(format!(
        "no-backtrack answers `{}` with stack depth {}; backtracking pops once and answers `{}`",
        off[0].final_answer, off[0].stack_depth_at_exit, on[0].final_answer
    ))
}

const VOCAB: &[&str] = &[
    "who", "what", "which", "is", "the", "of", "capital", "city", "france", "paris", "river",
    "author", "wrote", "country", "leader", "head", "state", "born", "where", "team", "sport",
    "ocean", "continent", "asia", "europe", "language", "spoken", "company", "founded", "by",
];

fn random_question(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..=8);
    let words: Vec<&str> = (0..len).map(|_| *VOCAB.choose(rng).expect("vocab")).collect();
    format!("{}?", words.join(" "))
}

fn oracle_tokens(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn retrieval_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let emb = embedder();
    let tau = 0.85;
    let mut precise_hits = 0;
    let instances = 1000;
    for instance in 0..instances {
        let size = rng.gen_range(0..30);
        let mut questions: Vec<String> = (0..size).map(|_| random_question(&mut rng)).collect();
        // duplicates force exact ties
        if size > 3 && rng.gen_bool(0.3) {
            let dup = questions[rng.gen_range(0..size)].clone();
            questions.push(dup);
        }
        let edits: Vec<FactEdit> = questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                FactEdit::new(format!("subject {i}"), "relation", "", format!("object {i}"), q.clone(), q.clone())
                    .expect("edit")
            })
            .collect();
        let memory = EditedFactMemory::from_edits(Arc::clone(&emb), edits.iter()).expect("memory");
        let query = if !questions.is_empty() && rng.gen_bool(0.3) {
            let mut q = questions[rng.gen_range(0..questions.len())].clone();
            if rng.gen_bool(0.5) {
                q.push_str(" today");
            }
            q
        } else {
            random_question(&mut rng)
        };
        let n = rng.gen_range(1..=10);

        let qv = emb.embed(&query).expect("embed");
        let mut scored: Vec<(f64, usize)> = questions
            .iter()
            .enumerate()
            .map(|(i, q)| (cosine(&qv, &emb.embed(q).expect("embed")).expect("cosine"), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = scored.iter().take(n).map(|s| s.1).collect();

        let got = memory.pre_retrieve(&query, n).expect("pre-retrieve");
        let got_idx: Vec<usize> = got.iter().map(|s| s.index).collect();
        assert_eq!(got_idx, expected, "instance {instance}: pre-retrieve order");
        for s in &got {
            assert_eq!(s.edit, &edits[s.index]);
        }

        let max = scored.first().map(|s| s.0);
        let argmax: HashSet<usize> = scored
            .iter()
            .filter(|s| Some(s.0) == max && s.0 >= tau)
            .map(|s| s.1)
            .collect();
        if let Some(hit) = memory.precise_retrieve(&query, tau).expect("precise") {
            precise_hits += 1;
            assert!(argmax.contains(&hit.index), "instance {instance}: precise hit outside argmax set");
            let a = oracle_tokens(&query);
            let b = oracle_tokens(&edits[hit.index].atomic_question);
            let shared = a.intersection(&b).count() as f64;
            assert!(shared / a.len().min(b.len()) as f64 >= 0.5);
        }
    }
    assert!(precise_hits > 50, "too few precise hits ({precise_hits}) to be meaningful");
    Outcome::Pass(format!("{instances} instances agree, {precise_hits} precise hits inside argmax set"))
}

fn case_lookup_properties() -> Outcome {
    let train = generate_cases(40, 11, "lib-");
    let records: Vec<CaseRecord> = train
        .iter()
        .flat_map(|c| (0..3).map(move |i| c.oracle_record(i)))
        .collect();
    let library = CaseLibrary::from_records(embedder(), records.clone()).expect("library");
    let queries: Vec<String> = generate_cases(30, 12, "query-")
        .into_iter()
        .flat_map(|c| c.questions)
        .chain(train.iter().map(|c| c.questions[1].replace('?', " please?")))
        .collect();

    let mut previous = usize::MAX;
    let mut counts = Vec::new();
    for step in 0..=20 {
        let theta = step as f64 / 20.0;
        let mut hits = 0;
        for q in &queries {
            let sims = library.similarities(q).expect("similarities");
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            match library.lookup(q, theta).expect("lookup") {
                Some(m) => {
                    assert!(m.similarity >= theta, "similarity below threshold");
                    assert_eq!(m.similarity, best);
                    assert_eq!(sims.iter().position(|&s| s == best), Some(m.index));
                    hits += 1;
                }
                None => assert!(best < theta),
            }
        }
        assert!(hits <= previous, "guided count rose at theta {theta}");
        previous = hits;
        counts.push(hits);
    }
    assert!(counts[0] > counts[20]);

    // guided-question counts through the full evaluation loop
    let cases = generate_cases(12, 13, "sweep-");
    let script = oracle_script(&cases, 10);
    let mut guided = Vec::new();
    for theta in [0.0, 0.5, 0.7, 0.8, 0.9, 1.0] {
        let mut lib = CaseLibrary::from_records(embedder(), records.clone()).expect("library");
        lib.freeze();
        let config = EngineConfig {
            case_similarity_threshold: theta,
            ..EngineConfig::default()
        };
        guided.push(eval(&cases, BatchSetting::OneEdited, config, &script, vec![], Some(&mut lib)).case_guided_questions);
    }
    assert!(guided.windows(2).all(|w| w[0] >= w[1]), "{guided:?}");

    let mut tied: Vec<CaseRecord> = records[..6].to_vec();
    tied.push(records[2].clone());
    tied.push(records[2].clone());
    let tie_lib = CaseLibrary::from_records(embedder(), tied).expect("library");
    for _ in 0..100 {
        let m = tie_lib.lookup(&records[2].question, 0.8).expect("lookup").expect("hit");
        assert_eq!(m.index, 2);
    }
    Outcome::Pass(format!(
        "hits by theta 0.00..1.00: {:?}; eval guided questions {:?}; tie-break stable",
        counts, guided
    ))
}

fn brute_normalize(s: &str) -> String {
    let mut out = String::new();
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    while out.ends_with(|c: char| c.is_ascii_punctuation() || c == ' ') {
        out.pop();
    }
    out
}

fn brute_solved(case: &EvalCase, results: &[SolveResult]) -> bool {
    let mut golds = vec![brute_normalize(&case.gold_answer)];
    golds.extend(case.gold_aliases.iter().map(|a| brute_normalize(a)));
    results.iter().any(|r| {
        let a = brute_normalize(&r.final_answer);
        !a.is_empty() && golds.contains(&a)
    })
}

fn brute_path(case: &EvalCase, results: &[SolveResult]) -> bool {
    results.iter().any(|r| {
        if r.trace.len() != case.gold_chain.len() {
            return false;
        }
        for (step, gold) in r.trace.iter().zip(&case.gold_chain) {
            if brute_normalize(&step.answer) != brute_normalize(&gold.object) {
                return false;
            }
            if let Some(e) = &step.retrieved_edit {
                if brute_normalize(&e.subject) != brute_normalize(&gold.subject)
                    || brute_normalize(&e.relation) != brute_normalize(&gold.relation)
                {
                    return false;
                }
            }
        }
        true
    })
}

fn brute_recall(case: &EvalCase, results: &[SolveResult]) -> f64 {
    let key = |e: &FactEdit| {
        (
            brute_normalize(&e.subject),
            brute_normalize(&e.relation),
            brute_normalize(&e.new_object),
        )
    };
    let mut required: Vec<_> = case.edits.iter().map(key).collect();
    required.sort();
    required.dedup();
    if required.is_empty() {
        return 1.0;
    }
    let mut best = 0.0;
    for r in results {
        let found = required
            .iter()
            .filter(|k| r.trace.iter().filter_map(|s| s.retrieved_edit.as_ref()).any(|e| key(e) == **k))
            .count();
        let fraction = found as f64 / required.len() as f64;
        if fraction > best {
            best = fraction;
        }
    }
    best
}

fn mangle(rng: &mut ChaCha8Rng, text: &str) -> String {
    match rng.gen_range(0..5) {
        0 => text.to_uppercase(),
        1 => format!("  {}  .", text.replace(' ', "   ")),
        2 => format!("{text}!"),
        3 => format!("the {text}"),
        _ => text.to_string(),
    }
}

fn random_result(rng: &mut ChaCha8Rng, case: &EvalCase, decoys: &[FactEdit]) -> SolveResult {
    let mut trace = Vec::new();
    for (hop, gold) in case.gold_chain.iter().enumerate() {
        let edit = case
            .edits
            .iter()
            .find(|e| e.slot() == (brute_normalize(&gold.subject), brute_normalize(&gold.relation)));
        let answer = if rng.gen_bool(0.8) { mangle(rng, &gold.object) } else { "Nowhere".to_string() };
        let retrieved = match rng.gen_range(0..4) {
            0 => None,
            1 => decoys.choose(rng).cloned(),
            _ => edit.cloned(),
        };
        trace.push(DecompositionStep {
            subquestion: case.hop_question(hop),
            answer,
            retrieved_edit: retrieved,
            guided_by: Default::default(),
        });
    }
    match rng.gen_range(0..6) {
        0 => {
            trace.pop();
        }
        1 => trace.push(DecompositionStep::new("extra?", "Extra")),
        _ => {}
    }
    let final_answer = match rng.gen_range(0..5) {
        0 => mangle(rng, &case.gold_answer),
        1 => case.gold_aliases.first().cloned().unwrap_or_default(),
        2 => String::new(),
        3 => case.gold_answer.clone(),
        _ => "Wrong Answer".into(),
    };
    SolveResult {
        question: case.questions[0].clone(),
        final_answer,
        retrieved_edit_count: trace.iter().filter(|s| s.retrieved_edit.is_some()).count(),
        trace,
        backtrack_count: 0,
        guidance_uses: Default::default(),
        truncated: false,
        stack_depth_at_exit: 0,
        case_hit: None,
        usage: Default::default(),
    }
}

fn metric_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cases = generate_cases(100, 66, "metric-");
    let decoys = distractor_edits(&cases, 20, 10, 3);
    let (mut solved, mut paths, mut recall_sum) = (0, 0, 0.0);
    for case in &cases {
        let count = rng.gen_range(1..=3);
        let results: Vec<SolveResult> = (0..count).map(|_| random_result(&mut rng, case, &decoys)).collect();
        let score = score_case(case, &results);
        assert_eq!(score.solved, brute_solved(case, &results), "{}: solved", case.case_id);
        assert_eq!(score.path_exact, brute_path(case, &results), "{}: path", case.case_id);
        assert_eq!(score.recall_fraction, brute_recall(case, &results), "{}: recall", case.case_id);
        solved += usize::from(score.solved);
        paths += usize::from(score.path_exact);
        recall_sum += score.recall_fraction;
    }
    assert!(solved > 0 && solved < 100 && paths > 0 && paths < 100, "fixtures lack variety");
    Outcome::Pass(format!(
        "100 fixtures agree exactly ({solved} solved, {paths} path-exact, mean recall {:.3})",
        recall_sum / 100.0
    ))
}

fn batch_invariants() -> Outcome {
    let cases = generate_cases(200, 200, "batch-");
    let groups = BatchSetting::HundredEdited.groups(cases.len());
    assert_eq!(groups.len(), 2);
    let mut seen = vec![0usize; cases.len()];
    for g in &groups {
        for i in g.clone() {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1), "every case in exactly one group");
    let memories = build_memories(&cases, BatchSetting::HundredEdited, &[], &embedder()).expect("memories");
    for (range, memory) in &memories {
        let expected: usize = cases[range.clone()].iter().map(|c| c.edits.len()).sum();
        assert_eq!(memory.len(), expected);
        assert!(cases[range.clone()].iter().flat_map(|c| &c.edits).all(|e| memory.contains(e)));
    }
    assert_eq!(BatchSetting::AllEdited.groups(200).len(), 1);
    assert_eq!(BatchSetting::OneEdited.groups(200).len(), 200);

    let suite = generate_cases(20, 21, "distract-");
    let script = oracle_script(&suite, 10);
    let distractors = distractor_edits(&suite, 200, 8, 22);
    let one = eval(&suite, BatchSetting::OneEdited, EngineConfig::default(), &script, distractors.clone(), None);
    let all = eval(&suite, BatchSetting::AllEdited, EngineConfig::default(), &script, distractors, None);
    assert!(all.recall <= one.recall, "Recall(all) {} > Recall(one) {}", all.recall, one.recall);
    Outcome::Pass(format!(
        "200 cases in {} groups covered once; distractor suite Recall one {:.1} >= all {:.1}",
        groups.len(),
        one.recall,
        all.recall
    ))
}

fn live_smoke() -> Outcome {
    let (Ok(endpoint), Ok(model), Ok(dataset)) = (
        std::env::var("IRAKE_LLM_ENDPOINT"),
        std::env::var("IRAKE_LLM_MODEL"),
        std::env::var("IRAKE_DATASET"),
    ) else {
        return Outcome::Skip("set IRAKE_LLM_ENDPOINT, IRAKE_LLM_MODEL and IRAKE_DATASET to run".into());
    };
    let api_key = std::env::var("IRAKE_API_KEY").ok();
    let backend = HttpChatBackend::new(&endpoint, &model, api_key, Duration::from_secs(60)).expect("backend");
    let mut cases = load_dataset(&dataset).expect("dataset loads");
    cases.truncate(50);
    let full = eval(&cases, BatchSetting::OneEdited, EngineConfig::default(), &backend, vec![], None);
    let ablated = eval(
        &cases,
        BatchSetting::OneEdited,
        EngineConfig {
            fact_guidance_enabled: false,
            ..EngineConfig::default()
        },
        &backend,
        vec![],
        None,
    );
    assert!(full.acc >= ablated.acc, "full Acc {} < ablated Acc {}", full.acc, ablated.acc);
    Outcome::Pass(format!("full Acc {:.1} >= no-fact-guidance Acc {:.1}", full.acc, ablated.acc))
}

#[test]
fn acceptance_criteria() {
    let results = [
        run_criterion(1, "oracle end-to-end suite", oracle_suite),
        run_criterion(2, "edit skipping", edit_skipping),
        run_criterion(3, "backtracking", backtracking),
        run_criterion(4, "retrieval oracle equivalence", retrieval_equivalence),
        run_criterion(5, "case lookup properties", case_lookup_properties),
        run_criterion(6, "metric oracle equivalence", metric_equivalence),
        run_criterion(7, "batch-setting invariants", batch_invariants),
        run_criterion(8, "live smoke run", live_smoke),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
