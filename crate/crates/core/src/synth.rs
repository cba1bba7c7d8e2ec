//! Synthetic MQuAKE-shaped cases with scripted oracle backends, plus two
//! hand-built scenarios: edit skipping through granularity mismatch
//! (`olympics`) and misleading fact guidance (`danse_macabre`).
//!
//! Scripts key on the labeled lines of the built-in prompt templates, so
//! they assume [`PromptCatalog::builtin`](crate::prompts::PromptCatalog).

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EvalCase;
use crate::embedding::{tokenize, HashBagEmbedder};
use crate::llm::{Matcher, ScriptedBackend};
use crate::model::{FactEdit, FactTriple};

pub const DECOMPOSE_HEADER: &str = "### Task: decompose question";
pub const JUDGE_HEADER: &str = "### Task: judge helpful knowledge";
pub const REWRITE_HEADER: &str = "### Task: rewrite question";
pub const ANSWER_HEADER: &str = "### Task: answer question";
pub const HINT_LABEL: &str = "Hint for the next step: ";

/// Tail of a decomposition prompt for `question` after the given
/// `(subquestion, answer)` steps.
pub fn decompose_tail(question: &str, steps: &[(&str, &str)]) -> String {
    let mut tail = format!("Question: {question}\n");
    for (s, a) in steps {
        tail.push_str(&format!("Subquestion: {s}\nAnswer: {a}\n"));
    }
    tail.push_str("Next:");
    tail
}

fn decompose_rule(question: &str, steps: &[(&str, &str)]) -> Matcher {
    Matcher::AllOf(vec![DECOMPOSE_HEADER.into(), decompose_tail(question, steps)])
}

fn guided_rule(hint: &str, question: &str, steps: &[(&str, &str)]) -> Matcher {
    Matcher::AllOf(vec![
        DECOMPOSE_HEADER.into(),
        format!("{HINT_LABEL}{hint}\n"),
        decompose_tail(question, steps),
    ])
}

fn answer_rule(subquestion: &str) -> Matcher {
    Matcher::AllOf(vec![ANSWER_HEADER.into(), format!("Q: {subquestion}\n")])
}

fn rewrite_rule(subquestion: &str, answer: &str) -> Matcher {
    Matcher::AllOf(vec![
        REWRITE_HEADER.into(),
        format!("Subquestion: {subquestion}\nAnswer: {answer}\n"),
    ])
}

/// Judge rules selecting `target` wherever it appears among the first
/// `max_candidates` listed candidates for `query`.
fn push_judge_rules(script: &mut ScriptedBackend, query: &str, target: &str, max_candidates: usize) {
    for pos in 1..=max_candidates {
        script.push(
            Matcher::AllOf(vec![
                JUDGE_HEADER.into(),
                format!("\n{pos}. {target}\n"),
                format!("Question: {query}\nSelection:"),
            ]),
            pos.to_string(),
        );
    }
}

struct Relation {
    name: &'static str,
    question: &'static str,
    statement: &'static str,
}

const RELATIONS: &[Relation] = &[
    Relation { name: "country of citizenship", question: "What is the country of citizenship of {}?", statement: "{} is a citizen of {}" },
    Relation { name: "head of state", question: "Who is the head of state of {}?", statement: "The head of state of {} is {}" },
    Relation { name: "capital", question: "What is the capital of {}?", statement: "The capital of {} is {}" },
    Relation { name: "place of birth", question: "Where was {} born?", statement: "{} was born in {}" },
    Relation { name: "continent", question: "Which continent is {} located in?", statement: "{} is located in the continent of {}" },
    Relation { name: "author", question: "Who is the author of {}?", statement: "The author of {} is {}" },
    Relation { name: "employer", question: "Who is the employer of {}?", statement: "{} works for {}" },
    Relation { name: "official language", question: "What is the official language of {}?", statement: "The official language of {} is {}" },
    Relation { name: "headquarters location", question: "Where is the headquarters of {} located?", statement: "The headquarters of {} is in {}" },
    Relation { name: "spouse", question: "Who is {} married to?", statement: "{} is married to {}" },
    Relation { name: "founder", question: "Who founded {}?", statement: "{} was founded by {}" },
    Relation { name: "owner", question: "Who owns {}?", statement: "{} is owned by {}" },
];

fn fill(template: &str, a: &str, b: &str) -> String {
    template.replacen("{}", a, 1).replacen("{}", b, 1)
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "tu", "ven", "sor", "bel", "dra", "qui", "zan", "fen", "gor", "hul",
    "ix", "jap", "nel", "op", "pra", "sul", "tev", "ur", "wex", "yol",
];

/// Generates entity names of three pseudo-words, never reusing a word.
///
/// Names are also spread over the offline embedder's buckets: the three
/// words of a name hit distinct buckets that no template word uses, and two
/// names share at most one bucket. Same-template questions about different
/// entities then stay below the precise-retrieval threshold (at most 10/12
/// for the longest templates). Once the bucket space is exhausted the
/// spreading is given up and only word uniqueness holds.
struct NameGen {
    rng: ChaCha8Rng,
    used: HashSet<String>,
    hasher: HashBagEmbedder,
    reserved: HashSet<usize>,
    pairs: HashSet<(usize, usize)>,
}

const SPREAD_ATTEMPTS: usize = 2_000;

impl NameGen {
    fn new(seed: u64) -> Self {
        let hasher = HashBagEmbedder::default();
        let templates = RELATIONS
            .iter()
            .flat_map(|r| [r.name, r.question, r.statement])
            .chain(["What is the", "Can you name", "Tell me"]);
        let reserved = templates
            .flat_map(tokenize)
            .map(|t| hasher.bucket(&t))
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
            hasher,
            reserved,
            pairs: HashSet::new(),
        }
    }

    fn candidate(&mut self) -> String {
        loop {
            let w: String = (0..3)
                .map(|_| *SYLLABLES.choose(&mut self.rng).expect("syllables"))
                .collect();
            if !self.used.contains(&w) {
                return w;
            }
        }
    }

    fn bucket_pairs(&self, words: &[String]) -> Vec<(usize, usize)> {
        let b: Vec<usize> = words.iter().map(|w| self.hasher.bucket(&w.to_lowercase())).collect();
        let mut pairs = Vec::new();
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                pairs.push((b[i].min(b[j]), b[i].max(b[j])));
            }
        }
        pairs
    }

    fn spread(&self, words: &[String]) -> bool {
        let buckets: HashSet<usize> = words.iter().map(|w| self.hasher.bucket(w)).collect();
        buckets.len() == words.len()
            && buckets.is_disjoint(&self.reserved)
            && self.bucket_pairs(words).iter().all(|p| !self.pairs.contains(p))
    }

    /// Registers an existing name so later names avoid its words and buckets.
    fn reserve(&mut self, entity: &str) {
        let words: Vec<String> = entity.split(' ').map(str::to_lowercase).collect();
        self.pairs.extend(self.bucket_pairs(&words));
        self.used.extend(words);
    }

    fn entity(&mut self) -> String {
        let mut attempt = 0;
        let words = loop {
            let words: Vec<String> = (0..3).map(|_| self.candidate()).collect();
            if words[0] == words[1] || words[0] == words[2] || words[1] == words[2] {
                continue;
            }
            attempt += 1;
            if attempt > SPREAD_ATTEMPTS || self.spread(&words) {
                break words;
            }
        };
        let name = words
            .iter()
            .map(|w| {
                let mut chars = w.chars();
                let first = chars.next().expect("non-empty").to_uppercase();
                first.chain(chars).collect::<String>()
            })
            .collect::<Vec<_>>()
            .join(" ");
        self.reserve(&name);
        name
    }
}

/// (hops, edits) shapes covered first so that small suites span every
/// combination.
const SHAPES: &[(usize, usize)] = &[
    (2, 1), (2, 2), (3, 1), (3, 2), (3, 3), (4, 1), (4, 2), (4, 3), (4, 4),
];

fn weighted(rng: &mut ChaCha8Rng, weights: &[(usize, u32)]) -> usize {
    let total: u32 = weights.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total);
    for (value, w) in weights {
        if roll < *w {
            return *value;
        }
        roll -= w;
    }
    weights.last().expect("weights").0
}

fn make_case(case_id: String, hops: usize, edits: usize, rng: &mut ChaCha8Rng, names: &mut NameGen) -> EvalCase {
    let mut relation_ids: Vec<usize> = (0..RELATIONS.len()).collect();
    relation_ids.shuffle(rng);
    relation_ids.truncate(hops);
    let mut edited_hops: Vec<usize> = (0..hops).collect();
    edited_hops.shuffle(rng);
    edited_hops.truncate(edits);

    let mut subject = names.entity();
    let first_subject = subject.clone();
    let mut chain = Vec::with_capacity(hops);
    let mut case_edits = Vec::new();
    let mut hop_questions = Vec::new();
    for (hop, &rid) in relation_ids.iter().enumerate() {
        let rel = &RELATIONS[rid];
        let original = names.entity();
        let question = rel.question.replace("{}", &subject);
        let object = if edited_hops.contains(&hop) {
            let new_object = names.entity();
            case_edits.push(
                FactEdit::new(
                    subject.clone(),
                    rel.name,
                    original,
                    new_object.clone(),
                    question.clone(),
                    fill(rel.statement, &subject, &new_object),
                )
                .expect("generated edit is valid"),
            );
            new_object
        } else {
            original
        };
        hop_questions.push(question);
        chain.push(FactTriple::new(subject.clone(), rel.name, object.clone()).expect("valid triple"));
        subject = object;
    }

    let phrase = relation_ids
        .iter()
        .rev()
        .map(|&rid| format!("the {} of", RELATIONS[rid].name))
        .collect::<Vec<_>>()
        .join(" ");
    let questions = vec![
        format!("What is {phrase} {first_subject}?"),
        format!("Can you name {phrase} {first_subject}?"),
        format!("Tell me {phrase} {first_subject}."),
    ];
    // edits were collected in chain order
    let gold_answer = chain.last().expect("hops >= 2").object.clone();
    EvalCase {
        case_id,
        questions,
        gold_aliases: vec![gold_answer.to_uppercase()],
        gold_answer,
        edits: case_edits,
        hop_count: hops,
        gold_chain: chain,
        hop_questions,
    }
}

/// `count` synthetic cases with 2 to 4 hops and 1 to 4 edits each. Case ids are
/// `{prefix}{n}`; names never repeat within one call.
pub fn generate_cases(count: usize, seed: u64, prefix: &str) -> Vec<EvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    (0..count)
        .map(|i| {
            let (hops, edits) = match SHAPES.get(i) {
                Some(&shape) => shape,
                None => {
                    // roughly the hop and edit-count mix of the benchmark
                    let hops = weighted(&mut rng, &[(2, 966), (3, 625), (4, 411)]);
                    let weights: Vec<(usize, u32)> = [(1, 557), (2, 751), (3, 426), (4, 268)]
                        .into_iter()
                        .filter(|(e, _)| *e <= hops)
                        .collect();
                    (hops, weighted(&mut rng, &weights))
                }
            };
            make_case(format!("{prefix}{i}"), hops, edits, &mut rng, &mut names)
        })
        .collect()
}

/// Scripted backend that solves every paraphrase of `cases` along the gold
/// chain: decompositions follow the hop questions, non-edited hops are
/// answered parametrically, rewrites produce the next hop question and the
/// judge picks the edit needed for the next hop whenever it is listed.
/// Unmatched prompts get `0`.
pub fn oracle_script(cases: &[EvalCase], max_candidates: usize) -> ScriptedBackend {
    let mut script = ScriptedBackend::new("0");
    for case in cases {
        let hop_qs: Vec<String> = (0..case.hop_count).map(|i| case.hop_question(i)).collect();
        let objects: Vec<&str> = case.gold_chain.iter().map(|t| t.object.as_str()).collect();
        let edited: Vec<bool> = case
            .gold_chain
            .iter()
            .map(|t| {
                let slot = (
                    crate::model::normalize_entity(&t.subject),
                    crate::model::normalize_entity(&t.relation),
                );
                case.edits.iter().any(|e| e.slot() == slot)
            })
            .collect();

        for question in &case.questions {
            let mut steps: Vec<(&str, &str)> = Vec::new();
            for hop in 0..case.hop_count {
                script.push(
                    decompose_rule(question, &steps),
                    format!("Subquestion: {}", hop_qs[hop]),
                );
                steps.push((hop_qs[hop].as_str(), objects[hop]));
            }
            script.push(
                decompose_rule(question, &steps),
                format!("Final answer: {}", case.gold_answer),
            );
            if edited[0] {
                push_judge_rules(&mut script, question, &hop_qs[0], max_candidates);
            }
        }
        for hop in 0..case.hop_count {
            if !edited[hop] {
                script.push(answer_rule(&hop_qs[hop]), objects[hop]);
            }
            let next = hop_qs.get(hop + 1).cloned().unwrap_or_else(|| case.questions[0].clone());
            script.push(rewrite_rule(&hop_qs[hop], objects[hop]), next);
            if hop + 1 < case.hop_count && edited[hop + 1] {
                push_judge_rules(&mut script, &hop_qs[hop + 1], &hop_qs[hop + 1], max_candidates);
            }
        }
    }
    script
}

/// Distractor edits for the shared-memory settings. The first `conflicting`
/// overwrite the slot of an edit in `cases` with a different object; the
/// rest are unrelated edits on fresh subjects.
pub fn distractor_edits(cases: &[EvalCase], count: usize, conflicting: usize, seed: u64) -> Vec<FactEdit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::new(seed ^ 0xd1b5_4a32_d192_ed03);
    for case in cases {
        for t in &case.gold_chain {
            names.reserve(&t.subject);
            names.reserve(&t.object);
        }
        for e in &case.edits {
            names.reserve(&e.old_object);
        }
    }
    let targets: Vec<&FactEdit> = cases.iter().flat_map(|c| &c.edits).collect();
    let mut picked: Vec<&FactEdit> = targets.clone();
    picked.shuffle(&mut rng);
    let mut out = Vec::with_capacity(count);
    for edit in picked.into_iter().take(conflicting.min(count)) {
        let new_object = names.entity();
        out.push(
            FactEdit::new(
                edit.subject.clone(),
                edit.relation.clone(),
                edit.new_object.clone(),
                new_object.clone(),
                edit.atomic_question.clone(),
                format!("The {} of {} is {}", edit.relation, edit.subject, new_object),
            )
            .expect("valid distractor"),
        );
    }
    while out.len() < count {
        let rel = RELATIONS.choose(&mut rng).expect("relations");
        let subject = names.entity();
        let object = names.entity();
        out.push(
            FactEdit::new(
                subject.clone(),
                rel.name,
                "",
                object.clone(),
                rel.question.replace("{}", &subject),
                fill(rel.statement, &subject, &object),
            )
            .expect("valid distractor"),
        );
    }
    out
}

/// A hand-built case with its scripted backend and any extra edits that
/// must share the memory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub case: EvalCase,
    pub extra_edits: Vec<FactEdit>,
    pub script: ScriptedBackend,
}

impl Scenario {
    /// All edits the scenario's memory should hold.
    pub fn memory_edits(&self) -> Vec<FactEdit> {
        self.case.edits.iter().chain(&self.extra_edits).cloned().collect()
    }
}

pub fn scenario(name: &str) -> Option<Scenario> {
    match name {
        "olympics" => Some(olympics()),
        "danse-macabre" | "danse_macabre" => Some(danse_macabre()),
        _ => None,
    }
}

pub const SCENARIOS: &[&str] = &["olympics", "danse-macabre"];

/// Two edits along a two-hop chain. Unguided, the model asks for the
/// state of Los Angeles, which is finer than the continent edit, and
/// answers from its own knowledge. Guided by the edits' atomic questions
/// it reaches the edited answer.
pub fn olympics() -> Scenario {
    let host_q = "Which city will host the 2028 Summer Olympics?";
    let continent_q = "Which continent is Los Angeles located in?";
    let host = FactEdit::new(
        "2028 Summer Olympics",
        "host city",
        "Brisbane",
        "Los Angeles",
        host_q,
        "The 2028 Summer Olympics will be hosted by Los Angeles",
    )
    .expect("valid edit");
    let continent = FactEdit::new(
        "Los Angeles",
        "continent",
        "North America",
        "Asia",
        continent_q,
        "Los Angeles is located in the continent of Asia",
    )
    .expect("valid edit");
    let case = EvalCase {
        case_id: "olympics".into(),
        questions: vec![
            "Which continent is the host city of the 2028 Summer Olympics located in?".into(),
            "On what continent is the city hosting the 2028 Summer Olympics?".into(),
            "The 2028 Summer Olympics will be held in a city on which continent?".into(),
        ],
        gold_answer: "Asia".into(),
        gold_aliases: vec![],
        edits: vec![host.clone(), continent.clone()],
        gold_chain: vec![host.edited_triple(), continent.edited_triple()],
        hop_count: 2,
        hop_questions: vec![host_q.into(), continent_q.into()],
    };

    let guided_continent_q = "In which continent is Los Angeles located?";
    let unguided_country_q = "Which country will host the 2028 Summer Olympics?";
    let unguided_state_q = "Which U.S. state is Los Angeles in?";
    let mut script = ScriptedBackend::new("0");
    for q in &case.questions {
        push_judge_rules(&mut script, q, host_q, 10);
        // guided path
        script.push(guided_rule(host_q, q, &[]), format!("Subquestion: {host_q}"));
        script.push(
            guided_rule(continent_q, q, &[(host_q, "Los Angeles")]),
            format!("Subquestion: {guided_continent_q}"),
        );
        script.push(
            decompose_rule(q, &[(host_q, "Los Angeles"), (guided_continent_q, "Asia")]),
            "Final answer: Asia",
        );
        // unguided path
        script.push(decompose_rule(q, &[]), format!("Subquestion: {unguided_country_q}"));
        script.push(
            decompose_rule(q, &[(unguided_country_q, "Los Angeles")]),
            format!("Subquestion: {unguided_state_q}"),
        );
        script.push(
            decompose_rule(q, &[(unguided_country_q, "Los Angeles"), (unguided_state_q, "California")]),
            "Final answer: North America",
        );
        script.push(
            decompose_rule(q, &[(unguided_country_q, "United States")]),
            format!("Subquestion: {unguided_state_q}"),
        );
    }
    script.push(rewrite_rule(host_q, "Los Angeles"), continent_q);
    script.push(rewrite_rule(unguided_country_q, "Los Angeles"), continent_q);
    push_judge_rules(&mut script, continent_q, continent_q, 10);
    script.push(answer_rule(unguided_state_q), "California");
    script.push(answer_rule(unguided_country_q), "United States");
    Scenario {
        name: "olympics",
        case,
        extra_edits: vec![],
        script,
    }
}

/// Misleading guidance: the judge selects an unrelated edit about
/// "Danse Russe", the guided subquestion retrieves nothing and the chain
/// drifts to a wrong answer. Restoring the unguided state recovers the
/// edited chain.
pub fn danse_macabre() -> Scenario {
    let russe_q = "Who wrote Danse Russe?";
    let origin_q = "Which country was Danse Macabre created in?";
    let russe = FactEdit::new(
        "Danse Russe",
        "author",
        "William Carlos Williams",
        "Camille Saint-Saëns",
        russe_q,
        "Writer of Danse Russe is Camille Saint-Saëns",
    )
    .expect("valid edit");
    let origin = FactEdit::new(
        "Danse Macabre",
        "country of origin",
        "Belgium",
        "France",
        origin_q,
        "Danse Macabre was created in France",
    )
    .expect("valid edit");
    let leader_q = "Who is the head of state of France?";
    let case = EvalCase {
        case_id: "danse-macabre".into(),
        questions: vec![
            "What is the name of the political leader of the country of origin of Danse Macabre?".into(),
            "Who leads the country where Danse Macabre originated?".into(),
            "Who is the political leader of the country Danse Macabre comes from?".into(),
        ],
        gold_answer: "Emmanuel Macron".into(),
        gold_aliases: vec!["Macron".into()],
        edits: vec![origin.clone()],
        gold_chain: vec![
            origin.edited_triple(),
            FactTriple::new("France", "head of state", "Emmanuel Macron").expect("valid triple"),
        ],
        hop_count: 2,
        hop_questions: vec![origin_q.into(), leader_q.into()],
    };

    let wrong_author_q = "Who wrote Danse Macabre?";
    let wrong_country_q = "What is the country of citizenship of Camille Saint-Saëns?";
    let wrong_leader_q = "Who is the head of state of Belgium?";
    let wrong_1 = [(wrong_author_q, "Camille Saint-Saëns")];
    let wrong_2 = [(wrong_author_q, "Camille Saint-Saëns"), (wrong_country_q, "Belgium")];
    let wrong_3 = [
        (wrong_author_q, "Camille Saint-Saëns"),
        (wrong_country_q, "Belgium"),
        (wrong_leader_q, "Philippe of Belgium"),
    ];
    let mut script = ScriptedBackend::new("0");
    for q in &case.questions {
        // the judge is misled into picking the Danse Russe edit
        push_judge_rules(&mut script, q, russe_q, 10);
        script.push(guided_rule(russe_q, q, &[]), format!("Subquestion: {wrong_author_q}"));
        script.push(decompose_rule(q, &wrong_1), format!("Subquestion: {wrong_country_q}"));
        script.push(decompose_rule(q, &wrong_2), format!("Subquestion: {wrong_leader_q}"));
        script.push(decompose_rule(q, &wrong_3), "Final answer: Philippe of Belgium");
        // unguided path
        script.push(decompose_rule(q, &[]), format!("Subquestion: {origin_q}"));
        script.push(decompose_rule(q, &[(origin_q, "France")]), format!("Subquestion: {leader_q}"));
        script.push(
            decompose_rule(q, &[(origin_q, "France"), (leader_q, "Emmanuel Macron")]),
            "Final answer: Emmanuel Macron",
        );
    }
    script.push(answer_rule(wrong_author_q), "Camille Saint-Saëns");
    script.push(answer_rule(wrong_country_q), "Belgium");
    script.push(answer_rule(wrong_leader_q), "Philippe of Belgium");
    script.push(answer_rule(leader_q), "Emmanuel Macron");
    script.push(rewrite_rule(wrong_author_q, "Camille Saint-Saëns"), "Who leads the country of Camille Saint-Saëns?");
    script.push(rewrite_rule(wrong_country_q, "Belgium"), "Who is the political leader of Belgium?");
    script.push(rewrite_rule(origin_q, "France"), "Who is the political leader of France?");
    Scenario {
        name: "danse-macabre",
        case,
        extra_edits: vec![russe],
        script,
    }
}
