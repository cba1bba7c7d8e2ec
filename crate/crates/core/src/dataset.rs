//! MQuAKE-style dataset ingestion.
//!
//! Each record provides three paraphrased multi-hop questions, the edited
//! answer with aliases, the requested rewrites and the edited chain. Both the
//! upstream layout (chain under `orig.new_triples_labeled`) and a flat
//! layout (labeled `new_triples` at top level) are accepted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::DatasetError;
use crate::model::{normalize_entity, CaseRecord, DecompositionStep, FactEdit, FactTriple};

/// One benchmark instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: String,
    pub questions: Vec<String>,
    pub gold_answer: String,
    pub gold_aliases: Vec<String>,
    pub edits: Vec<FactEdit>,
    pub gold_chain: Vec<FactTriple>,
    pub hop_count: usize,
    /// Single-hop question per chain element, when the source provides it.
    #[serde(default)]
    pub hop_questions: Vec<String>,
}

impl EvalCase {
    /// Single-hop question for chain element `hop`: the dataset's own
    /// question, else the atomic question of a matching edit, else a
    /// question built from the relation name.
    pub fn hop_question(&self, hop: usize) -> String {
        if let Some(q) = self.hop_questions.get(hop).filter(|q| !q.trim().is_empty()) {
            return q.clone();
        }
        let triple = &self.gold_chain[hop];
        let slot = (normalize_entity(&triple.subject), normalize_entity(&triple.relation));
        if let Some(edit) = self.edits.iter().find(|e| e.slot() == slot) {
            return edit.atomic_question.clone();
        }
        relation_question(&triple.relation, &triple.subject)
    }

    /// Oracle solution record for paraphrase `question_index`, built from the
    /// gold chain: one step per hop, edited hops carrying their edit.
    pub fn oracle_record(&self, question_index: usize) -> CaseRecord {
        let steps = self
            .gold_chain
            .iter()
            .enumerate()
            .map(|(i, triple)| {
                let slot = (normalize_entity(&triple.subject), normalize_entity(&triple.relation));
                DecompositionStep {
                    subquestion: self.hop_question(i),
                    answer: triple.object.clone(),
                    retrieved_edit: self.edits.iter().find(|e| e.slot() == slot).cloned(),
                    guided_by: Default::default(),
                }
            })
            .collect();
        CaseRecord {
            question: self.questions[question_index].clone(),
            steps,
            final_answer: self
                .gold_chain
                .last()
                .map_or_else(|| self.gold_answer.clone(), |t| t.object.clone()),
            succeeded: true,
        }
    }
}

/// Question templates for common Wikidata relations, keyed by property id.
const RELATION_QUESTIONS: &[(&str, &str)] = &[
    ("P17", "Which country is {} located in?"),
    ("P19", "Where was {} born?"),
    ("P20", "Where did {} die?"),
    ("P26", "Who is {} married to?"),
    ("P27", "What is the country of citizenship of {}?"),
    ("P30", "Which continent is {} located in?"),
    ("P35", "Who is the head of state of {}?"),
    ("P36", "What is the capital of {}?"),
    ("P37", "What is the official language of {}?"),
    ("P38", "What is the currency of {}?"),
    ("P40", "Who is the child of {}?"),
    ("P50", "Who is the author of {}?"),
    ("P6", "Who is the head of government of {}?"),
    ("P69", "Where was {} educated?"),
    ("P101", "What is the field of work of {}?"),
    ("P103", "What is the native language of {}?"),
    ("P106", "What is the occupation of {}?"),
    ("P108", "Who is the employer of {}?"),
    ("P112", "Who founded {}?"),
    ("P127", "Who owns {}?"),
    ("P131", "Which administrative region is {} located in?"),
    ("P136", "What genre is {}?"),
    ("P140", "What religion is {} affiliated with?"),
    ("P159", "Where is the headquarters of {} located?"),
    ("P169", "Who is the chief executive officer of {}?"),
    ("P170", "Who created {}?"),
    ("P175", "Who performed {}?"),
    ("P176", "Which company manufactures {}?"),
    ("P178", "Who developed {}?"),
    ("P264", "Which record label is {} signed to?"),
    ("P276", "Where is {} located?"),
    ("P286", "Who is the head coach of {}?"),
    ("P407", "What language is {} written in?"),
    ("P413", "What position does {} play?"),
    ("P449", "Which network originally broadcast {}?"),
    ("P463", "Which organization is {} a member of?"),
    ("P495", "Which country was {} created in?"),
    ("P641", "Which sport is {} associated with?"),
    ("P740", "Where was {} founded?"),
    ("P937", "Where does {} work?"),
    ("P1412", "Which language does {} speak?"),
];

/// Builds a single-hop question from a relation id or name.
pub fn relation_question(relation: &str, subject: &str) -> String {
    match RELATION_QUESTIONS.iter().find(|(id, _)| *id == relation) {
        Some((_, template)) => template.replace("{}", subject),
        None => format!("What is the {relation} of {subject}?"),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Labeled { str: String },
    Plain(String),
}

impl RawTarget {
    fn into_string(self) -> String {
        match self {
            RawTarget::Labeled { str } | RawTarget::Plain(str) => str,
        }
    }
}

#[derive(Deserialize)]
struct RawRewrite {
    subject: String,
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    relation_id: Option<String>,
    #[serde(default)]
    relation: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    statement: Option<String>,
    target_new: RawTarget,
    #[serde(default)]
    target_true: Option<RawTarget>,
}

#[derive(Deserialize, Default)]
struct RawOrig {
    #[serde(default)]
    new_triples_labeled: Option<Vec<Vec<String>>>,
    #[serde(default)]
    new_triples: Option<Vec<Vec<String>>>,
}

#[derive(Deserialize)]
struct RawSingleHop {
    question: String,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    case_id: Option<Value>,
    questions: Vec<String>,
    new_answer: String,
    #[serde(default)]
    new_answer_alias: Vec<String>,
    requested_rewrite: Vec<RawRewrite>,
    #[serde(default)]
    new_triples: Option<Vec<Vec<String>>>,
    #[serde(default)]
    orig: Option<RawOrig>,
    #[serde(default)]
    new_single_hops: Vec<RawSingleHop>,
}

fn triple_from(raw: &[String], index: usize) -> Result<FactTriple, DatasetError> {
    let [s, r, o] = raw else {
        return Err(DatasetError::Malformed {
            index,
            reason: format!("triple must have 3 elements, found {}", raw.len()),
        });
    };
    FactTriple::new(s.clone(), r.clone(), o.clone()).map_err(|e| DatasetError::Malformed {
        index,
        reason: e.to_string(),
    })
}

fn map_record(index: usize, value: Value) -> Result<EvalCase, DatasetError> {
    let malformed = |reason: String| DatasetError::Malformed { index, reason };
    let raw: RawRecord = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;

    if raw.questions.len() != 3 {
        return Err(malformed(format!(
            "expected 3 questions, found {}",
            raw.questions.len()
        )));
    }
    if raw.requested_rewrite.is_empty() {
        return Err(malformed("requested_rewrite is empty".into()));
    }

    let orig = raw.orig.unwrap_or_default();
    let labeled = raw
        .new_triples
        .or(orig.new_triples_labeled)
        .ok_or_else(|| malformed("missing new_triples".into()))?;
    let mut gold_chain = labeled
        .iter()
        .map(|t| triple_from(t, index))
        .collect::<Result<Vec<_>, _>>()?;
    // prefer relation ids when the id-level chain lines up, so that chain
    // relations compare equal to rewrite relation ids
    if let Some(ids) = orig.new_triples.filter(|ids| ids.len() == gold_chain.len()) {
        for (triple, id) in gold_chain.iter_mut().zip(ids) {
            if let Some(rel) = id.get(1) {
                triple.relation = rel.clone();
            }
        }
    }
    if !(2..=4).contains(&gold_chain.len()) {
        return Err(malformed(format!(
            "chain has {} hops, expected 2 to 4",
            gold_chain.len()
        )));
    }
    for pair in gold_chain.windows(2) {
        if normalize_entity(&pair[0].object) != normalize_entity(&pair[1].subject) {
            return Err(malformed(format!(
                "broken chain: `{}` does not lead to `{}`",
                pair[0].object, pair[1].subject
            )));
        }
    }

    let edits = raw
        .requested_rewrite
        .into_iter()
        .map(|rw| {
            let relation = rw
                .relation_id
                .clone()
                .or(rw.relation.clone())
                .or(rw.prompt.clone())
                .ok_or_else(|| malformed("rewrite has no relation".into()))?;
            let new_object = rw.target_new.into_string();
            let atomic_question = rw
                .question
                .clone()
                .unwrap_or_else(|| relation_question(&relation, &rw.subject));
            let statement = match (&rw.statement, &rw.prompt) {
                (Some(s), _) => s.clone(),
                (None, Some(p)) if p.contains("{}") => {
                    format!("{} {}", p.replace("{}", &rw.subject), new_object)
                }
                _ => format!("The {relation} of {} is {new_object}", rw.subject),
            };
            let old_object = rw.target_true.map(RawTarget::into_string).unwrap_or_default();
            FactEdit::new(rw.subject, relation, old_object, new_object, atomic_question, statement)
                .map_err(|e| malformed(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let case_id = match raw.case_id {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => return Err(malformed(format!("unsupported case_id {other}"))),
        None => (index + 1).to_string(),
    };

    Ok(EvalCase {
        case_id,
        hop_count: gold_chain.len(),
        questions: raw.questions,
        gold_answer: raw.new_answer,
        gold_aliases: raw.new_answer_alias,
        edits,
        gold_chain,
        hop_questions: raw.new_single_hops.into_iter().map(|h| h.question).collect(),
    })
}

pub fn parse_dataset(json: &str) -> Result<Vec<EvalCase>, DatasetError> {
    let values: Vec<Value> = serde_json::from_str(json)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| map_record(i, v))
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalCase>, DatasetError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

/// Writes cases back out in the flat layout accepted by [`parse_dataset`].
pub fn dataset_to_json(cases: &[EvalCase]) -> serde_json::Value {
    let records: Vec<Value> = cases
        .iter()
        .map(|c| {
            serde_json::json!({
                "case_id": c.case_id,
                "questions": c.questions,
                "new_answer": c.gold_answer,
                "new_answer_alias": c.gold_aliases,
                "requested_rewrite": c.edits.iter().map(|e| serde_json::json!({
                    "subject": e.subject,
                    "relation": e.relation,
                    "question": e.atomic_question,
                    "statement": e.statement,
                    "target_new": {"str": e.new_object},
                    "target_true": {"str": e.old_object},
                })).collect::<Vec<_>>(),
                "new_triples": c.gold_chain.iter().map(|t| vec![&t.subject, &t.relation, &t.object]).collect::<Vec<_>>(),
                "new_single_hops": (0..c.hop_count).map(|i| serde_json::json!({
                    "question": c.hop_question(i),
                    "answer": c.gold_chain[i].object,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    Value::Array(records)
}

/// Case counts by number of edits and by number of hops.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub cases: usize,
    pub by_edit_count: BTreeMap<usize, usize>,
    pub by_hops: BTreeMap<usize, usize>,
}

impl DatasetStats {
    pub fn from_cases(cases: &[EvalCase]) -> Self {
        let mut stats = Self {
            cases: cases.len(),
            ..Self::default()
        };
        for case in cases {
            *stats.by_edit_count.entry(case.edits.len()).or_default() += 1;
            *stats.by_hops.entry(case.hop_count).or_default() += 1;
        }
        stats
    }
}
