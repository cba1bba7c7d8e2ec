//! Domain types shared by every stage of the pipeline: fact triples, edits,
//! decomposition steps, solved-case records and the engine configuration.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Normalizes an entity or answer string for comparison.
///
/// Trims, collapses internal whitespace, lowercases and strips trailing
/// punctuation. Diacritics are kept as-is.
pub fn normalize_entity(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let lowered = collapsed.to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    stripped.to_string()
}

/// A single `(subject, relation, object)` fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let triple = Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        };
        for (name, value) in [
            ("subject", &triple.subject),
            ("relation", &triple.relation),
            ("object", &triple.object),
        ] {
            if value.trim().is_empty() {
                return Err(ModelError::EmptyField(name));
            }
        }
        Ok(triple)
    }
}

/// An edit `(s, r, o -> o*)` together with the single-hop question whose
/// answer it changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactEdit {
    pub subject: String,
    pub relation: String,
    /// Previous object; empty when the source data does not provide it.
    #[serde(default)]
    pub old_object: String,
    pub new_object: String,
    pub atomic_question: String,
    pub statement: String,
}

impl FactEdit {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        old_object: impl Into<String>,
        new_object: impl Into<String>,
        atomic_question: impl Into<String>,
        statement: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let edit = Self {
            subject: subject.into(),
            relation: relation.into(),
            old_object: old_object.into(),
            new_object: new_object.into(),
            atomic_question: atomic_question.into(),
            statement: statement.into(),
        };
        edit.validate()?;
        Ok(edit)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("new_object", &self.new_object),
            ("atomic_question", &self.atomic_question),
            ("statement", &self.statement),
        ] {
            if value.trim().is_empty() {
                return Err(ModelError::EmptyField(name));
            }
        }
        Ok(())
    }

    /// The `(subject, relation)` slot this edit overwrites, normalized.
    pub fn slot(&self) -> (String, String) {
        (normalize_entity(&self.subject), normalize_entity(&self.relation))
    }

    /// Identity used when matching retrieved edits against required ones.
    pub fn key(&self) -> (String, String, String) {
        let (s, r) = self.slot();
        (s, r, normalize_entity(&self.new_object))
    }

    pub fn edited_triple(&self) -> FactTriple {
        FactTriple {
            subject: self.subject.clone(),
            relation: self.relation.clone(),
            object: self.new_object.clone(),
        }
    }
}

/// What steered the decomposition that produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidedBy {
    #[default]
    None,
    Fact,
    Case,
    Both,
}

impl GuidedBy {
    pub fn from_flags(fact: bool, case: bool) -> Self {
        match (fact, case) {
            (false, false) => GuidedBy::None,
            (true, false) => GuidedBy::Fact,
            (false, true) => GuidedBy::Case,
            (true, true) => GuidedBy::Both,
        }
    }

    pub fn is_none(&self) -> bool {
        *self == GuidedBy::None
    }
}

/// One subquestion and the answer it received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionStep {
    pub subquestion: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_edit: Option<FactEdit>,
    #[serde(default, skip_serializing_if = "GuidedBy::is_none")]
    pub guided_by: GuidedBy,
}

impl DecompositionStep {
    pub fn new(subquestion: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            subquestion: subquestion.into(),
            answer: answer.into(),
            retrieved_edit: None,
            guided_by: GuidedBy::None,
        }
    }

    pub fn with_edit(mut self, edit: FactEdit) -> Self {
        self.retrieved_edit = Some(edit);
        self
    }
}

fn succeeded_default() -> bool {
    true
}

/// A solved question with its full decomposition record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub question: String,
    pub steps: Vec<DecompositionStep>,
    pub final_answer: String,
    #[serde(default = "succeeded_default", skip_serializing)]
    pub succeeded: bool,
}

impl CaseRecord {
    pub fn new(
        question: impl Into<String>,
        steps: Vec<DecompositionStep>,
        final_answer: impl Into<String>,
        succeeded: bool,
    ) -> Result<Self, ModelError> {
        let record = Self {
            question: question.into(),
            steps,
            final_answer: final_answer.into(),
            succeeded,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.question.trim().is_empty() {
            return Err(ModelError::EmptyField("question"));
        }
        if self.succeeded {
            let last = self.steps.last().ok_or(ModelError::EmptyField("steps"))?;
            if normalize_entity(&last.answer) != normalize_entity(&self.final_answer) {
                return Err(ModelError::FinalAnswerMismatch {
                    final_answer: self.final_answer.clone(),
                    last_step: last.answer.clone(),
                });
            }
        }
        Ok(())
    }

    /// Renders the record as the labeled-line transcript used as a dynamic
    /// prompt.
    pub fn render(&self) -> String {
        let mut out = format!("Question: {}\n", self.question);
        for step in &self.steps {
            out.push_str(&format!(
                "Subquestion: {}\nAnswer: {}\n",
                step.subquestion, step.answer
            ));
        }
        out.push_str(&format!("Final answer: {}\n", self.final_answer));
        out
    }
}

/// What is shown to the decomposer once an edit is selected as guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidancePayload {
    #[default]
    Question,
    FactStatement,
}

/// Tunables for one solve. Defaults follow the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub pre_retrieval_n: usize,
    pub case_similarity_threshold: f64,
    pub precise_retrieval_threshold: f64,
    pub max_hops: usize,
    pub max_backtracks: usize,
    pub fact_guidance_enabled: bool,
    pub case_guidance_enabled: bool,
    pub backtracking_enabled: bool,
    pub guidance_payload: GuidancePayload,
    pub llm_temperature: f64,
    pub llm_max_tokens: u32,
    /// Passed through to backends that understand it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_penalty: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            pre_retrieval_n: 3,
            case_similarity_threshold: 0.80,
            precise_retrieval_threshold: 0.85,
            max_hops: 8,
            max_backtracks: 4,
            fact_guidance_enabled: true,
            case_guidance_enabled: true,
            backtracking_enabled: true,
            guidance_payload: GuidancePayload::Question,
            llm_temperature: 0.0,
            llm_max_tokens: 200,
            repetition_penalty: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.case_similarity_threshold) {
            return Err(ModelError::InvalidConfig(format!(
                "case_similarity_threshold {} outside [0, 1]",
                self.case_similarity_threshold
            )));
        }
        if !in_unit(self.precise_retrieval_threshold) {
            return Err(ModelError::InvalidConfig(format!(
                "precise_retrieval_threshold {} outside [0, 1]",
                self.precise_retrieval_threshold
            )));
        }
        if self.pre_retrieval_n == 0 {
            return Err(ModelError::InvalidConfig("pre_retrieval_n must be >= 1".into()));
        }
        if self.max_hops == 0 {
            return Err(ModelError::InvalidConfig("max_hops must be >= 1".into()));
        }
        Ok(())
    }
}
