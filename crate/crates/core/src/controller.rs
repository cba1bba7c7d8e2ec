//! The solve loop: pre-retrieve, judge, (guided) decompose, precise
//! retrieval or parametric answer, rewrite, repeat. Guided decompositions
//! save an unguided snapshot on a stack; reaching a final answer while the
//! stack is non-empty restores the most recent snapshot.

use serde::{Deserialize, Serialize};

use crate::cases::{CaseLibrary, CaseMatch};
use crate::error::{LlmError, SolveError};
use crate::llm::{
    first_line, parse_decomposition, parse_judgment, GenerationParams, LlmBackend, StepOutput, Usage,
};
use crate::memory::EditedFactMemory;
use crate::model::{DecompositionStep, EngineConfig, FactEdit, GuidancePayload, GuidedBy};
use crate::prompts::{PromptCatalog, PromptKind};

const FORMAT_REMINDER: &str =
    "\nStart your reply with \"Subquestion:\" or \"Final answer:\".\nNext:";

/// Snapshot restored by a backtrack. Resumption is always unguided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedState {
    pub working_question: String,
    pub trace_snapshot: Vec<DecompositionStep>,
    pub hop_index: usize,
}

/// Live state of one solve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningState {
    pub original_question: String,
    pub working_question: String,
    pub hop_index: usize,
    pub trace: Vec<DecompositionStep>,
    pub backtrack_stack: Vec<SavedState>,
    pub guidance_active: bool,
}

impl ReasoningState {
    pub fn new(question: &str) -> Self {
        Self {
            original_question: question.to_string(),
            working_question: question.to_string(),
            hop_index: 0,
            trace: Vec::new(),
            backtrack_stack: Vec::new(),
            guidance_active: false,
        }
    }

    fn snapshot(&self) -> SavedState {
        SavedState {
            working_question: self.working_question.clone(),
            trace_snapshot: self.trace.clone(),
            hop_index: self.hop_index,
        }
    }

    fn restore(&mut self, saved: SavedState) {
        self.working_question = saved.working_question;
        self.trace = saved.trace_snapshot;
        self.hop_index = saved.hop_index;
        self.guidance_active = false;
    }

    fn push_step(&mut self, step: DecompositionStep) {
        self.trace.push(step);
        self.hop_index = self.trace.len();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceUses {
    pub fact: usize,
    pub case: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHit {
    pub question: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub question: String,
    pub final_answer: String,
    pub trace: Vec<DecompositionStep>,
    pub retrieved_edit_count: usize,
    pub backtrack_count: usize,
    pub guidance_uses: GuidanceUses,
    /// The hop budget ran out before a final answer.
    pub truncated: bool,
    /// Saved states still on the stack when the solve ended.
    pub stack_depth_at_exit: usize,
    pub case_hit: Option<CaseHit>,
    pub usage: Usage,
}

impl SolveResult {
    pub fn retrieved_edits(&self) -> impl Iterator<Item = &FactEdit> {
        self.trace.iter().filter_map(|s| s.retrieved_edit.as_ref())
    }
}

/// How the case-level demonstration is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CaseSelection {
    #[default]
    MostSimilar,
    /// Ablation: replace the most similar case with a random other one.
    Random { seed: u64 },
}

/// Runs solves against one memory, library and backend.
pub struct Engine<'a> {
    memory: &'a EditedFactMemory,
    library: Option<&'a CaseLibrary>,
    backend: &'a dyn LlmBackend,
    prompts: &'a PromptCatalog,
    config: &'a EngineConfig,
    case_selection: CaseSelection,
}

impl<'a> Engine<'a> {
    pub fn new(
        memory: &'a EditedFactMemory,
        backend: &'a dyn LlmBackend,
        prompts: &'a PromptCatalog,
        config: &'a EngineConfig,
    ) -> Self {
        Self {
            memory,
            library: None,
            backend,
            prompts,
            config,
            case_selection: CaseSelection::MostSimilar,
        }
    }

    pub fn with_library(mut self, library: &'a CaseLibrary) -> Self {
        self.library = Some(library);
        self
    }

    pub fn with_case_selection(mut self, selection: CaseSelection) -> Self {
        self.case_selection = selection;
        self
    }

    fn params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.config.llm_temperature,
            max_tokens: self.config.llm_max_tokens,
            repetition_penalty: self.config.repetition_penalty,
        }
    }

    fn call(&self, prompt: &str, usage: &mut Usage) -> Result<String, LlmError> {
        let reply = self.backend.generate(prompt, &self.params())?;
        usage.calls += 1;
        usage.input_tokens += reply.input_tokens;
        usage.output_tokens += reply.output_tokens;
        Ok(reply.text)
    }

    fn find_case(&self, question: &str) -> Result<Option<CaseMatch<'a>>, SolveError> {
        let Some(library) = self.library else {
            return Ok(None);
        };
        let theta = self.config.case_similarity_threshold;
        let hit = match self.case_selection {
            CaseSelection::MostSimilar => library.lookup(question, theta)?,
            CaseSelection::Random { seed } => library.lookup_random(question, theta, seed)?,
        };
        Ok(hit)
    }

    /// Pre-retrieves candidate edits for the current hop and asks the
    /// backend which, if any, should guide the next decomposition.
    fn select_guidance(
        &self,
        state: &ReasoningState,
        usage: &mut Usage,
    ) -> Result<Option<FactEdit>, SolveError> {
        let query = if state.hop_index == 0 {
            &state.original_question
        } else {
            &state.working_question
        };
        let candidates = self.memory.pre_retrieve(query, self.config.pre_retrieval_n)?;
        if candidates.is_empty() {
            return Ok(None);
        }
        let listing = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.edit.atomic_question))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = self.prompts.render(
            PromptKind::Judge,
            &[("candidates", listing), ("question", query.clone())],
        )?;
        let reply = self.call(&prompt, usage)?;
        match parse_judgment(&reply, candidates.len()) {
            Ok(choice) => Ok(choice.map(|i| candidates[i - 1].edit.clone())),
            Err(e) => {
                tracing::debug!(error = %e, "treating unparseable judgment as no guidance");
                Ok(None)
            }
        }
    }

    fn decompose(
        &self,
        state: &ReasoningState,
        guidance: Option<&FactEdit>,
        dynamic_prompt: &str,
        usage: &mut Usage,
    ) -> Result<StepOutput, SolveError> {
        let trace: String = state
            .trace
            .iter()
            .map(|s| format!("Subquestion: {}\nAnswer: {}\n", s.subquestion, s.answer))
            .collect();
        let mut slots = vec![
            ("dynamic_prompt", dynamic_prompt.to_string()),
            ("question", state.original_question.clone()),
            ("trace", trace),
        ];
        let kind = match guidance {
            Some(edit) => {
                let payload = match self.config.guidance_payload {
                    GuidancePayload::Question => edit.atomic_question.clone(),
                    GuidancePayload::FactStatement => edit.statement.clone(),
                };
                slots.push(("guidance", payload));
                PromptKind::DecomposeGuided
            }
            None => PromptKind::DecomposeStatic,
        };
        let prompt = self.prompts.render(kind, &slots)?;
        let reply = self.call(&prompt, usage)?;
        match parse_decomposition(&reply) {
            Ok(out) => Ok(out),
            Err(_) => {
                let retry = format!("{prompt}{FORMAT_REMINDER}");
                let reply = self.call(&retry, usage)?;
                parse_decomposition(&reply).map_err(|e| SolveError::Aborted {
                    reason: e.to_string(),
                    partial_trace: state.trace.clone(),
                })
            }
        }
    }

    fn answer_parametric(&self, subquestion: &str, usage: &mut Usage) -> Result<String, SolveError> {
        let prompt = self
            .prompts
            .render(PromptKind::Answer, &[("question", subquestion.to_string())])?;
        let reply = self.call(&prompt, usage)?;
        Ok(first_line(&reply).ok_or(LlmError::EmptyCompletion)?)
    }

    fn rewrite(
        &self,
        state: &ReasoningState,
        subquestion: &str,
        answer: &str,
        usage: &mut Usage,
    ) -> Result<String, SolveError> {
        let prompt = self.prompts.render(
            PromptKind::Rewrite,
            &[
                ("question", state.working_question.clone()),
                ("subquestion", subquestion.to_string()),
                ("answer", answer.to_string()),
            ],
        )?;
        let reply = self.call(&prompt, usage)?;
        Ok(first_line(&reply).unwrap_or_else(|| state.working_question.clone()))
    }

    pub fn solve(&self, question: &str) -> Result<SolveResult, SolveError> {
        if question.trim().is_empty() {
            return Err(SolveError::EmptyQuestion);
        }
        self.config.validate()?;
        let cfg = self.config;
        let mut usage = Usage::default();
        let mut uses = GuidanceUses::default();

        let case = if cfg.case_guidance_enabled {
            self.find_case(question)?
        } else {
            None
        };
        let dynamic_prompt = case.map_or_else(String::new, |c| {
            format!(
                "Here is how a similar question was solved:\n{}\n",
                c.record.render()
            )
        });
        if case.is_some() {
            uses.case = 1;
        }

        let mut state = ReasoningState::new(question);
        let mut backtracks = 0;
        let mut forced_unguided = false;

        let finish = |state: ReasoningState,
                      answer: String,
                      truncated: bool,
                      backtracks: usize,
                      uses: GuidanceUses,
                      usage: Usage| SolveResult {
            question: question.to_string(),
            final_answer: answer,
            retrieved_edit_count: state
                .trace
                .iter()
                .filter(|s| s.retrieved_edit.is_some())
                .count(),
            trace: state.trace,
            backtrack_count: backtracks,
            guidance_uses: uses,
            truncated,
            stack_depth_at_exit: state.backtrack_stack.len(),
            case_hit: case.map(|c| CaseHit {
                question: c.record.question.clone(),
                similarity: c.similarity,
            }),
            usage,
        };

        loop {
            if state.hop_index >= cfg.max_hops {
                let answer = state.trace.last().map(|s| s.answer.clone()).unwrap_or_default();
                return Ok(finish(state, answer, true, backtracks, uses, usage));
            }

            let guidance = if cfg.fact_guidance_enabled && !forced_unguided {
                self.select_guidance(&state, &mut usage)?
            } else {
                None
            };
            state.guidance_active = guidance.is_some();
            if guidance.is_some() {
                uses.fact += 1;
            }

            let output = self.decompose(&state, guidance.as_ref(), &dynamic_prompt, &mut usage)?;
            let subquestion = match output {
                StepOutput::FinalAnswer(answer) => {
                    if cfg.backtracking_enabled && backtracks < cfg.max_backtracks {
                        if let Some(saved) = state.backtrack_stack.pop() {
                            tracing::debug!(hop = saved.hop_index, "backtracking to unguided state");
                            state.restore(saved);
                            backtracks += 1;
                            forced_unguided = true;
                            continue;
                        }
                    }
                    return Ok(finish(state, answer, false, backtracks, uses, usage));
                }
                StepOutput::Subquestion(s) => s,
            };

            if guidance.is_some() {
                let saved = state.snapshot();
                state.backtrack_stack.push(saved);
            }
            forced_unguided = false;

            let hit = self
                .memory
                .precise_retrieve(&subquestion, cfg.precise_retrieval_threshold)?;
            let (answer, retrieved_edit) = match hit {
                Some(hit) => {
                    state.backtrack_stack.clear();
                    (hit.edit.new_object.clone(), Some(hit.edit.clone()))
                }
                None => (self.answer_parametric(&subquestion, &mut usage)?, None),
            };

            if cfg.fact_guidance_enabled {
                state.working_question = self.rewrite(&state, &subquestion, &answer, &mut usage)?;
            }
            state.push_step(DecompositionStep {
                subquestion,
                answer,
                retrieved_edit,
                guided_by: GuidedBy::from_flags(guidance.is_some(), case.is_some()),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedder, HashBagEmbedder};
    use crate::llm::{Matcher, MeteredBackend, ScriptedBackend};
    use std::sync::Arc;

    fn embedder() -> Arc<dyn Embedder> {
        Arc::new(HashBagEmbedder::default())
    }

    #[test]
    fn immediate_final_answer_with_empty_memory() {
        let memory = EditedFactMemory::new(embedder());
        let backend = ScriptedBackend::new("Final answer: Paris");
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig::default();
        let result = Engine::new(&memory, &backend, &prompts, &config)
            .solve("What is the capital of France?")
            .unwrap();
        assert_eq!(result.final_answer, "Paris");
        assert!(result.trace.is_empty());
        assert_eq!(result.backtrack_count, 0);
        assert_eq!(result.stack_depth_at_exit, 0);
        assert!(!result.truncated);
    }

    #[test]
    fn empty_question_is_rejected() {
        let memory = EditedFactMemory::new(embedder());
        let backend = ScriptedBackend::new("Final answer: x");
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig::default();
        let engine = Engine::new(&memory, &backend, &prompts, &config);
        assert!(matches!(engine.solve("  "), Err(SolveError::EmptyQuestion)));
    }

    #[test]
    fn hop_budget_truncates() {
        let memory = EditedFactMemory::new(embedder());
        let backend = ScriptedBackend::new("x")
            .rule(Matcher::Contains("### Task: decompose".into()), "Subquestion: again?")
            .rule(Matcher::Contains("### Task: answer".into()), "loop");
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig {
            max_hops: 3,
            ..EngineConfig::default()
        };
        let result = Engine::new(&memory, &backend, &prompts, &config)
            .solve("q?")
            .unwrap();
        assert!(result.truncated);
        assert_eq!(result.trace.len(), 3);
        assert_eq!(result.final_answer, "loop");
    }

    #[test]
    fn unparseable_decomposition_aborts_after_one_retry() {
        let memory = EditedFactMemory::new(embedder());
        let backend = MeteredBackend::with_log(ScriptedBackend::new("I do not know"));
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig::default();
        let err = Engine::new(&memory, &backend, &prompts, &config)
            .solve("q?")
            .unwrap_err();
        assert!(matches!(err, SolveError::Aborted { ref partial_trace, .. } if partial_trace.is_empty()));
        assert_eq!(backend.usage().snapshot().calls, 2);
        assert!(backend.prompts()[1].contains("Start your reply with"));
    }

    #[test]
    fn retry_recovers_when_second_reply_parses() {
        let memory = EditedFactMemory::new(embedder());
        let backend = ScriptedBackend::new("I do not know")
            .rule(Matcher::Contains("Start your reply with".into()), "Final answer: Rome");
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig::default();
        let result = Engine::new(&memory, &backend, &prompts, &config)
            .solve("q?")
            .unwrap();
        assert_eq!(result.final_answer, "Rome");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let memory = EditedFactMemory::new(embedder());
        let backend = ScriptedBackend::new("Final answer: x");
        let prompts = PromptCatalog::builtin();
        let config = EngineConfig {
            max_hops: 0,
            ..EngineConfig::default()
        };
        assert!(matches!(
            Engine::new(&memory, &backend, &prompts, &config).solve("q"),
            Err(SolveError::Config(_))
        ));
    }
}
