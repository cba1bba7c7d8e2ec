//! Edited-fact memory: stores edits with the embeddings of their atomic
//! questions and statements and answers coarse (top-n) and precise
//! (thresholded, re-ranked) retrieval queries.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;

use crate::embedding::{cosine, tokenize, Embedder, Embedding};
use crate::error::MemoryError;
use crate::model::FactEdit;

/// Minimum token overlap a precise-retrieval candidate must reach.
pub const RERANK_MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone)]
struct MemoryEntry {
    edit: FactEdit,
    question_vector: Embedding,
    statement_vector: Embedding,
}

/// A memory entry with its similarity to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEdit<'a> {
    pub edit: &'a FactEdit,
    pub score: f64,
    /// Position in insertion order.
    pub index: usize,
}

/// Shared-token ratio relative to the shorter of the two token sets.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let ta: HashSet<String> = tokenize(a).into_iter().collect();
    let tb: HashSet<String> = tokenize(b).into_iter().collect();
    let shorter = ta.len().min(tb.len());
    if shorter == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / shorter as f64
}

pub struct EditedFactMemory {
    entries: Vec<MemoryEntry>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for EditedFactMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EditedFactMemory")
            .field("embedder", &self.embedder.id())
            .field("len", &self.entries.len())
            .finish()
    }
}

impl EditedFactMemory {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            entries: Vec::new(),
            embedder,
        }
    }

    pub fn from_edits<'e>(
        embedder: Arc<dyn Embedder>,
        edits: impl IntoIterator<Item = &'e FactEdit>,
    ) -> Result<Self, MemoryError> {
        let mut memory = Self::new(embedder);
        for edit in edits {
            memory.insert(edit.clone())?;
        }
        Ok(memory)
    }

    pub fn embedder_id(&self) -> &str {
        self.embedder.id()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn edits(&self) -> impl Iterator<Item = &FactEdit> {
        self.entries.iter().map(|e| &e.edit)
    }

    pub fn contains(&self, edit: &FactEdit) -> bool {
        self.entries.iter().any(|e| &e.edit == edit)
    }

    /// Stores `edit`. An existing entry for the same normalized
    /// `(subject, relation)` is overwritten in place.
    pub fn insert(&mut self, edit: FactEdit) -> Result<(), MemoryError> {
        edit.validate()?;
        let question_vector = self.embedder.embed(&edit.atomic_question)?;
        let statement_vector = self.embedder.embed(&edit.statement)?;
        let slot = edit.slot();
        let entry = MemoryEntry {
            edit,
            question_vector,
            statement_vector,
        };
        match self.entries.iter_mut().find(|e| e.edit.slot() == slot) {
            Some(existing) => *existing = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    fn scored(&self, query: &str) -> Result<Vec<ScoredEdit<'_>>, MemoryError> {
        let query_vector = self.embedder.embed(query)?;
        self.entries
            .iter()
            .enumerate()
            .map(|(index, entry)| {
                Ok(ScoredEdit {
                    edit: &entry.edit,
                    score: cosine(&query_vector, &entry.question_vector)?,
                    index,
                })
            })
            .collect()
    }

    /// Coarse retrieval: the `n` entries whose atomic questions are most
    /// similar to `query`, best first, ties in insertion order. No threshold.
    pub fn pre_retrieve(&self, query: &str, n: usize) -> Result<Vec<ScoredEdit<'_>>, MemoryError> {
        if self.entries.is_empty() || n == 0 {
            return Ok(Vec::new());
        }
        let mut scored = self.scored(query)?;
        // stable sort keeps insertion order among equal scores
        scored.sort_by(|a, b| b.score.total_cmp(&a.score));
        scored.truncate(n);
        Ok(scored)
    }

    /// Precise retrieval: the best-matching entry, returned only when its
    /// cosine reaches `threshold` and its atomic question shares enough
    /// tokens with `subquestion`.
    pub fn precise_retrieve(
        &self,
        subquestion: &str,
        threshold: f64,
    ) -> Result<Option<ScoredEdit<'_>>, MemoryError> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let scored = self.scored(subquestion)?;
        let mut best: Option<ScoredEdit<'_>> = None;
        for candidate in scored {
            if best.is_none_or(|b| candidate.score > b.score) {
                best = Some(candidate);
            }
        }
        Ok(best.filter(|b| {
            b.score >= threshold
                && token_overlap(subquestion, &b.edit.atomic_question) >= RERANK_MIN_OVERLAP
        }))
    }

    /// Cosine between `query` and the statement form of each entry, in
    /// insertion order.
    pub fn statement_scores(&self, query: &str) -> Result<Vec<(usize, f64)>, MemoryError> {
        let query_vector = self.embedder.embed(query)?;
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| Ok((i, cosine(&query_vector, &e.statement_vector)?)))
            .collect()
    }

    /// JSON snapshot of the stored edits for inspection.
    pub fn export_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Export<'a> {
            embedder: &'a str,
            entries: Vec<&'a FactEdit>,
        }
        serde_json::to_value(Export {
            embedder: self.embedder.id(),
            entries: self.edits().collect(),
        })
        .expect("edits serialize")
    }
}
