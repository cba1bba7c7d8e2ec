//! Library of previously solved cases, keyed by question embedding.

use std::path::Path;
use std::sync::Arc;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{cosine, stable_hash, Embedder, Embedding};
use crate::error::LibraryError;
use crate::model::CaseRecord;

/// A library hit and its similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMatch<'a> {
    pub record: &'a CaseRecord,
    pub similarity: f64,
    pub index: usize,
}

pub struct CaseLibrary {
    entries: Vec<(CaseRecord, Embedding)>,
    frozen: bool,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for CaseLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CaseLibrary")
            .field("embedder", &self.embedder.id())
            .field("len", &self.entries.len())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl CaseLibrary {
    /// An empty, unfrozen library.
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            entries: Vec::new(),
            frozen: false,
            embedder,
        }
    }

    /// Builds a library from `records`, skipping unsuccessful ones.
    pub fn from_records(
        embedder: Arc<dyn Embedder>,
        records: impl IntoIterator<Item = CaseRecord>,
    ) -> Result<Self, LibraryError> {
        let mut library = Self::new(embedder);
        for record in records.into_iter().filter(|r| r.succeeded) {
            library.append(record)?;
        }
        Ok(library)
    }

    /// Samples `sample_size` successful records uniformly without
    /// replacement. Deterministic for a fixed `seed`; keeps the source order
    /// of the sampled records.
    pub fn seed_from_cases(
        embedder: Arc<dyn Embedder>,
        records: &[CaseRecord],
        sample_size: usize,
        seed: u64,
    ) -> Result<Self, LibraryError> {
        Self::from_records(embedder, sample_records(records, sample_size, seed))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn records(&self) -> impl Iterator<Item = &CaseRecord> {
        self.entries.iter().map(|(r, _)| r)
    }

    pub fn append(&mut self, record: CaseRecord) -> Result<(), LibraryError> {
        if self.frozen {
            return Err(LibraryError::LibraryFrozen);
        }
        if !record.succeeded {
            return Err(LibraryError::RecordNotSuccessful);
        }
        record.validate()?;
        let vector = self.embedder.embed(&record.question)?;
        self.entries.push((record, vector));
        Ok(())
    }

    /// Similarities of `question` to every stored question, in insertion
    /// order.
    pub fn similarities(&self, question: &str) -> Result<Vec<f64>, LibraryError> {
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let query = self.embedder.embed(question)?;
        self.entries
            .iter()
            .map(|(_, v)| cosine(&query, v).map_err(LibraryError::from))
            .collect()
    }

    /// The most similar stored case with similarity at least `threshold`.
    /// Ties go to the earliest inserted record.
    pub fn lookup(
        &self,
        question: &str,
        threshold: f64,
    ) -> Result<Option<CaseMatch<'_>>, LibraryError> {
        let sims = self.similarities(question)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, sim) in sims.into_iter().enumerate() {
            if sim >= threshold && best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        Ok(best.map(|(index, similarity)| CaseMatch {
            record: &self.entries[index].0,
            similarity,
            index,
        }))
    }

    /// Random-case ablation: whenever [`CaseLibrary::lookup`] would return a
    /// case, returns a uniformly chosen *other* case instead (the same one if
    /// the library holds a single record). The choice depends only on
    /// `seed` and `question`.
    pub fn lookup_random(
        &self,
        question: &str,
        threshold: f64,
        seed: u64,
    ) -> Result<Option<CaseMatch<'_>>, LibraryError> {
        let Some(similar) = self.lookup(question, threshold)? else {
            return Ok(None);
        };
        if self.entries.len() == 1 {
            return Ok(Some(similar));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(question));
        let index = (0..self.entries.len())
            .filter(|&i| i != similar.index)
            .choose(&mut rng)
            .expect("library has another record");
        let similarity = self.similarities(question)?[index];
        Ok(Some(CaseMatch {
            record: &self.entries[index].0,
            similarity,
            index,
        }))
    }

    pub fn to_json(&self) -> Result<String, LibraryError> {
        let records: Vec<&CaseRecord> = self.records().collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LibraryError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads a library saved with [`CaseLibrary::save`]. The result is frozen.
    pub fn load(embedder: Arc<dyn Embedder>, path: impl AsRef<Path>) -> Result<Self, LibraryError> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<CaseRecord> = serde_json::from_str(&text)?;
        let mut library = Self::from_records(embedder, records)?;
        library.freeze();
        Ok(library)
    }
}

/// Uniform sample of up to `sample_size` successful records, without
/// replacement, in source order.
pub fn sample_records(records: &[CaseRecord], sample_size: usize, seed: u64) -> Vec<CaseRecord> {
    let successful: Vec<&CaseRecord> = records.iter().filter(|r| r.succeeded).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = sample_size.min(successful.len());
    let mut picked: Vec<usize> = (0..successful.len()).collect::<Vec<_>>();
    picked.shuffle(&mut rng);
    picked.truncate(take);
    picked.sort_unstable();
    picked.into_iter().map(|i| successful[i].clone()).collect()
}
