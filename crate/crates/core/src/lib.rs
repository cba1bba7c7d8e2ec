//! Multi-hop question answering over edited facts: an edited-fact memory
//! that guides question decomposition, a library of solved cases used as
//! dynamic prompts, backtracking out of misleading guidance, and an
//! evaluation harness with batch-editing settings.

pub mod cases;
pub mod controller;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod llm;
pub mod memory;
pub mod model;
pub mod prompts;
pub mod synth;
pub mod transport;

pub use cases::{CaseLibrary, CaseMatch};
pub use controller::{CaseSelection, Engine, SolveResult};
pub use dataset::EvalCase;
pub use embedding::{CachedEmbedder, Embedder, Embedding, HashBagEmbedder, RemoteEmbedder};
pub use error::{LibraryError, LlmError, SolveError};
pub use eval::{run_eval, BatchSetting, EvalContext, EvalOptions, EvalReport};
pub use llm::{HttpChatBackend, LlmBackend, Matcher, MeteredBackend, ScriptedBackend};
pub use memory::EditedFactMemory;
pub use model::{CaseRecord, DecompositionStep, EngineConfig, FactEdit, FactTriple, GuidancePayload};
pub use prompts::{PromptCatalog, PromptKind};
