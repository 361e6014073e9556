//! Event-segmented long-term conversational memory.
//!
//! The pipeline has three parts:
//!
//! 1. **Segmentation** ([`segmentation`]): a per-turn topic trace is embedded,
//!    adjacent-turn mutual information is computed under a Gaussian assumption,
//!    low-coupling positions become candidates, and an LLM intent judgment
//!    keeps only the candidates whose boundary probability clears a threshold.
//! 2. **Layered memory** ([`memory`]): every event becomes a unit holding a
//!    refined boundary description, a summary, the verbatim turns and a
//!    timestamp, indexed by two exact cosine matrices.
//! 3. **Coarse-to-fine retrieval** ([`retrieval`]): boundary anchors are scanned
//!    first, expanded into activated intervals, and the interval members are
//!    reranked by a fusion of summary and context similarity.
//!
//! [`evaluation`] carries the segmentation (Pk, WindowDiff, boundary F1,
//! composite score) and QA (token F1, BLEU-1) metric kernels plus batch drivers.
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature
//! (default) they run on rayon, otherwise sequentially with identical results.

pub mod dialogue;
pub mod evaluation;
pub mod memory;
pub mod par;
pub mod prompts;
pub mod providers;
pub mod retrieval;
pub mod segmentation;

pub use dialogue::{
    events_to_hypothesis, load_sessions, split_at_boundaries, BoundarySet, DialogueError,
    DialogueTurn, Event, LoadedCorpus, Session, SessionFormat,
};
pub use memory::{
    construct_memory, load_repository, save_repository, MemoryError, MemoryRepository,
    MemoryUnit, RepositoryBuilder, VectorIndex,
};
pub use providers::{
    ChatRequest, EmbeddingVector, HttpProvider, MockProvider, Provider, ProviderConfig,
    ProviderError, ScriptedReply,
};
pub use retrieval::{retrieve, RetrievalError, RetrievalParams, RetrievalResult};
pub use segmentation::{segment_session, SegmentError, SegmentationConfig, SegmentationOutcome};
