//! Coarse-to-fine retrieval over a [`MemoryRepository`].
//!
//! 1. Boundary scan: cosine of the query against every refined-boundary
//!    embedding; the top `anchor_k` events become anchors.
//! 2. Interval expansion: every event within `window_w` of an anchor joins the
//!    candidate set, inheriting the best covering anchor score as `S_ctx`.
//! 3. Fusion: `Score = α·S_sum + (1 - α)·S_ctx` with `S_sum` the summary
//!    cosine; the top `final_k` events are kept and their raw turns assembled
//!    in chronological order.
//!
//! Every ranking breaks ties by ascending event index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryError, MemoryRepository};
use crate::prompts::{keys, PromptSet};
use crate::providers::{EmbeddingVector, Provider, ProviderError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("repository is empty")]
    EmptyRepository,
    #[error("retrieval result is empty")]
    EmptyResult,
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("{stage}: {source}")]
    Provider {
        stage: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("{stage}: {source}")]
    Index {
        stage: &'static str,
        #[source]
        source: MemoryError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalParams {
    pub anchor_k: usize,
    pub window_w: usize,
    pub alpha: f64,
    pub final_k: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            anchor_k: 10,
            window_w: 3,
            alpha: 0.70,
            final_k: 10,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.anchor_k == 0 {
            return Err(RetrievalError::InvalidParams("anchor_k must be >= 1".into()));
        }
        if self.final_k == 0 {
            return Err(RetrievalError::InvalidParams("final_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RetrievalError::InvalidParams(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub event: usize,
    pub sim_bnd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEvent {
    pub event: usize,
    pub s_ctx: f64,
    pub s_sum: f64,
    pub score: f64,
}

/// Descending by score, then ascending by index.
pub fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Candidate event → inherited context score.
pub type CandidateEventSet = BTreeMap<usize, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub anchors: Vec<Anchor>,
    /// Every candidate, ranked by fused score.
    pub candidates: Vec<ScoredEvent>,
    /// Top-K event indices in rank order.
    pub selected: Vec<usize>,
    /// Raw contexts of the selected events in chronological order.
    pub context_text: String,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Selected events in chronological (index) order.
    pub fn chronological(&self) -> Vec<usize> {
        let mut v = self.selected.clone();
        v.sort_unstable();
        v
    }
}

/// Top-`k` events by boundary similarity to `query`.
pub fn boundary_scan(
    query: &EmbeddingVector,
    repo: &MemoryRepository,
    k: usize,
) -> Result<Vec<Anchor>, RetrievalError> {
    if repo.is_empty() {
        return Err(RetrievalError::EmptyRepository);
    }
    let scores = repo
        .index()
        .boundary_scores(query)
        .map_err(|source| RetrievalError::Index {
            stage: "boundary scan",
            source,
        })?;
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().map(|(i, s)| (i + 1, s)).collect();
    ranked.sort_by(|a, b| rank_order(*a, *b));
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(event, sim_bnd)| Anchor { event, sim_bnd })
        .collect())
}

/// Union of `[a - w, a + w] ∩ [1, n]` over anchors; each member keeps the
/// maximum score among the anchors covering it.
pub fn expand_intervals(anchors: &[Anchor], w: usize, n: usize) -> CandidateEventSet {
    let mut out = CandidateEventSet::new();
    for a in anchors {
        if a.event == 0 || a.event > n {
            continue;
        }
        let lo = a.event.saturating_sub(w).max(1);
        let hi = (a.event + w).min(n);
        for j in lo..=hi {
            out.entry(j)
                .and_modify(|s| {
                    if a.sim_bnd > *s {
                        *s = a.sim_bnd
                    }
                })
                .or_insert(a.sim_bnd);
        }
    }
    out
}

/// Fused score of one candidate.
pub fn fuse(alpha: f64, s_sum: f64, s_ctx: f64) -> f64 {
    alpha * s_sum + (1.0 - alpha) * s_ctx
}

/// Scores every candidate and ranks them. Returns all scored candidates in
/// rank order; the caller keeps the first `K`.
pub fn rerank_fuse(
    query: &EmbeddingVector,
    candidates: &CandidateEventSet,
    repo: &MemoryRepository,
    alpha: f64,
) -> Vec<ScoredEvent> {
    let index = repo.index();
    let mut scored: Vec<ScoredEvent> = candidates
        .iter()
        .filter_map(|(&event, &s_ctx)| {
            let s_sum = index.summary_score(event, query)?;
            Some(ScoredEvent {
                event,
                s_ctx,
                s_sum,
                score: fuse(alpha, s_sum, s_ctx),
            })
        })
        .collect();
    scored.sort_by(|a, b| rank_order((a.event, a.score), (b.event, b.score)));
    scored
}

/// Renders the raw contexts of `events` in chronological order.
pub fn assemble_context(repo: &MemoryRepository, events: &[usize]) -> String {
    let mut sorted = events.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .filter_map(|&e| repo.unit(e))
        .map(|u| u.render_context())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The three stages given an already-embedded query.
pub fn retrieve_embedded(
    query: &str,
    e_q: &EmbeddingVector,
    repo: &MemoryRepository,
    params: &RetrievalParams,
) -> Result<RetrievalResult, RetrievalError> {
    params.validate()?;
    let anchors = boundary_scan(e_q, repo, params.anchor_k)?;
    let c = expand_intervals(&anchors, params.window_w, repo.len());
    let candidates = rerank_fuse(e_q, &c, repo, params.alpha);
    let selected: Vec<usize> = candidates
        .iter()
        .take(params.final_k)
        .map(|s| s.event)
        .collect();
    let context_text = assemble_context(repo, &selected);
    Ok(RetrievalResult {
        query: query.to_owned(),
        anchors,
        candidates,
        selected,
        context_text,
    })
}

/// Embeds `query` once and runs the full coarse-to-fine pipeline.
pub fn retrieve(
    query: &str,
    repo: &MemoryRepository,
    params: &RetrievalParams,
    provider: &dyn Provider,
) -> Result<RetrievalResult, RetrievalError> {
    if repo.is_empty() {
        return Err(RetrievalError::EmptyRepository);
    }
    let e_q = provider
        .embed_one(query)
        .map_err(|source| RetrievalError::Provider {
            stage: "query embedding",
            source,
        })?;
    retrieve_embedded(query, &e_q, repo, params)
}

/// Generates an answer from the retrieved raw contexts with one chat call.
pub fn compose_answer(
    query: &str,
    result: &RetrievalResult,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<String, RetrievalError> {
    if result.is_empty() {
        return Err(RetrievalError::EmptyResult);
    }
    let req = prompts.answer.render(
        keys::answer(query),
        &[("context", &result.context_text), ("query", query)],
    );
    provider
        .chat(&req.with_max_tokens(256))
        .map_err(|source| RetrievalError::Provider {
            stage: "answer generation",
            source,
        })
}
