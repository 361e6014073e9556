//! Layered memory: one unit per event holding a refined boundary description
//! (level 1), a mechanically assembled summary (level 2) and the verbatim
//! turns (level 3), plus the exact cosine index over levels 1 and 2.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dialogue::{DialogueTurn, Event, Session};
use crate::par;
use crate::prompts::{keys, PromptSet};
use crate::providers::{EmbeddingVector, Provider, ProviderError};
use crate::segmentation::TopicTrace;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const UNITS_FILE: &str = "units.jsonl";
pub const LOCK_FILE: &str = ".esmem.lock";

/// Prefix of the summary-derived boundary used when generation fails.
pub const FALLBACK_BOUNDARY_PREFIX: &str = "Transitioned to: ";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("trace of length {trace_len} does not cover turns {start}..={end}")]
    TraceRange {
        start: usize,
        end: usize,
        trace_len: usize,
    },
    #[error("event {event_index}: {source}")]
    Provider {
        event_index: usize,
        #[source]
        source: ProviderError,
    },
    #[error("embedding dimension mismatch at unit {unit}: expected {expected}, found {found}")]
    DimMismatch {
        unit: usize,
        expected: usize,
        found: usize,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("repository schema version {found} is not supported (expected {expected}); migrate the repository")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("corrupt unit {unit} in {file} (last valid unit: {last_valid}): {message}")]
    Corrupt {
        file: String,
        unit: usize,
        last_valid: usize,
        message: String,
    },
    #[error("truncated units file: expected {expected} units, found {found} (last valid unit: {last_valid})")]
    Truncated {
        expected: usize,
        found: usize,
        last_valid: usize,
    },
    #[error("repository {0} is locked by another writer")]
    Locked(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MemoryError + '_ {
    move |source| MemoryError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUnit {
    /// 1-based position in the repository; chronological.
    pub event_index: usize,
    pub session_id: String,
    /// Inclusive turn range inside the source session.
    pub turn_start: usize,
    pub turn_end: usize,
    pub refined_boundary: String,
    /// False when the boundary text is the summary-derived fallback.
    pub boundary_generated: bool,
    pub summary: String,
    pub raw_context: Vec<DialogueTurn>,
    pub timestamp: String,
    pub e_bnd: EmbeddingVector,
    pub e_sum: EmbeddingVector,
}

impl MemoryUnit {
    /// Raw context as `[Event i | timestamp]` followed by `speaker: text` lines.
    pub fn render_context(&self) -> String {
        let mut out = format!("[Event {} | {}]", self.event_index, self.timestamp);
        for t in &self.raw_context {
            out.push('\n');
            out.push_str(&t.render());
        }
        out
    }
}

/// Two row-major matrices, row `i` belonging to unit `i + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    boundary: Vec<f64>,
    summary: Vec<f64>,
}

impl VectorIndex {
    pub fn build(units: &[MemoryUnit]) -> Result<Self, MemoryError> {
        let Some(first) = units.first() else {
            return Ok(Self::default());
        };
        let dim = first.e_bnd.dim();
        let mut boundary = Vec::with_capacity(dim * units.len());
        let mut summary = Vec::with_capacity(dim * units.len());
        for u in units {
            for v in [&u.e_bnd, &u.e_sum] {
                if v.dim() != dim {
                    return Err(MemoryError::DimMismatch {
                        unit: u.event_index,
                        expected: dim,
                        found: v.dim(),
                    });
                }
            }
            boundary.extend_from_slice(u.e_bnd.values());
            summary.extend_from_slice(u.e_sum.values());
        }
        Ok(Self {
            dim,
            boundary,
            summary,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.boundary.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, query: &EmbeddingVector) -> Result<(), MemoryError> {
        if query.dim() != self.dim {
            return Err(MemoryError::DimMismatch {
                unit: 0,
                expected: self.dim,
                found: query.dim(),
            });
        }
        Ok(())
    }

    /// Cosine of `query` against every boundary row.
    pub fn boundary_scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, MemoryError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        self.check(query)?;
        Ok(par::row_dots(&self.boundary, self.dim, query.values()))
    }

    /// Cosine of `query` against every summary row.
    pub fn summary_scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, MemoryError> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        self.check(query)?;
        Ok(par::row_dots(&self.summary, self.dim, query.values()))
    }

    /// Cosine of `query` against the summary row of unit `event_index` (1-based).
    pub fn summary_score(&self, event_index: usize, query: &EmbeddingVector) -> Option<f64> {
        if event_index == 0 || event_index > self.len() || query.dim() != self.dim {
            return None;
        }
        let row = &self.summary[(event_index - 1) * self.dim..event_index * self.dim];
        Some(row.iter().zip(query.values()).map(|(a, b)| a * b).sum())
    }

    pub fn boundary_row(&self, event_index: usize) -> &[f64] {
        &self.boundary[(event_index - 1) * self.dim..event_index * self.dim]
    }

    pub fn summary_row(&self, event_index: usize) -> &[f64] {
        &self.summary[(event_index - 1) * self.dim..event_index * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Turns taken from each side of a transition for boundary generation.
    pub boundary_context: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            boundary_context: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRepository {
    pub repo_id: String,
    pub schema_version: u32,
    pub config: Value,
    pub units: Vec<MemoryUnit>,
    index: VectorIndex,
}

impl MemoryRepository {
    pub fn new(repo_id: impl Into<String>, config: Value, units: Vec<MemoryUnit>) -> Result<Self, MemoryError> {
        for (i, u) in units.iter().enumerate() {
            if u.event_index != i + 1 {
                return Err(MemoryError::Invariant(format!(
                    "unit at position {} has event index {}",
                    i + 1,
                    u.event_index
                )));
            }
        }
        let index = VectorIndex::build(&units)?;
        Ok(Self {
            repo_id: repo_id.into(),
            schema_version: SCHEMA_VERSION,
            config,
            units,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn unit(&self, event_index: usize) -> Option<&MemoryUnit> {
        event_index.checked_sub(1).and_then(|i| self.units.get(i))
    }

    pub fn embedding_dim(&self) -> usize {
        self.index.dim()
    }
}

/// The exact (flat) index over a repository's embeddings.
pub fn index_repository(repo: &MemoryRepository) -> Result<VectorIndex, MemoryError> {
    VectorIndex::build(&repo.units)
}

/// Level-2 summary: the event's distinct topics in order of appearance, then
/// its distinct keywords. No model call.
pub fn build_summary(event: &Event, trace: &TopicTrace) -> Result<String, MemoryError> {
    if event.start == 0 || event.end < event.start || event.end > trace.len() {
        return Err(MemoryError::TraceRange {
            start: event.start,
            end: event.end,
            trace_len: trace.len(),
        });
    }
    let entries = &trace.entries[event.start - 1..event.end];
    let mut seen = BTreeSet::new();
    let topics: Vec<&str> = entries
        .iter()
        .map(|e| e.topic.as_str())
        .filter(|t| seen.insert(t.to_lowercase()))
        .collect();
    let mut seen = BTreeSet::new();
    let keywords: Vec<&str> = entries
        .iter()
        .flat_map(|e| e.keywords.iter().map(String::as_str))
        .filter(|k| seen.insert(k.to_lowercase()))
        .collect();
    let mut out = format!("Topics: {}.", topics.join("; "));
    if !keywords.is_empty() {
        out.push_str(&format!(" Keywords: {}.", keywords.join(", ")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinedBoundary {
    pub text: String,
    pub generated: bool,
}

/// The predecessor of an event as seen by boundary generation.
#[derive(Debug, Clone, Copy)]
pub struct PreviousEvent<'a> {
    pub turns: &'a [DialogueTurn],
    pub summary: &'a str,
}

/// Turns shown to the boundary generator: the last `context` turns of the
/// previous event followed by the first `context` turns of this one.
pub fn boundary_context_turns<'a>(
    prev: Option<&'a [DialogueTurn]>,
    event: &'a Event,
    context: usize,
) -> Vec<&'a DialogueTurn> {
    let mut out = Vec::new();
    if let Some(prev) = prev {
        out.extend(&prev[prev.len().saturating_sub(context)..]);
    }
    out.extend(event.turns.iter().take(context));
    out
}

/// Level-1 refined boundary for `event`. With no predecessor the opening
/// template is used. Provider failure falls back to `"Transitioned to: " + summary`.
pub fn build_refined_boundary(
    prev: Option<PreviousEvent<'_>>,
    event: &Event,
    summary: &str,
    context: usize,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> RefinedBoundary {
    let turns = boundary_context_turns(prev.map(|p| p.turns), event, context.max(1));
    let rendered = turns.iter().map(|t| t.render()).collect::<Vec<_>>().join("\n");
    let key = keys::boundary(&event.session_id, event.start, event.end);
    let req = match prev {
        Some(p) => prompts.boundary.render(
            key,
            &[
                ("previous_summary", p.summary),
                ("current_summary", summary),
                ("boundary_context", &rendered),
            ],
        ),
        None => prompts.boundary_opening.render(
            key,
            &[("current_summary", summary), ("boundary_context", &rendered)],
        ),
    };
    match provider.chat(&req) {
        Ok(text) if !text.trim().is_empty() => RefinedBoundary {
            text: text.trim().to_owned(),
            generated: true,
        },
        outcome => {
            let reason = match outcome {
                Err(e) => e.to_string(),
                Ok(_) => "empty reply".to_owned(),
            };
            log::warn!(
                "{} event {}-{}: boundary generation failed ({reason}); using summary fallback",
                event.session_id,
                event.start,
                event.end
            );
            RefinedBoundary {
                text: format!("{FALLBACK_BOUNDARY_PREFIX}{summary}"),
                generated: false,
            }
        }
    }
}

/// Incrementally assembles a repository from segmented sessions in
/// chronological order. The first event of a later session takes the last
/// event of the previous session as its predecessor.
pub struct RepositoryBuilder<'a> {
    repo_id: String,
    config: Value,
    memory: MemoryConfig,
    provider: &'a dyn Provider,
    prompts: &'a PromptSet,
    units: Vec<MemoryUnit>,
}

impl<'a> RepositoryBuilder<'a> {
    pub fn new(
        repo_id: impl Into<String>,
        config: Value,
        memory: MemoryConfig,
        provider: &'a dyn Provider,
        prompts: &'a PromptSet,
    ) -> Self {
        Self {
            repo_id: repo_id.into(),
            config,
            memory,
            provider,
            prompts,
            units: Vec::new(),
        }
    }

    pub fn add_session(
        &mut self,
        session: &Session,
        events: &[Event],
        trace: &TopicTrace,
    ) -> Result<(), MemoryError> {
        crate::dialogue::events_to_hypothesis(events)
            .ok()
            .filter(|h| h.total_turns == session.len())
            .ok_or_else(|| {
                MemoryError::Invariant(format!(
                    "events do not tile session {}",
                    session.session_id
                ))
            })?;
        let base = self.units.len();
        let summaries: Vec<String> = events
            .iter()
            .map(|e| build_summary(e, trace))
            .collect::<Result<_, _>>()?;

        let last = self.units.last();
        let prev_turns: Vec<Option<PreviousEvent<'_>>> = (0..events.len())
            .map(|i| match i {
                0 => last.map(|u| PreviousEvent {
                    turns: &u.raw_context,
                    summary: &u.summary,
                }),
                _ => Some(PreviousEvent {
                    turns: &events[i - 1].turns,
                    summary: &summaries[i - 1],
                }),
            })
            .collect();
        let context = self.memory.boundary_context;
        let (provider, prompts) = (self.provider, self.prompts);
        let idx: Vec<usize> = (0..events.len()).collect();
        let boundaries = par::map(&idx, |&i| {
            build_refined_boundary(prev_turns[i], &events[i], &summaries[i], context, provider, prompts)
        });

        let embed = |texts: Vec<String>| {
            if texts.is_empty() {
                return Ok(Vec::new());
            }
            provider.embed(&texts).map_err(|source| MemoryError::Provider {
                event_index: base + 1,
                source,
            })
        };
        let e_bnd = embed(boundaries.iter().map(|b| b.text.clone()).collect())?;
        let e_sum = embed(summaries.clone())?;

        for (i, ((event, boundary), (summary, (bnd, sum)))) in events
            .iter()
            .zip(boundaries)
            .zip(summaries.into_iter().zip(e_bnd.into_iter().zip(e_sum)))
            .enumerate()
        {
            self.units.push(MemoryUnit {
                event_index: base + i + 1,
                session_id: session.session_id.clone(),
                turn_start: event.start,
                turn_end: event.end,
                refined_boundary: boundary.text,
                boundary_generated: boundary.generated,
                summary,
                raw_context: event.turns.clone(),
                timestamp: event.timestamp(session.date()),
                e_bnd: bnd,
                e_sum: sum,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<MemoryRepository, MemoryError> {
        MemoryRepository::new(self.repo_id, self.config, self.units)
    }
}

/// Builds the repository of a single segmented session.
pub fn construct_memory(
    events: &[Event],
    trace: &TopicTrace,
    session: &Session,
    cfg: &MemoryConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<MemoryRepository, MemoryError> {
    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    let mut builder =
        RepositoryBuilder::new(session.session_id.clone(), snapshot, cfg.clone(), provider, prompts);
    builder.add_session(session, events, trace)?;
    builder.finish()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub repo_id: String,
    pub n: usize,
    pub schema_version: u32,
    pub embedding_dim: usize,
    pub config: Value,
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, MemoryError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(MemoryError::Locked(dir.display().to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), MemoryError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(contents).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes `manifest.json` and `units.jsonl` via temp-file + rename while
/// holding the directory's lock file.
pub fn save_repository(repo: &MemoryRepository, dir: &Path) -> Result<(), MemoryError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let _lock = DirLock::acquire(dir)?;
    let mut units = String::new();
    for u in &repo.units {
        units.push_str(&serde_json::to_string(u).expect("unit serializes"));
        units.push('\n');
    }
    let manifest = Manifest {
        repo_id: repo.repo_id.clone(),
        n: repo.len(),
        schema_version: repo.schema_version,
        embedding_dim: repo.embedding_dim(),
        config: repo.config.clone(),
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    write_atomic(&dir.join(UNITS_FILE), units.as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest_json.as_bytes())
}

pub fn load_repository(dir: &Path) -> Result<MemoryRepository, MemoryError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| MemoryError::Corrupt {
        file: MANIFEST_FILE.into(),
        unit: 0,
        last_valid: 0,
        message: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(MemoryError::SchemaMismatch {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let units_path = dir.join(UNITS_FILE);
    let raw = fs::read_to_string(&units_path).map_err(io_err(&units_path))?;
    let mut units: Vec<MemoryUnit> = Vec::with_capacity(manifest.n);
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let position = units.len() + 1;
        let corrupt = |message: String| MemoryError::Corrupt {
            file: UNITS_FILE.into(),
            unit: position,
            last_valid: position - 1,
            message,
        };
        let unit: MemoryUnit = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if unit.event_index != position {
            return Err(corrupt(format!("event index {} out of order", unit.event_index)));
        }
        for v in [&unit.e_bnd, &unit.e_sum] {
            if v.dim() != manifest.embedding_dim {
                return Err(corrupt(format!(
                    "embedding dim {} != manifest dim {}",
                    v.dim(),
                    manifest.embedding_dim
                )));
            }
            EmbeddingVector::from_normalized(v.values().to_vec())
                .map_err(|e| corrupt(e.to_string()))?;
        }
        units.push(unit);
    }
    if units.len() != manifest.n {
        return Err(MemoryError::Truncated {
            expected: manifest.n,
            found: units.len(),
            last_valid: units.len(),
        });
    }
    let mut repo = MemoryRepository::new(manifest.repo_id, manifest.config, units)?;
    repo.schema_version = manifest.schema_version;
    Ok(repo)
}
