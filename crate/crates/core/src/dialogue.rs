//! Dialogue domain types and corpus ingestion.
//!
//! Boundary positions use one convention everywhere: position `t` is the
//! break between turn `t` and turn `t + 1` (1-based), so valid positions lie
//! in `[1, T - 1]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Topic text substituted for turns with empty text.
pub const EMPTY_TURN_TOPIC: &str = "(empty)";

/// Timestamp used when neither the turn nor the session carries one.
pub const UNKNOWN_TIMESTAMP: &str = "unknown";

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invariant violation: {0}")]
    Invariant(String),
}

/// Input file layouts understood by [`load_sessions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionFormat {
    /// One session object per line.
    Jsonl,
    /// Tab-separated `utterance<TAB>segment-id`, blank line between dialogues.
    Dialseg,
}

impl std::str::FromStr for SessionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "dialseg" | "tsv" => Ok(Self::Dialseg),
            other => Err(format!("unknown corpus format `{other}` (expected jsonl or dialseg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    /// 1-based position inside the owning session; reassigned on load.
    #[serde(default)]
    pub turn_index: usize,
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl DialogueTurn {
    pub fn new(turn_index: usize, speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            turn_index,
            speaker: speaker.into(),
            text: text.into(),
            timestamp: None,
        }
    }

    /// Empty (or whitespace-only) turns are kept for index alignment but
    /// flagged so topic extraction can substitute [`EMPTY_TURN_TOPIC`].
    pub fn is_degenerate(&self) -> bool {
        self.text.trim().is_empty()
    }

    /// `speaker: text`, the form used in prompts and assembled contexts.
    pub fn render(&self) -> String {
        if self.speaker.is_empty() {
            self.text.clone()
        } else {
            format!("{}: {}", self.speaker, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub turns: Vec<DialogueTurn>,
}

impl Session {
    /// Builds a session, renumbering turns 1..T in the given order.
    pub fn new(
        session_id: impl Into<String>,
        metadata: BTreeMap<String, String>,
        mut turns: Vec<DialogueTurn>,
    ) -> Self {
        for (i, turn) in turns.iter_mut().enumerate() {
            turn.turn_index = i + 1;
        }
        Self {
            session_id: session_id.into(),
            metadata,
            turns,
        }
    }

    /// Convenience constructor from `(speaker, text)` pairs.
    pub fn from_texts<S: AsRef<str>>(session_id: impl Into<String>, turns: &[(S, S)]) -> Self {
        let turns = turns
            .iter()
            .map(|(speaker, text)| DialogueTurn::new(0, speaker.as_ref(), text.as_ref()))
            .collect();
        Self::new(session_id, BTreeMap::new(), turns)
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Session date from metadata (`date` or `session_date`).
    pub fn date(&self) -> Option<&str> {
        self.metadata
            .get("date")
            .or_else(|| self.metadata.get("session_date"))
            .map(String::as_str)
    }

    /// Checks that turn indices run 1..T without gaps.
    pub fn validate(&self) -> Result<(), DialogueError> {
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i + 1 {
                return Err(DialogueError::Invariant(format!(
                    "session {}: turn at position {} has index {}",
                    self.session_id,
                    i + 1,
                    turn.turn_index
                )));
            }
        }
        Ok(())
    }

    /// Concatenates several sessions into one stream, renumbering turns.
    /// Turns without a timestamp inherit their source session's date.
    pub fn concat(session_id: impl Into<String>, sessions: &[Session]) -> Session {
        let metadata = sessions.first().map(|s| s.metadata.clone()).unwrap_or_default();
        let turns = sessions
            .iter()
            .flat_map(|s| {
                let date = s.date().map(str::to_owned);
                s.turns.iter().cloned().map(move |mut t| {
                    if t.timestamp.is_none() {
                        t.timestamp = date.clone();
                    }
                    t
                })
            })
            .collect();
        Session::new(session_id, metadata, turns)
    }
}

/// A contiguous run of turns `[start, end]` (inclusive, 1-based) of one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub session_id: String,
    pub event_index: usize,
    pub start: usize,
    pub end: usize,
    pub turns: Vec<DialogueTurn>,
}

impl Event {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// First turn's timestamp, else the session date, else `"unknown"`.
    pub fn timestamp(&self, session_date: Option<&str>) -> String {
        self.turns
            .first()
            .and_then(|t| t.timestamp.clone())
            .or_else(|| session_date.map(str::to_owned))
            .unwrap_or_else(|| UNKNOWN_TIMESTAMP.to_owned())
    }
}

/// Sorted, deduplicated boundary positions over a dialogue of `total_turns`.
///
/// Serves both as the gold reference and as a system hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub positions: Vec<usize>,
    pub total_turns: usize,
}

pub type SegReference = BoundarySet;
pub type SegHypothesis = BoundarySet;

impl BoundarySet {
    /// Sorts and deduplicates `positions`, rejecting any outside `[1, T-1]`.
    pub fn new(mut positions: Vec<usize>, total_turns: usize) -> Result<Self, DialogueError> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&bad) = positions.iter().find(|&&p| p == 0 || p >= total_turns) {
            return Err(DialogueError::Invariant(format!(
                "boundary position {bad} outside [1, {}]",
                total_turns.saturating_sub(1)
            )));
        }
        Ok(Self {
            positions,
            total_turns,
        })
    }

    pub fn empty(total_turns: usize) -> Self {
        Self {
            positions: Vec::new(),
            total_turns,
        }
    }

    /// Segment lengths (masses) implied by the boundaries.
    pub fn masses(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.positions.len() + 1);
        let mut prev = 0;
        for &p in &self.positions {
            out.push(p - prev);
            prev = p;
        }
        out.push(self.total_turns - prev);
        out
    }

    pub fn segment_count(&self) -> usize {
        self.positions.len() + 1
    }
}

/// Result of [`load_sessions`]: sessions in file order, plus gold references
/// when the format carries them (dialseg). `references[i]` belongs to
/// `sessions[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedCorpus {
    pub sessions: Vec<Session>,
    pub references: Vec<SegReference>,
}

pub fn load_sessions(path: &Path, format: SessionFormat) -> Result<LoadedCorpus, DialogueError> {
    let raw = fs::read_to_string(path).map_err(|source| DialogueError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        SessionFormat::Jsonl => Ok(LoadedCorpus {
            sessions: parse_jsonl(&raw)?,
            references: Vec::new(),
        }),
        SessionFormat::Dialseg => parse_dialseg(&raw),
    }
}

pub fn parse_jsonl(raw: &str) -> Result<Vec<Session>, DialogueError> {
    let mut sessions = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let session: Session = serde_json::from_str(line).map_err(|e| DialogueError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sessions.push(Session::new(session.session_id, session.metadata, session.turns));
    }
    Ok(sessions)
}

pub fn to_jsonl(sessions: &[Session]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s).expect("session serializes"));
        out.push('\n');
    }
    out
}

/// Parses the dialseg TSV layout. Dialogues are named `dialogue-<n>` (1-based)
/// and turns get an empty speaker.
pub fn parse_dialseg(raw: &str) -> Result<LoadedCorpus, DialogueError> {
    let mut corpus = LoadedCorpus::default();
    let mut turns: Vec<DialogueTurn> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();

    let mut flush = |turns: &mut Vec<DialogueTurn>, labels: &mut Vec<i64>| {
        if turns.is_empty() {
            return;
        }
        let n = corpus.sessions.len() + 1;
        let positions = labels
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] != w[1])
            .map(|(i, _)| i + 1)
            .collect();
        let total = turns.len();
        corpus.sessions.push(Session::new(
            format!("dialogue-{n}"),
            BTreeMap::new(),
            std::mem::take(turns),
        ));
        corpus.references.push(BoundarySet {
            positions,
            total_turns: total,
        });
        labels.clear();
    };

    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            flush(&mut turns, &mut labels);
            continue;
        }
        let (text, label) = line.rsplit_once('\t').ok_or_else(|| DialogueError::Parse {
            line: lineno,
            message: "expected `utterance<TAB>segment-id`".into(),
        })?;
        let label: i64 = label.trim().parse().map_err(|_| DialogueError::Parse {
            line: lineno,
            message: format!("segment id `{}` is not an integer", label.trim()),
        })?;
        if let Some(&prev) = labels.last() {
            if label < prev {
                return Err(DialogueError::Parse {
                    line: lineno,
                    message: format!("segment id decreases from {prev} to {label}"),
                });
            }
        }
        labels.push(label);
        turns.push(DialogueTurn::new(0, "", text));
    }
    flush(&mut turns, &mut labels);
    Ok(corpus)
}

/// Splits a session into the events delimited by `boundaries`.
pub fn split_at_boundaries(
    session: &Session,
    boundaries: &[usize],
) -> Result<Vec<Event>, DialogueError> {
    let set = BoundarySet::new(boundaries.to_vec(), session.len())?;
    let mut events = Vec::with_capacity(set.positions.len() + 1);
    let mut start = 1;
    for end in set.positions.iter().copied().chain(std::iter::once(session.len())) {
        events.push(Event {
            session_id: session.session_id.clone(),
            event_index: events.len() + 1,
            start,
            end,
            turns: session.turns[start - 1..end].to_vec(),
        });
        start = end + 1;
    }
    Ok(events)
}

/// Boundary positions implied by a tiling of events: every event end but the last.
pub fn events_to_hypothesis(events: &[Event]) -> Result<SegHypothesis, DialogueError> {
    let mut expected_start = 1;
    for e in events {
        if e.start != expected_start || e.end < e.start {
            return Err(DialogueError::Invariant(format!(
                "events do not tile the session: event {} spans [{}, {}], expected start {}",
                e.event_index, e.start, e.end, expected_start
            )));
        }
        expected_start = e.end + 1;
    }
    let total_turns = expected_start - 1;
    let positions = events
        .iter()
        .take(events.len().saturating_sub(1))
        .map(|e| e.end)
        .collect();
    Ok(BoundarySet {
        positions,
        total_turns,
    })
}
