//! Two-stage dynamic event segmentation.
//!
//! Stage 1 extracts a recurrent per-turn topic trace, embeds it, and measures
//! the coupling of each adjacent pair `(h_t, h_{t+1})` as Gaussian mutual
//! information `I_t = -½ ln(1 - ρ_t²)`, where `ρ_t` is the Pearson correlation
//! across embedding dimensions. Positions at or below the nearest-rank
//! `q`-quantile of `I` become candidates.
//!
//! Stage 2 asks the LLM for the two most probable intent labels at each
//! candidate, maps them to boundary probabilities (`c` for shift labels,
//! `1 - c` for continuation labels), averages the highest- and
//! lowest-confidence mappings into `p_eb`, and keeps candidates with
//! `p_eb >= tau_c`.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{split_at_boundaries, DialogueError, Event, Session, EMPTY_TURN_TOPIC};
use crate::par;
use crate::prompts::{keys, PromptSet};
use crate::providers::{EmbeddingVector, Provider, ProviderError};

/// `1 - ρ²` is clamped to at least this before taking the log.
pub const RHO_SQ_MARGIN: f64 = 1e-12;

/// Variances below this are treated as zero (constant vector).
pub const MIN_VARIANCE: f64 = 1e-12;

/// Largest value [`pearson_mi`] can return: `-½ ln(1e-12) ≈ 13.8155`.
pub fn mi_cap() -> f64 {
    -0.5 * RHO_SQ_MARGIN.ln()
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("session too short to segment (T = {0})")]
    TooShort(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("vectors need at least 2 dimensions, got {0}")]
    TooFewDims(usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("topic extraction failed at turn {turn} after {completed} completed turn(s): {source}")]
    TopicExtraction {
        turn: usize,
        completed: usize,
        partial: Box<TopicTrace>,
        #[source]
        source: ProviderError,
    },
    #[error("{stage}: {source}")]
    Provider {
        stage: &'static str,
        #[source]
        source: ProviderError,
    },
    #[error("intent judgment failed at position {position}: {message}")]
    Judgment { position: usize, message: String },
    #[error("all {0} intent judgments failed")]
    AllJudgmentsFailed(usize),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

// ---------------------------------------------------------------------------
// Configuration and label taxonomy
// ---------------------------------------------------------------------------

/// Whether an intent label signals a new event or a continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Shift,
    Cont,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub polarity: Polarity,
    #[serde(default)]
    pub description: String,
}

/// Intent label taxonomy, keyed by upper-case label name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, LabelSpec>", into = "BTreeMap<String, LabelSpec>")]
pub struct LabelSet(BTreeMap<String, LabelSpec>);

impl From<BTreeMap<String, LabelSpec>> for LabelSet {
    fn from(map: BTreeMap<String, LabelSpec>) -> Self {
        Self(map.into_iter().map(|(k, v)| (k.to_ascii_uppercase(), v)).collect())
    }
}

impl From<LabelSet> for BTreeMap<String, LabelSpec> {
    fn from(set: LabelSet) -> Self {
        set.0
    }
}

impl LabelSet {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn with(mut self, name: &str, polarity: Polarity, description: &str) -> Self {
        self.0.insert(
            name.to_ascii_uppercase(),
            LabelSpec {
                polarity,
                description: description.to_owned(),
            },
        );
        self
    }

    pub fn polarity(&self, name: &str) -> Option<Polarity> {
        self.0.get(&name.to_ascii_uppercase()).map(|s| s.polarity)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        let has = |p| self.0.values().any(|s| s.polarity == p);
        if !has(Polarity::Shift) || !has(Polarity::Cont) {
            return Err(SegmentError::InvalidConfig(
                "label set needs at least one shift and one cont label".into(),
            ));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        self.0
            .iter()
            .map(|(name, spec)| {
                let kind = match spec.polarity {
                    Polarity::Shift => "starts a new event",
                    Polarity::Cont => "continues the current event",
                };
                format!("- {name} ({kind}): {}", spec.description)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::new()
            .with("TOPIC_SHIFT", Polarity::Shift, "the speaker moves to a different topic")
            .with("TOPIC_INTRO", Polarity::Shift, "the speaker introduces a new topic or task")
            .with(
                "DETAIL_ELABORATE",
                Polarity::Cont,
                "the speaker adds details to the ongoing topic",
            )
            .with(
                "DIRECT_RESP",
                Polarity::Cont,
                "the speaker directly responds to the previous turn",
            )
    }
}

/// Population over which the MI quantile is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileScope {
    #[default]
    Session,
    Conversation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub quantile: f64,
    pub tau_c: f64,
    pub context_window: usize,
    pub quantile_scope: QuantileScope,
    /// Merge all sessions of a conversation into one stream before segmenting.
    pub concat_sessions: bool,
    pub labels: LabelSet,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            quantile: 0.35,
            tau_c: 0.75,
            context_window: 2,
            quantile_scope: QuantileScope::Session,
            concat_sessions: false,
            labels: LabelSet::default(),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(SegmentError::InvalidConfig(format!(
                "quantile {} outside (0, 1]",
                self.quantile
            )));
        }
        if !(self.tau_c >= 0.0 && self.tau_c <= 1.0) {
            return Err(SegmentError::InvalidConfig(format!(
                "tau_c {} outside [0, 1]",
                self.tau_c
            )));
        }
        if self.context_window == 0 {
            return Err(SegmentError::InvalidConfig("context_window must be >= 1".into()));
        }
        self.labels.validate()
    }
}

// ---------------------------------------------------------------------------
// Stage 1: topic trace and MI kernel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub topic: String,
    pub keywords: Vec<String>,
}

/// Per-turn topics; `entries[t - 1]` belongs to turn `t`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicTrace {
    pub entries: Vec<TopicEntry>,
}

impl TopicTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn topics(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.topic.clone()).collect()
    }
}

/// Parses a `Topic: ...` / `Keywords: a, b` reply. Without a `Topic:` line
/// the first non-empty line is taken as the topic.
pub fn parse_topic_reply(reply: &str) -> TopicEntry {
    let mut topic = None;
    let mut keywords = Vec::new();
    for line in reply.lines().map(str::trim) {
        let lower = line.to_ascii_lowercase();
        if lower.starts_with("topic:") && topic.is_none() {
            topic = Some(line["topic:".len()..].trim().to_owned());
        } else if lower.starts_with("keywords:") {
            keywords = line["keywords:".len()..]
                .split(',')
                .map(|k| k.trim().to_owned())
                .filter(|k| !k.is_empty())
                .collect();
        }
    }
    let topic = topic
        .filter(|t| !t.is_empty())
        .or_else(|| {
            reply
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .map(str::to_owned)
        })
        .unwrap_or_else(|| EMPTY_TURN_TOPIC.to_owned());
    TopicEntry { topic, keywords }
}

/// Recurrent topic extraction: the prompt for turn `t` carries turn `t`'s text
/// and the topic produced for turn `t - 1`. Degenerate (empty) turns get
/// `"(empty)"` without a model call.
pub fn extract_topic_trace(
    session: &Session,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<TopicTrace, SegmentError> {
    if session.is_empty() {
        return Err(SegmentError::TooShort(0));
    }
    let mut trace = TopicTrace::default();
    for turn in &session.turns {
        if turn.is_degenerate() {
            trace.entries.push(TopicEntry {
                topic: EMPTY_TURN_TOPIC.to_owned(),
                keywords: Vec::new(),
            });
            continue;
        }
        let previous = trace.entries.last().map_or("", |e| e.topic.as_str());
        let shown_previous = if previous.is_empty() { "(none)" } else { previous };
        let rendered = turn.render();
        let req = prompts.topic.render(
            keys::topic(previous, &turn.text),
            &[("previous_topic", shown_previous), ("turn", &rendered)],
        );
        match provider.chat(&req) {
            Ok(reply) => trace.entries.push(parse_topic_reply(&reply)),
            Err(source) => {
                return Err(SegmentError::TopicExtraction {
                    turn: turn.turn_index,
                    completed: trace.len(),
                    partial: Box::new(trace),
                    source,
                })
            }
        }
    }
    Ok(trace)
}

/// Pearson correlation across dimensions and the Gaussian MI derived from it.
///
/// Either variance below [`MIN_VARIANCE`] yields `(0, 0)`; `1 - ρ²` is clamped
/// to at least `1e-12`, capping MI at [`mi_cap`].
pub fn pearson_mi(x: &[f64], y: &[f64]) -> Result<(f64, f64), SegmentError> {
    if x.len() != y.len() {
        return Err(SegmentError::DimMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(SegmentError::TooFewDims(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(SegmentError::NonFinite);
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut cov, mut var_x, mut var_y) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    cov /= n;
    var_x /= n;
    var_y /= n;
    if var_x < MIN_VARIANCE || var_y < MIN_VARIANCE {
        return Ok((0.0, 0.0));
    }
    let rho = (cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0);
    let residual = (1.0 - rho * rho).max(RHO_SQ_MARGIN);
    Ok((rho, -0.5 * residual.ln()))
}

/// `rho[t-1]`, `mi[t-1]` describe the adjacency `(t, t+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSeries {
    pub rho: Vec<f64>,
    pub mi: Vec<f64>,
}

impl MiSeries {
    pub fn len(&self) -> usize {
        self.mi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mi.is_empty()
    }
}

pub fn mi_series(vectors: &[EmbeddingVector]) -> Result<MiSeries, SegmentError> {
    if vectors.len() < 2 {
        return Err(SegmentError::TooShort(vectors.len()));
    }
    let pairs: Vec<(f64, f64)> = vectors
        .windows(2)
        .map(|w| pearson_mi(w[0].values(), w[1].values()))
        .collect::<Result<_, _>>()?;
    let (rho, mi) = pairs.into_iter().unzip();
    Ok(MiSeries { rho, mi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBoundarySet {
    pub positions: Vec<usize>,
    pub quantile_threshold: f64,
}

/// 1-based rank of the nearest-rank `q`-quantile among `n` values:
/// `ceil(q * n)`, at least 1. A 1e-9 slack absorbs binary rounding of `q * n`
/// (0.35 * 20 must give rank 7, not 8).
pub fn nearest_rank(q: f64, n: usize) -> usize {
    ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Nearest-rank quantile of `values`.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64, SegmentError> {
    if values.is_empty() {
        return Err(SegmentError::TooShort(1));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(SegmentError::InvalidConfig(format!("quantile {q} outside (0, 1]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SegmentError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Positions whose MI is at or below `threshold` (ties included).
pub fn positions_at_or_below(mi: &[f64], threshold: f64) -> Vec<usize> {
    mi.iter()
        .enumerate()
        .filter(|(_, &v)| v <= threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

/// `C = { t | I_t <= Quantile_q(I) }` with a nearest-rank quantile. Never
/// empty for a non-empty series.
pub fn candidate_boundaries(mi: &[f64], q: f64) -> Result<CandidateBoundarySet, SegmentError> {
    let threshold = quantile_threshold(mi, q)?;
    Ok(CandidateBoundarySet {
        positions: positions_at_or_below(mi, threshold),
        quantile_threshold: threshold,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: intent-aware refinement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentJudgment {
    pub label: String,
    pub polarity: Polarity,
    pub confidence: f64,
}

impl IntentJudgment {
    pub fn new(label: &str, polarity: Polarity, confidence: f64) -> Self {
        Self {
            label: label.to_owned(),
            polarity,
            confidence,
        }
    }

    /// Boundary probability of this single judgment.
    pub fn boundary_prob(&self) -> f64 {
        match self.polarity {
            Polarity::Shift => self.confidence,
            Polarity::Cont => 1.0 - self.confidence,
        }
    }
}

/// Turn ranges `(L_t, R_t)` around position `t`, clipped to `[1, T]`.
pub fn context_windows(
    total_turns: usize,
    t: usize,
    window: usize,
) -> (RangeInclusive<usize>, RangeInclusive<usize>) {
    let left = (t + 1).saturating_sub(window).max(1)..=t;
    let right = t + 1..=(t + window).min(total_turns);
    (left, right)
}

/// Parses `LABEL conf; LABEL conf` (semicolons or newlines between items,
/// optional list markers, `:` or `,` after the label).
pub fn parse_judgments(reply: &str, labels: &LabelSet) -> Result<Vec<IntentJudgment>, String> {
    let mut out = Vec::new();
    for item in reply.split([';', '\n']) {
        let item = item
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
            .trim();
        if item.is_empty() {
            continue;
        }
        let mut parts = item
            .split(|c: char| c.is_whitespace() || c == ':' || c == ',' || c == '=')
            .filter(|p| !p.is_empty());
        let (label, conf) = match (parts.next(), parts.next_back()) {
            (Some(l), Some(c)) => (l, c),
            _ => return Err(format!("cannot parse `{item}` as `LABEL confidence`")),
        };
        let polarity = labels
            .polarity(label)
            .ok_or_else(|| format!("unknown intent label `{label}`"))?;
        let confidence: f64 = conf
            .trim_end_matches([')', '.'])
            .parse()
            .map_err(|_| format!("bad confidence `{conf}` for `{label}`"))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} for `{label}` outside [0, 1]"));
        }
        out.push(IntentJudgment {
            label: label.to_ascii_uppercase(),
            polarity,
            confidence,
        });
    }
    if out.is_empty() {
        return Err("no `LABEL confidence` pairs found".into());
    }
    Ok(out)
}

fn render_turns(session: &Session, range: RangeInclusive<usize>) -> String {
    session.turns[range.start() - 1..*range.end()]
        .iter()
        .map(|t| t.render())
        .collect::<Vec<_>>()
        .join("\n")
}

/// One chat call for the transition at `t`; an unparseable reply is
/// re-prompted once with a correction note before giving up.
pub fn judge_intent(
    session: &Session,
    t: usize,
    window: usize,
    labels: &LabelSet,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<Vec<IntentJudgment>, SegmentError> {
    let total = session.len();
    if t == 0 || t >= total {
        return Err(SegmentError::Judgment {
            position: t,
            message: format!("position outside [1, {}]", total.saturating_sub(1)),
        });
    }
    let (left, right) = context_windows(total, t, window);
    let left_text = render_turns(session, left);
    let right_text = render_turns(session, right);
    let descriptions = labels.describe();
    let req = prompts.intent.render(
        keys::intent(&session.session_id, t),
        &[
            ("label_descriptions", &descriptions),
            ("left_context", &left_text),
            ("right_context", &right_text),
        ],
    );
    let ask = |req| {
        provider.chat(req).map_err(|e| SegmentError::Judgment {
            position: t,
            message: e.to_string(),
        })
    };
    let first = ask(&req)?;
    match parse_judgments(&first, labels) {
        Ok(j) => Ok(j),
        Err(reason) => {
            log::debug!("position {t}: reprompting after unparseable reply ({reason})");
            let mut retry = req.clone();
            retry.user_prompt.push_str(&format!(
                "\n\nYour previous answer could not be used ({reason}). Reply with exactly two items \
                 of the form LABEL confidence separated by `;`, using only these labels: {}.",
                labels.names().collect::<Vec<_>>().join(", ")
            ));
            let second = ask(&retry)?;
            parse_judgments(&second, labels).map_err(|message| SegmentError::Judgment {
                position: t,
                message,
            })
        }
    }
}

/// `p_eb = ½(p(y_high) + p(y_low))` over the highest- and lowest-confidence
/// judgments. Ties pick the earliest maximum and the latest minimum, so two
/// equal-confidence judgments still average both. Empty input gives 0.
pub fn boundary_probability(judgments: &[IntentJudgment]) -> f64 {
    let Some(first) = judgments.first() else {
        return 0.0;
    };
    let mut high = first;
    let mut low = first;
    for j in &judgments[1..] {
        if j.confidence > high.confidence {
            high = j;
        }
        if j.confidence <= low.confidence {
            low = j;
        }
    }
    0.5 * (high.boundary_prob() + low.boundary_prob())
}

/// Stage-2 verdict for one candidate; `p_eb` is `None` when judgment failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateVerdict {
    pub position: usize,
    pub p_eb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub boundaries: Vec<usize>,
    pub verdicts: Vec<CandidateVerdict>,
}

/// Keeps the positions whose verdict clears `tau_c`.
pub fn threshold_verdicts(verdicts: &[CandidateVerdict], tau_c: f64) -> Vec<usize> {
    verdicts
        .iter()
        .filter(|v| v.p_eb.is_some_and(|p| p >= tau_c))
        .map(|v| v.position)
        .collect()
}

/// Judges all candidates (concurrently under `parallel`) and keeps those with
/// `p_eb >= tau_c`. Failed judgments are dropped; only total failure errors.
pub fn refine_boundaries(
    candidates: &CandidateBoundarySet,
    session: &Session,
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<Refinement, SegmentError> {
    let verdicts: Vec<CandidateVerdict> = par::map(&candidates.positions, |&t| {
        match judge_intent(session, t, cfg.context_window, &cfg.labels, provider, prompts) {
            Ok(j) => CandidateVerdict {
                position: t,
                p_eb: Some(boundary_probability(&j)),
                error: None,
            },
            Err(e) => {
                log::warn!("{}: dropping candidate {t}: {e}", session.session_id);
                CandidateVerdict {
                    position: t,
                    p_eb: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    if !verdicts.is_empty() && verdicts.iter().all(|v| v.p_eb.is_none()) {
        return Err(SegmentError::AllJudgmentsFailed(verdicts.len()));
    }
    Ok(Refinement {
        boundaries: threshold_verdicts(&verdicts, cfg.tau_c),
        verdicts,
    })
}

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

/// Per-session debug dump written by `--emit-trace`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationTrace {
    pub session_id: String,
    pub topics: Vec<String>,
    pub rho: Vec<f64>,
    pub mi: Vec<f64>,
    pub threshold: Option<f64>,
    pub candidates: Vec<usize>,
    pub p_eb: Vec<CandidateVerdict>,
    pub boundaries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutcome {
    pub events: Vec<Event>,
    pub trace: TopicTrace,
    pub diagnostics: SegmentationTrace,
}

/// Stage-1 products of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceScan {
    pub trace: TopicTrace,
    /// `None` for single-turn sessions.
    pub series: Option<MiSeries>,
}

pub fn scan_coherence(
    session: &Session,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<CoherenceScan, SegmentError> {
    let trace = extract_topic_trace(session, provider, prompts)?;
    if session.len() < 2 {
        return Ok(CoherenceScan {
            trace,
            series: None,
        });
    }
    let vectors = provider
        .embed(&trace.topics())
        .map_err(|source| SegmentError::Provider {
            stage: "topic embedding",
            source,
        })?;
    let series = mi_series(&vectors)?;
    Ok(CoherenceScan {
        trace,
        series: Some(series),
    })
}

/// Runs stage 2 on a scanned session. `threshold` overrides the per-session
/// quantile (used for conversation-wide thresholds).
pub fn finish_segmentation(
    session: &Session,
    scan: CoherenceScan,
    threshold: Option<f64>,
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<SegmentationOutcome, SegmentError> {
    let CoherenceScan { trace, series } = scan;
    let mut diagnostics = SegmentationTrace {
        session_id: session.session_id.clone(),
        topics: trace.topics(),
        rho: Vec::new(),
        mi: Vec::new(),
        threshold: None,
        candidates: Vec::new(),
        p_eb: Vec::new(),
        boundaries: Vec::new(),
    };
    let Some(series) = series else {
        let events = split_at_boundaries(session, &[])?;
        return Ok(SegmentationOutcome {
            events,
            trace,
            diagnostics,
        });
    };
    let candidates = match threshold {
        Some(th) => CandidateBoundarySet {
            positions: positions_at_or_below(&series.mi, th),
            quantile_threshold: th,
        },
        None => candidate_boundaries(&series.mi, cfg.quantile)?,
    };
    let refinement = refine_boundaries(&candidates, session, cfg, provider, prompts)?;
    let events = split_at_boundaries(session, &refinement.boundaries)?;
    diagnostics.rho = series.rho;
    diagnostics.mi = series.mi;
    diagnostics.threshold = Some(candidates.quantile_threshold);
    diagnostics.candidates = candidates.positions;
    diagnostics.p_eb = refinement.verdicts;
    diagnostics.boundaries = refinement.boundaries;
    Ok(SegmentationOutcome {
        events,
        trace,
        diagnostics,
    })
}

/// Full two-stage segmentation of one session.
pub fn segment_session_with(
    session: &Session,
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<SegmentationOutcome, SegmentError> {
    cfg.validate()?;
    session.validate()?;
    let scan = scan_coherence(session, provider, prompts)?;
    finish_segmentation(session, scan, None, cfg, provider, prompts)
}

/// [`segment_session_with`] using the built-in prompt templates.
pub fn segment_session(
    session: &Session,
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
) -> Result<SegmentationOutcome, SegmentError> {
    segment_session_with(session, cfg, provider, &PromptSet::default())
}

/// Segments every session of one conversation, honoring `concat_sessions`
/// and `quantile_scope`. Returns the (possibly merged) sessions alongside
/// their outcomes, in chronological order.
pub fn segment_conversation(
    conversation_id: &str,
    sessions: &[Session],
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Result<Vec<(Session, SegmentationOutcome)>, SegmentError> {
    cfg.validate()?;
    let sessions: Vec<Session> = if cfg.concat_sessions && sessions.len() > 1 {
        vec![Session::concat(conversation_id, sessions)]
    } else {
        sessions.to_vec()
    };
    for s in &sessions {
        s.validate()?;
    }
    let scans = par::map(&sessions, |s| scan_coherence(s, provider, prompts))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let global = match cfg.quantile_scope {
        QuantileScope::Session => None,
        QuantileScope::Conversation => {
            let pooled: Vec<f64> = scans
                .iter()
                .filter_map(|s| s.series.as_ref())
                .flat_map(|s| s.mi.iter().copied())
                .collect();
            if pooled.is_empty() {
                None
            } else {
                Some(quantile_threshold(&pooled, cfg.quantile)?)
            }
        }
    };
    let jobs: Vec<(Session, CoherenceScan)> = sessions.into_iter().zip(scans).collect();
    par::map(&jobs, |(session, scan)| {
        finish_segmentation(session, scan.clone(), global, cfg, provider, prompts)
            .map(|o| (session.clone(), o))
    })
    .into_iter()
    .collect()
}
