//! Segmentation and QA metrics, plus batch evaluation drivers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dialogue::{events_to_hypothesis, SegHypothesis, SegReference, Session};
use crate::memory::MemoryRepository;
use crate::par;
use crate::prompts::{keys, PromptSet};
use crate::providers::{Provider, ProviderError};
use crate::retrieval::{compose_answer, retrieve, RetrievalParams};
use crate::segmentation::{segment_session_with, SegmentationConfig};

/// Top-K values swept by `sweep-k`.
pub const SWEEP_K_VALUES: [usize; 5] = [1, 5, 10, 15, 20];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference has {reference} turns but hypothesis has {hypothesis}")]
    LengthMismatch { reference: usize, hypothesis: usize },
    #[error("need at least 2 turns, got {0}")]
    TooShort(usize),
    #[error("metric input {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("window size must be >= 1")]
    ZeroWindow,
}

fn check_pair(reference: &SegReference, hypothesis: &SegHypothesis) -> Result<usize, MetricError> {
    if reference.total_turns != hypothesis.total_turns {
        return Err(MetricError::LengthMismatch {
            reference: reference.total_turns,
            hypothesis: hypothesis.total_turns,
        });
    }
    if reference.total_turns < 2 {
        return Err(MetricError::TooShort(reference.total_turns));
    }
    Ok(reference.total_turns)
}

/// `round(T / (2 · reference segments))`, at least 1.
pub fn default_window(reference: &SegReference) -> usize {
    let t = reference.total_turns as f64;
    ((t / (2.0 * reference.segment_count() as f64)).round() as usize).max(1)
}

/// `prefix[p]` = number of boundaries at positions `<= p`.
fn boundary_prefix(set: &SegReference) -> Vec<usize> {
    let mut prefix = vec![0; set.total_turns + 1];
    for &p in &set.positions {
        if p <= set.total_turns {
            prefix[p] += 1;
        }
    }
    for p in 1..prefix.len() {
        prefix[p] += prefix[p - 1];
    }
    prefix
}

/// Per-window boundary counts `(reference, hypothesis)` for window size `k`.
/// Window `i` spans turns `i+1 .. i+k+1` (1-based) and counts boundaries in
/// `[i+1, i+k]`.
fn window_counts(
    reference: &SegReference,
    hypothesis: &SegHypothesis,
    k: Option<usize>,
) -> Result<Vec<(usize, usize)>, MetricError> {
    let total = check_pair(reference, hypothesis)?;
    let k = match k {
        Some(0) => return Err(MetricError::ZeroWindow),
        Some(k) => k,
        None => default_window(reference),
    }
    .min(total - 1);
    let rp = boundary_prefix(reference);
    let hp = boundary_prefix(hypothesis);
    Ok((0..total - k)
        .map(|i| (rp[i + k] - rp[i], hp[i + k] - hp[i]))
        .collect())
}

/// Beeferman's Pk: fraction of windows whose endpoints are judged
/// same-segment by one segmentation and different-segment by the other.
pub fn pk(reference: &SegReference, hypothesis: &SegHypothesis, k: Option<usize>) -> Result<f64, MetricError> {
    let counts = window_counts(reference, hypothesis, k)?;
    let errors = counts.iter().filter(|(r, h)| (*r == 0) != (*h == 0)).count();
    Ok(errors as f64 / counts.len() as f64)
}

/// Pevzner–Hearst WindowDiff: fraction of windows whose boundary counts differ.
pub fn window_diff(
    reference: &SegReference,
    hypothesis: &SegHypothesis,
    k: Option<usize>,
) -> Result<f64, MetricError> {
    let counts = window_counts(reference, hypothesis, k)?;
    let errors = counts.iter().filter(|(r, h)| r != h).count();
    Ok(errors as f64 / counts.len() as f64)
}

/// Exact-position boundary F1. Both empty gives 1, exactly one empty gives 0.
pub fn boundary_f1(reference: &SegReference, hypothesis: &SegHypothesis) -> Result<f64, MetricError> {
    if reference.total_turns != hypothesis.total_turns {
        return Err(MetricError::LengthMismatch {
            reference: reference.total_turns,
            hypothesis: hypothesis.total_turns,
        });
    }
    let (r, h) = (&reference.positions, &hypothesis.positions);
    match (r.is_empty(), h.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let hits = h.iter().filter(|p| r.binary_search(p).is_ok()).count() as f64;
    if hits == 0.0 {
        return Ok(0.0);
    }
    let precision = hits / h.len() as f64;
    let recall = hits / r.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// `(2·F1 + (1 - Pk) + (1 - WD)) / 4`.
pub fn composite_score(f1: f64, pk: f64, wd: f64) -> Result<f64, MetricError> {
    for (name, value) in [("f1", f1), ("pk", pk), ("wd", wd)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange { name, value });
        }
    }
    Ok((2.0 * f1 + (1.0 - pk) + (1.0 - wd)) / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub pk: f64,
    pub wd: f64,
    pub f1: f64,
    pub score: f64,
}

impl SegmentationMetrics {
    pub fn compute(reference: &SegReference, hypothesis: &SegHypothesis) -> Result<Self, MetricError> {
        let pk = pk(reference, hypothesis, None)?;
        let wd = window_diff(reference, hypothesis, None)?;
        let f1 = boundary_f1(reference, hypothesis)?;
        Ok(Self {
            pk,
            wd,
            f1,
            score: composite_score(f1, pk, wd)?,
        })
    }

    /// Arithmetic mean of each field; the score is recomputed from the means,
    /// which equals the mean of scores because the score is linear.
    pub fn macro_average(items: &[Self]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mean = |f: fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        let (pk, wd, f1) = (mean(|m| m.pk), mean(|m| m.wd), mean(|m| m.f1));
        Some(Self {
            pk,
            wd,
            f1,
            score: (2.0 * f1 + (1.0 - pk) + (1.0 - wd)) / 4.0,
        })
    }
}

// ---------------------------------------------------------------------------
// QA metrics
// ---------------------------------------------------------------------------

/// Lower-cases, removes punctuation and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap(pred: &[String], gold: &[String]) -> usize {
    let gold = bag(gold);
    bag(pred)
        .into_iter()
        .map(|(tok, n)| n.min(gold.get(tok).copied().unwrap_or(0)))
        .sum()
}

/// Bag-of-tokens F1 after normalization.
pub fn qa_token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let g = normalize_tokens(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = clipped_overlap(&p, &g) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Clipped unigram precision times `min(1, exp(1 - |gold| / |pred|))`.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let g = normalize_tokens(gold);
    if p.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(&p, &g) as f64 / p.len() as f64;
    let bp = (1.0 - g.len() as f64 / p.len() as f64).exp().min(1.0);
    precision * bp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    pub token_f1: f64,
    pub bleu1: f64,
}

impl QaMetrics {
    pub fn compute(prediction: &str, gold: &str) -> Self {
        Self {
            token_f1: qa_token_f1(prediction, gold),
            bleu1: bleu1(prediction, gold),
        }
    }
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationItem {
    pub id: String,
    pub total_turns: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    #[serde(flatten)]
    pub metrics: SegmentationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationAggregates {
    pub evaluated: usize,
    pub failed: usize,
    #[serde(rename = "macro")]
    pub macro_avg: Option<SegmentationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub config: Value,
    pub per_item: Vec<SegmentationItem>,
    pub aggregates: SegmentationAggregates,
    pub errors: Vec<ItemError>,
}

impl SegmentationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,total_turns,pk,wd,f1,score\n");
        for it in &self.per_item {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                csv_field(&it.id),
                it.total_turns,
                it.metrics.pk,
                it.metrics.wd,
                it.metrics.f1,
                it.metrics.score
            ));
        }
        if let Some(m) = &self.aggregates.macro_avg {
            out.push_str(&format!(
                "MACRO,,{:.6},{:.6},{:.6},{:.6}\n",
                m.pk, m.wd, m.f1, m.score
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Segments every dialogue and scores it against its reference. Failing
/// dialogues are recorded in `errors` and excluded from the averages.
pub fn evaluate_segmentation(
    corpus: &[(Session, SegReference)],
    cfg: &SegmentationConfig,
    provider: &dyn Provider,
    prompts: &PromptSet,
    config_snapshot: Value,
) -> SegmentationReport {
    let results = par::map(corpus, |(session, reference)| {
        let id = session.session_id.clone();
        let outcome = segment_session_with(session, cfg, provider, prompts).map_err(|e| ItemError {
            id: id.clone(),
            stage: "segmentation".into(),
            message: e.to_string(),
        })?;
        let hypothesis = events_to_hypothesis(&outcome.events).map_err(|e| ItemError {
            id: id.clone(),
            stage: "segmentation".into(),
            message: e.to_string(),
        })?;
        let metrics = SegmentationMetrics::compute(reference, &hypothesis).map_err(|e| ItemError {
            id: id.clone(),
            stage: "metrics".into(),
            message: e.to_string(),
        })?;
        Ok(SegmentationItem {
            id,
            total_turns: reference.total_turns,
            reference: reference.positions.clone(),
            hypothesis: hypothesis.positions,
            metrics,
        })
    });
    let mut per_item = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(item) => per_item.push(item),
            Err(e) => errors.push(e),
        }
    }
    let metrics: Vec<SegmentationMetrics> = per_item.iter().map(|i| i.metrics).collect();
    SegmentationReport {
        config: config_snapshot,
        aggregates: SegmentationAggregates {
            evaluated: per_item.len(),
            failed: errors.len(),
            macro_avg: SegmentationMetrics::macro_average(&metrics),
        },
        per_item,
        errors,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    #[serde(default)]
    pub id: String,
    pub question: String,
    #[serde(alias = "gold")]
    pub answer: String,
    #[serde(default = "default_category", deserialize_with = "category_string")]
    pub category: String,
}

fn default_category() -> String {
    "uncategorized".into()
}

fn category_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(match Value::deserialize(d)? {
        Value::String(s) => s,
        Value::Null => default_category(),
        other => other.to_string(),
    })
}

/// Reads QA items from JSONL (`question`, `answer`, optional `category`,
/// optional `id`; missing ids become `q<line>`).
pub fn load_qa_items(path: &Path) -> Result<Vec<QaItem>, crate::dialogue::DialogueError> {
    use crate::dialogue::DialogueError;
    let raw = fs::read_to_string(path).map_err(|source| DialogueError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut items = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut item: QaItem = serde_json::from_str(line).map_err(|e| DialogueError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if item.id.is_empty() {
            item.id = format!("q{}", i + 1);
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaResultItem {
    pub id: String,
    pub category: String,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub selected: Vec<usize>,
    #[serde(flatten)]
    pub metrics: QaMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaAggregate {
    pub count: usize,
    pub token_f1: f64,
    pub bleu1: f64,
}

impl QaAggregate {
    fn of<'a>(items: impl Iterator<Item = &'a QaMetrics>) -> Self {
        let (mut count, mut f1, mut b1) = (0usize, 0.0, 0.0);
        for m in items {
            count += 1;
            f1 += m.token_f1;
            b1 += m.bleu1;
        }
        if count == 0 {
            return Self {
                count,
                token_f1: 0.0,
                bleu1: 0.0,
            };
        }
        Self {
            count,
            token_f1: f1 / count as f64,
            bleu1: b1 / count as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAggregates {
    pub overall: QaAggregate,
    pub by_category: BTreeMap<String, QaAggregate>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub config: Value,
    pub per_item: Vec<QaResultItem>,
    pub aggregates: QaAggregates,
    pub errors: Vec<ItemError>,
}

impl QaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,token_f1,bleu1\n");
        for (cat, a) in &self.aggregates.by_category {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                csv_field(cat),
                a.count,
                a.token_f1,
                a.bleu1
            ));
        }
        let o = &self.aggregates.overall;
        out.push_str(&format!("OVERALL,{},{:.6},{:.6}\n", o.count, o.token_f1, o.bleu1));
        out
    }
}

/// Retrieves and answers every question, scoring answers against gold.
pub fn evaluate_qa(
    items: &[QaItem],
    repo: &MemoryRepository,
    params: &RetrievalParams,
    provider: &dyn Provider,
    prompts: &PromptSet,
    config_snapshot: Value,
) -> QaReport {
    let results = par::map(items, |item| {
        let err = |stage: &str, message: String| ItemError {
            id: item.id.clone(),
            stage: stage.into(),
            message,
        };
        let result = retrieve(&item.question, repo, params, provider)
            .map_err(|e| err("retrieval", e.to_string()))?;
        let prediction = compose_answer(&item.question, &result, provider, prompts)
            .map_err(|e| err("answer", e.to_string()))?;
        Ok(QaResultItem {
            id: item.id.clone(),
            category: item.category.clone(),
            question: item.question.clone(),
            gold: item.answer.clone(),
            metrics: QaMetrics::compute(&prediction, &item.answer),
            prediction,
            selected: result.selected,
        })
    });
    let mut per_item = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(item) => per_item.push(item),
            Err(e) => errors.push(e),
        }
    }
    let mut by_category: BTreeMap<String, Vec<QaMetrics>> = BTreeMap::new();
    for it in &per_item {
        by_category.entry(it.category.clone()).or_default().push(it.metrics);
    }
    QaReport {
        config: config_snapshot,
        aggregates: QaAggregates {
            overall: QaAggregate::of(per_item.iter().map(|i| &i.metrics)),
            by_category: by_category
                .into_iter()
                .map(|(k, v)| (k, QaAggregate::of(v.iter())))
                .collect(),
            failed: errors.len(),
        },
        per_item,
        errors,
    }
}

/// LLM-judge verdict for one answer: one chat call, reply `CORRECT` or `WRONG`.
pub fn judge_answer(
    question: &str,
    gold: &str,
    prediction: &str,
    judge: &dyn Provider,
    prompts: &PromptSet,
) -> Result<bool, ProviderError> {
    let req = prompts.judge.render(
        keys::judge(question),
        &[("question", question), ("gold", gold), ("prediction", prediction)],
    );
    let reply = judge.chat(&req.with_max_tokens(8))?;
    let word = reply.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_uppercase();
    if word.starts_with("CORRECT") {
        Ok(true)
    } else if word.starts_with("WRONG") || word.starts_with("INCORRECT") {
        Ok(false)
    } else {
        Err(ProviderError::InvalidResponse(format!("judge reply `{}` is neither CORRECT nor WRONG", excerpt(&reply))))
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(60).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub judged: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub errors: Vec<ItemError>,
}

/// Judge accuracy over the answered items of a QA report.
pub fn judge_report(report: &QaReport, judge: &dyn Provider, prompts: &PromptSet) -> JudgeSummary {
    let verdicts = par::map(&report.per_item, |it| {
        judge_answer(&it.question, &it.gold, &it.prediction, judge, prompts).map_err(|e| ItemError {
            id: it.id.clone(),
            stage: "judge".into(),
            message: e.to_string(),
        })
    });
    let mut correct = 0;
    let mut judged = 0;
    let mut errors = Vec::new();
    for v in verdicts {
        match v {
            Ok(ok) => {
                judged += 1;
                correct += usize::from(ok);
            }
            Err(e) => errors.push(e),
        }
    }
    JudgeSummary {
        judged,
        correct,
        accuracy: if judged == 0 { 0.0 } else { correct as f64 / judged as f64 },
        errors,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub count: usize,
    pub failed: usize,
    pub token_f1: f64,
    pub bleu1: f64,
    pub by_category: BTreeMap<String, QaAggregate>,
}

/// Runs [`evaluate_qa`] once per `K` in `ks`, all other parameters fixed.
pub fn sweep_k(
    items: &[QaItem],
    repo: &MemoryRepository,
    params: &RetrievalParams,
    ks: &[usize],
    provider: &dyn Provider,
    prompts: &PromptSet,
) -> Vec<SweepRow> {
    ks.iter()
        .map(|&k| {
            let p = RetrievalParams {
                final_k: k,
                ..params.clone()
            };
            let report = evaluate_qa(items, repo, &p, provider, prompts, Value::Null);
            SweepRow {
                k,
                count: report.aggregates.overall.count,
                failed: report.aggregates.failed,
                token_f1: report.aggregates.overall.token_f1,
                bleu1: report.aggregates.overall.bleu1,
                by_category: report.aggregates.by_category,
            }
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,count,failed,token_f1,bleu1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.k, r.count, r.failed, r.token_f1, r.bleu1
        ));
    }
    out
}
