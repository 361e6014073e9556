use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use esmem_core::evaluation::{
    evaluate_qa, evaluate_segmentation, judge_report, load_qa_items, sweep_k, sweep_to_csv, JudgeSummary, QaReport,
    SegmentationReport, SweepRow, SWEEP_K_VALUES,
};
use esmem_core::prompts::PromptSet;
use esmem_core::retrieval::compose_answer;
use esmem_core::segmentation::{segment_conversation, SegmentationTrace, TopicEntry, TopicTrace};
use esmem_core::{
    load_repository, load_sessions, retrieve, save_repository, split_at_boundaries, HttpProvider, LoadedCorpus,
    MemoryRepository, MockProvider, Provider, ProviderConfig, RepositoryBuilder, Session, SessionFormat,
};
use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, ProviderKind};

/// Metadata key grouping sessions into conversations.
const CONVERSATION_KEY: &str = "conversation_id";
/// Conversation id used for sessions without the metadata key.
const DEFAULT_CONVERSATION: &str = "default";

pub struct Context {
    cfg: AppConfig,
    jobs: Option<usize>,
    json: bool,
    prompts: PromptSet,
    provider: Arc<dyn Provider>,
}

/// Output of `segment`, also accepted by `build --segments`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentFile {
    pub config: serde_json::Value,
    pub sessions: Vec<SegmentedSession>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentedSession {
    pub conversation_id: String,
    pub session_id: String,
    pub total_turns: usize,
    pub boundaries: Vec<usize>,
    pub events: Vec<[usize; 2]>,
    pub topics: Vec<TopicEntry>,
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            fs::write(p, contents).with_context(|| format!("cannot write {}", p.display()))
        }
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn load_corpus(path: &Path, format: SessionFormat) -> Result<LoadedCorpus> {
    if !path.exists() {
        bail!("corpus file not found: {}", path.display());
    }
    load_sessions(path, format).with_context(|| format!("cannot load corpus {}", path.display()))
}

/// Groups sessions by `conversation_id` metadata, keeping first-seen order.
/// Dialseg dialogues are unrelated, so each is its own conversation.
fn conversations(sessions: Vec<Session>, format: SessionFormat) -> Vec<(String, Vec<Session>)> {
    let mut groups: Vec<(String, Vec<Session>)> = Vec::new();
    for s in sessions {
        let key = match (s.metadata.get(CONVERSATION_KEY), format) {
            (Some(id), _) => id.clone(),
            (None, SessionFormat::Dialseg) => s.session_id.clone(),
            (None, SessionFormat::Jsonl) => DEFAULT_CONVERSATION.to_owned(),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    groups
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn capped(mut cfg: ProviderConfig, jobs: Option<usize>, key: &str) -> ProviderConfig {
    if let Some(j) = jobs {
        cfg.concurrency_limit = cfg.concurrency_limit.min(j);
    }
    if cfg.api_key.is_empty() {
        cfg.api_key = key.to_owned();
    }
    cfg
}

impl Context {
    pub fn new(cfg: AppConfig, jobs: Option<usize>, json: bool) -> Result<Self> {
        let prompts = PromptSet::from_ids(&cfg.prompts)?;
        let provider: Arc<dyn Provider> = match cfg.provider.kind {
            ProviderKind::Mock => {
                let m = &cfg.provider.mock;
                let script = match &m.script {
                    Some(path) => {
                        let raw = fs::read_to_string(path)
                            .with_context(|| format!("cannot read mock script {}", path.display()))?;
                        MockProvider::script_from_json(&raw)?
                    }
                    None => {
                        log::warn!("mock provider has no script; every chat call will fail");
                        Default::default()
                    }
                };
                Arc::new(MockProvider::new(script, m.seed, m.dim)?)
            }
            ProviderKind::Http => {
                let (chat, embed) = Self::http_configs(&cfg, jobs);
                Arc::new(HttpProvider::new(chat, embed)?)
            }
        };
        Ok(Self {
            cfg,
            jobs,
            json,
            prompts,
            provider,
        })
    }

    fn api_key(cfg: &AppConfig) -> String {
        std::env::var(&cfg.provider.api_key_env).unwrap_or_default()
    }

    fn http_configs(cfg: &AppConfig, jobs: Option<usize>) -> (ProviderConfig, ProviderConfig) {
        let key = Self::api_key(cfg);
        let chat = capped(cfg.provider.chat.clone(), jobs, &key);
        let embed = capped(
            cfg.provider.embedding.clone().unwrap_or_else(|| cfg.provider.chat.clone()),
            jobs,
            &key,
        );
        (chat, embed)
    }

    fn judge_provider(&self) -> Result<Arc<dyn Provider>> {
        match self.cfg.provider.kind {
            ProviderKind::Mock => Ok(self.provider.clone()),
            ProviderKind::Http => {
                let (chat, embed) = Self::http_configs(&self.cfg, self.jobs);
                let judge = match &self.cfg.provider.judge {
                    Some(j) => capped(j.clone(), self.jobs, &Self::api_key(&self.cfg)),
                    None => chat,
                };
                Ok(Arc::new(HttpProvider::new(judge, embed)?))
            }
        }
    }

    fn format(&self, flag: Option<SessionFormat>) -> SessionFormat {
        flag.unwrap_or(self.cfg.corpus_format)
    }

    fn segment_header(&self) -> serde_json::Value {
        let seg = &self.cfg.segmentation;
        serde_json::json!({
            "quantile": seg.quantile,
            "tau_c": seg.tau_c,
            "context_window": seg.context_window,
            "quantile_scope": seg.quantile_scope,
            "concat_sessions": seg.concat_sessions,
            "labels": seg.labels,
            "prompts": self.cfg.prompts,
            "provider": self.cfg.snapshot()["provider"],
        })
    }

    fn segment_all(
        &self,
        groups: &[(String, Vec<Session>)],
    ) -> Result<Vec<(String, Session, esmem_core::SegmentationOutcome)>> {
        let mut out = Vec::new();
        for (conv, sessions) in groups {
            let results = segment_conversation(conv, sessions, &self.cfg.segmentation, &*self.provider, &self.prompts)
                .with_context(|| format!("segmentation failed for conversation {conv}"))?;
            for (session, outcome) in results {
                log::info!(
                    "{}: {} turns, {} events",
                    session.session_id,
                    session.len(),
                    outcome.events.len()
                );
                out.push((conv.clone(), session, outcome));
            }
        }
        Ok(out)
    }

    pub fn segment(
        &self,
        corpus: &Path,
        format: Option<SessionFormat>,
        out: Option<&Path>,
        emit_trace: Option<&Path>,
    ) -> Result<()> {
        let format = self.format(format);
        let loaded = load_corpus(corpus, format)?;
        let results = self.segment_all(&conversations(loaded.sessions, format))?;
        if let Some(dir) = emit_trace {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            for (_, session, outcome) in &results {
                let path = dir.join(format!("{}.trace.json", sanitize(&session.session_id)));
                let trace: &SegmentationTrace = &outcome.diagnostics;
                write_output(Some(&path), &pretty(trace))?;
            }
        }
        let file = SegmentFile {
            config: self.segment_header(),
            sessions: results
                .into_iter()
                .map(|(conv, session, outcome)| SegmentedSession {
                    conversation_id: conv,
                    session_id: session.session_id.clone(),
                    total_turns: session.len(),
                    boundaries: outcome.diagnostics.boundaries.clone(),
                    events: outcome.events.iter().map(|e| [e.start, e.end]).collect(),
                    topics: outcome.trace.entries,
                })
                .collect(),
        };
        write_output(out, &pretty(&file))
    }

    pub fn build(
        &self,
        corpus: &Path,
        format: Option<SessionFormat>,
        out: &Path,
        segments: Option<&Path>,
        conversation: Option<&str>,
    ) -> Result<()> {
        let format = self.format(format);
        let mut sessions = load_corpus(corpus, format)?.sessions;
        if let Some(id) = conversation {
            sessions.retain(|s| s.metadata.get(CONVERSATION_KEY).map(String::as_str) == Some(id));
            if sessions.is_empty() {
                bail!("no session in {} has {CONVERSATION_KEY} = {id}", corpus.display());
            }
        }
        if sessions.is_empty() {
            bail!("corpus {} has no sessions", corpus.display());
        }
        let repo_id = conversation
            .map(str::to_owned)
            .or_else(|| sessions[0].metadata.get(CONVERSATION_KEY).cloned())
            .unwrap_or_else(|| DEFAULT_CONVERSATION.to_owned());
        let group = vec![(repo_id.clone(), sessions)];

        let segmented: Vec<(Session, Vec<esmem_core::Event>, TopicTrace)> = match segments {
            None => self
                .segment_all(&group)?
                .into_iter()
                .map(|(_, s, o)| (s, o.events, o.trace))
                .collect(),
            Some(path) => self.reuse_segments(path, &group)?,
        };

        let mut builder = RepositoryBuilder::new(
            repo_id,
            self.cfg.snapshot(),
            self.cfg.memory.clone(),
            &*self.provider,
            &self.prompts,
        );
        for (session, events, trace) in &segmented {
            builder
                .add_session(session, events, trace)
                .with_context(|| format!("memory construction failed for {}", session.session_id))?;
        }
        let repo = builder.finish()?;
        save_repository(&repo, out).with_context(|| format!("cannot save repository to {}", out.display()))?;
        let fallback = repo.units.iter().filter(|u| !u.boundary_generated).count();
        if self.json {
            print!(
                "{}",
                pretty(&serde_json::json!({
                    "repository": out.display().to_string(),
                    "repo_id": repo.repo_id,
                    "n": repo.len(),
                    "fallback_boundaries": fallback,
                }))
            );
        } else {
            println!("built {} events into {}", repo.len(), out.display());
            if fallback > 0 {
                println!("{fallback} boundaries fell back to summaries");
            }
        }
        Ok(())
    }

    /// Rebuilds events and traces from a `segment` output file.
    fn reuse_segments(
        &self,
        path: &Path,
        groups: &[(String, Vec<Session>)],
    ) -> Result<Vec<(Session, Vec<esmem_core::Event>, TopicTrace)>> {
        let raw = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let file: SegmentFile =
            serde_json::from_str(&raw).with_context(|| format!("{} is not a segment output", path.display()))?;
        let by_id: BTreeMap<&str, &SegmentedSession> =
            file.sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
        let mut out = Vec::new();
        for (conv, sessions) in groups {
            let prepared = if self.cfg.segmentation.concat_sessions && sessions.len() > 1 {
                vec![Session::concat(conv.clone(), sessions)]
            } else {
                sessions.clone()
            };
            for session in prepared {
                let seg = by_id
                    .get(session.session_id.as_str())
                    .with_context(|| format!("{} has no entry for session {}", path.display(), session.session_id))?;
                if seg.total_turns != session.len() || seg.topics.len() != session.len() {
                    bail!(
                        "{}: session {} has {} turns but the corpus has {}",
                        path.display(),
                        session.session_id,
                        seg.total_turns,
                        session.len()
                    );
                }
                let events = split_at_boundaries(&session, &seg.boundaries)?;
                let trace = TopicTrace {
                    entries: seg.topics.clone(),
                };
                out.push((session, events, trace));
            }
        }
        Ok(out)
    }

    fn open_repo(&self, dir: &Path) -> Result<MemoryRepository> {
        load_repository(dir).with_context(|| format!("cannot load repository {}", dir.display()))
    }

    pub fn query(&self, repo_dir: &Path, query: &str) -> Result<()> {
        let repo = self.open_repo(repo_dir)?;
        let result = retrieve(query, &repo, &self.cfg.retrieval, &*self.provider)?;
        if self.json {
            print!("{}", pretty(&result));
            return Ok(());
        }
        println!("anchors:");
        for a in &result.anchors {
            println!("  event {:>4}  sim_bnd {:.4}", a.event, a.sim_bnd);
        }
        println!("selected:");
        for e in &result.selected {
            let s = result.candidates.iter().find(|c| c.event == *e).expect("selected is a candidate");
            println!(
                "  event {:>4}  score {:.4}  s_sum {:.4}  s_ctx {:.4}",
                s.event, s.score, s.s_sum, s.s_ctx
            );
        }
        println!();
        println!("{}", result.context_text);
        Ok(())
    }

    pub fn answer(&self, repo_dir: &Path, query: &str) -> Result<()> {
        let repo = self.open_repo(repo_dir)?;
        let result = retrieve(query, &repo, &self.cfg.retrieval, &*self.provider)?;
        let answer = compose_answer(query, &result, &*self.provider, &self.prompts)?;
        if self.json {
            print!(
                "{}",
                pretty(&serde_json::json!({
                    "query": query,
                    "answer": answer,
                    "selected": result.chronological(),
                }))
            );
        } else {
            println!("{answer}");
        }
        Ok(())
    }

    pub fn eval_seg(
        &self,
        corpus: &Path,
        format: Option<SessionFormat>,
        out: Option<&Path>,
        csv: Option<&Path>,
    ) -> Result<()> {
        let format = self.format(format);
        let loaded = load_corpus(corpus, format)?;
        if loaded.references.len() != loaded.sessions.len() {
            bail!(
                "corpus {} carries no reference segmentation (use --format dialseg)",
                corpus.display()
            );
        }
        let items: Vec<_> = loaded.sessions.into_iter().zip(loaded.references).collect();
        let report = evaluate_segmentation(
            &items,
            &self.cfg.segmentation,
            &*self.provider,
            &self.prompts,
            self.cfg.snapshot(),
        );
        self.emit_report(&report, out, csv.map(|p| (p, report.to_csv())), print_seg_summary)
    }

    pub fn eval_qa(
        &self,
        repo_dir: &Path,
        qa: &Path,
        out: Option<&Path>,
        csv: Option<&Path>,
        judge: bool,
    ) -> Result<()> {
        let repo = self.open_repo(repo_dir)?;
        let items = load_qa_items(qa).with_context(|| format!("cannot load QA set {}", qa.display()))?;
        let report = evaluate_qa(
            &items,
            &repo,
            &self.cfg.retrieval,
            &*self.provider,
            &self.prompts,
            self.cfg.snapshot(),
        );
        if judge {
            let summary = judge_report(&report, &*self.judge_provider()?, &self.prompts);
            let combined = JudgedQaReport {
                report: &report,
                judge: &summary,
            };
            return self.emit_report(&combined, out, csv.map(|p| (p, report.to_csv())), |r| {
                print_qa_summary(r.report);
                println!(
                    "judge accuracy {:.4} ({} / {}, {} failed)",
                    r.judge.accuracy,
                    r.judge.correct,
                    r.judge.judged,
                    r.judge.errors.len()
                );
            });
        }
        self.emit_report(&report, out, csv.map(|p| (p, report.to_csv())), print_qa_summary)
    }

    pub fn sweep_k(&self, repo_dir: &Path, qa: &Path, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
        let repo = self.open_repo(repo_dir)?;
        let items = load_qa_items(qa).with_context(|| format!("cannot load QA set {}", qa.display()))?;
        let rows = sweep_k(
            &items,
            &repo,
            &self.cfg.retrieval,
            &SWEEP_K_VALUES,
            &*self.provider,
            &self.prompts,
        );
        let report = SweepReport {
            config: self.cfg.snapshot(),
            rows,
        };
        self.emit_report(&report, out, csv.map(|p| (p, sweep_to_csv(&report.rows))), |r| {
            println!("{:>4} {:>6} {:>6} {:>9} {:>9}", "K", "count", "failed", "token_f1", "bleu1");
            for row in &r.rows {
                println!(
                    "{:>4} {:>6} {:>6} {:>9.4} {:>9.4}",
                    row.k, row.count, row.failed, row.token_f1, row.bleu1
                );
            }
        })
    }

    fn emit_report<T: Serialize>(
        &self,
        report: &T,
        out: Option<&Path>,
        csv: Option<(&Path, String)>,
        summary: impl Fn(&T),
    ) -> Result<()> {
        let json = pretty(report);
        if let Some(path) = out {
            write_output(Some(path), &json)?;
        }
        if let Some((path, text)) = csv {
            write_output(Some(path), &text)?;
        }
        if self.json {
            print!("{json}");
        } else {
            summary(report);
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct JudgedQaReport<'a> {
    #[serde(flatten)]
    report: &'a QaReport,
    judge: &'a JudgeSummary,
}

#[derive(Serialize)]
struct SweepReport {
    config: serde_json::Value,
    rows: Vec<SweepRow>,
}

fn print_seg_summary(r: &SegmentationReport) {
    println!("evaluated {} dialogues, {} failed", r.aggregates.evaluated, r.aggregates.failed);
    if let Some(m) = r.aggregates.macro_avg {
        println!("{:>8} {:>8} {:>8} {:>8}", "Pk", "WD", "F1", "Score");
        println!("{:>8.4} {:>8.4} {:>8.4} {:>8.4}", m.pk, m.wd, m.f1, m.score);
    }
    for e in &r.errors {
        println!("error {} [{}]: {}", e.id, e.stage, e.message);
    }
}

fn print_qa_summary(r: &QaReport) {
    let a = &r.aggregates;
    println!("answered {} questions, {} failed", a.overall.count, a.failed);
    println!("{:<20} {:>6} {:>9} {:>9}", "category", "count", "token_f1", "bleu1");
    for (cat, agg) in &a.by_category {
        println!("{:<20} {:>6} {:>9.4} {:>9.4}", cat, agg.count, agg.token_f1, agg.bleu1);
    }
    println!(
        "{:<20} {:>6} {:>9.4} {:>9.4}",
        "overall", a.overall.count, a.overall.token_f1, a.overall.bleu1
    );
}

