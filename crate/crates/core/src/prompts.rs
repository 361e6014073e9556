//! Prompt templates.
//!
//! Templates are plain-text assets compiled into the binary and selected by a
//! pinned id (for example `topic_extraction.v1`) so a config snapshot records
//! exactly which wording produced a repository. The wording is a
//! reconstruction: it keeps the input/output contracts (topic plus keywords per
//! turn, two ranked intent labels with confidences, a structured
//! "Topic A ended. Transitioned to Topic B. Context: ..." boundary) but is not
//! guaranteed to match any published prompt verbatim.
//!
//! Each asset holds a system part and a user part separated by a line reading
//! `=== user ===`. Placeholders are `{name}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::ChatRequest;

const SEPARATOR: &str = "\n=== user ===\n";

const BUILTIN: &[(&str, &str)] = &[
    (
        "topic_extraction.v1",
        include_str!("../assets/prompts/topic_extraction.v1.txt"),
    ),
    (
        "intent_label.v1",
        include_str!("../assets/prompts/intent_label.v1.txt"),
    ),
    (
        "refined_boundary.v1",
        include_str!("../assets/prompts/refined_boundary.v1.txt"),
    ),
    (
        "refined_boundary_opening.v1",
        include_str!("../assets/prompts/refined_boundary_opening.v1.txt"),
    ),
    ("answer.v1", include_str!("../assets/prompts/answer.v1.txt")),
    ("judge.v1", include_str!("../assets/prompts/judge.v1.txt")),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown prompt template id `{0}`")]
    UnknownTemplate(String),
    #[error("template `{0}` has no `=== user ===` separator")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    system: String,
    user: String,
}

impl Template {
    pub fn builtin(id: &str) -> Result<Self, PromptError> {
        let raw = BUILTIN
            .iter()
            .find(|(name, _)| *name == id)
            .map(|(_, body)| *body)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_owned()))?;
        Self::parse(id, raw)
    }

    pub fn parse(id: &str, raw: &str) -> Result<Self, PromptError> {
        let (system, user) = raw
            .split_once(SEPARATOR)
            .ok_or_else(|| PromptError::Malformed(id.to_owned()))?;
        Ok(Self {
            id: id.to_owned(),
            system: system.trim().to_owned(),
            user: user.trim().to_owned(),
        })
    }

    /// Substitutes `{name}` placeholders and wraps the result in a request.
    pub fn render(&self, key: String, vars: &[(&str, &str)]) -> ChatRequest {
        ChatRequest::new(key, fill(&self.system, vars), fill(&self.user, vars))
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    // Single pass so substituted text containing `{...}` is never re-expanded.
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Template ids used by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptIds {
    pub topic: String,
    pub intent: String,
    pub boundary: String,
    pub boundary_opening: String,
    pub answer: String,
    pub judge: String,
}

impl Default for PromptIds {
    fn default() -> Self {
        Self {
            topic: "topic_extraction.v1".into(),
            intent: "intent_label.v1".into(),
            boundary: "refined_boundary.v1".into(),
            boundary_opening: "refined_boundary_opening.v1".into(),
            answer: "answer.v1".into(),
            judge: "judge.v1".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub topic: Template,
    pub intent: Template,
    pub boundary: Template,
    pub boundary_opening: Template,
    pub answer: Template,
    pub judge: Template,
}

impl PromptSet {
    pub fn from_ids(ids: &PromptIds) -> Result<Self, PromptError> {
        Ok(Self {
            topic: Template::builtin(&ids.topic)?,
            intent: Template::builtin(&ids.intent)?,
            boundary: Template::builtin(&ids.boundary)?,
            boundary_opening: Template::builtin(&ids.boundary_opening)?,
            answer: Template::builtin(&ids.answer)?,
            judge: Template::builtin(&ids.judge)?,
        })
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_ids(&PromptIds::default()).expect("builtin templates parse")
    }
}

/// Mock-script keys for each call site.
pub mod keys {
    pub fn topic(previous_topic: &str, turn_text: &str) -> String {
        format!("topic|{previous_topic}|{turn_text}")
    }

    pub fn intent(session_id: &str, position: usize) -> String {
        format!("intent|{session_id}|{position}")
    }

    pub fn boundary(session_id: &str, start: usize, end: usize) -> String {
        format!("boundary|{session_id}|{start}-{end}")
    }

    pub fn answer(query: &str) -> String {
        format!("answer|{query}")
    }

    pub fn judge(question: &str) -> String {
        format!("judge|{question}")
    }
}
