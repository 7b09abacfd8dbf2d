//! Rare-to-frequent concept mapping through a chat-completion model.
//!
//! The request is a fixed system/user instruction pair with in-context
//! examples; the reply is scanned for labelled fields and the resulting
//! `BREAK`/`AND` sequence is bound to the input prompt. A fixture backend
//! replays stored replies keyed by `(model, prompt)`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{
    bind_template_or_whole, parse_prompt_sequence, ConceptError, PromptPlan, BREAK_TOKEN,
};
use crate::json::sha256_hex;
use crate::tensor_file::atomic_write;

pub const SYSTEM_PROMPT: &str = include_str!("../resources/system_prompt.txt");
/// User instruction and in-context examples; the input prompt follows.
pub const USER_PROMPT_PREFIX: &str = include_str!("../resources/user_prompt.txt");

pub const LABEL_NUM_RARE: &str = "Num Rare Concepts:";
pub const LABEL_CONTEXT: &str = "Context:";
pub const LABEL_FINAL_SEQUENCE: &str = "Final Prompt Sequence:";

pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_API_KEY_ENV: &str = "ADAPT_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("response is missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} is malformed: {value:?}")]
    MalformedField { field: &'static str, value: String },
    #[error("response declares {declared} rare concepts but the sequence has {parsed}")]
    InconsistentCount { declared: usize, parsed: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend returned status {status}: {body}")]
    BackendStatus { status: u16, body: String },
    #[error("backend reply malformed: {0}")]
    MalformedReply(String),
    #[error("no fixture for prompt {prompt:?} at {path}")]
    FixtureMissing { prompt: String, path: PathBuf },
    #[error("fixture {path} is invalid: {reason}")]
    FixtureInvalid { path: PathBuf, reason: String },
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("{source} (raw response: {raw:?})")]
    Parse {
        #[source]
        source: Box<LlmError>,
        raw: String,
    },
    #[error("{source} (raw response: {raw:?})")]
    Concept {
        #[source]
        source: ConceptError,
        raw: String,
    },
    #[error("cache write failed: {0}")]
    Cache(#[from] std::io::Error),
}

impl LlmError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyPrompt => "EmptyPrompt",
            Self::MissingField(_) => "MissingField",
            Self::MalformedField { .. } => "MalformedField",
            Self::InconsistentCount { .. } => "InconsistentCount",
            Self::BackendUnavailable(_) => "BackendUnavailable",
            Self::BackendStatus { .. } => "BackendStatus",
            Self::MalformedReply(_) => "MalformedReply",
            Self::FixtureMissing { .. } => "FixtureMissing",
            Self::FixtureInvalid { .. } => "FixtureInvalid",
            Self::MissingCredential(_) => "MissingCredential",
            Self::Parse { source, .. } => source.code(),
            Self::Concept { source, .. } => source.code(),
            Self::Cache(_) => "CacheWrite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The system and user messages sent for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub system: String,
    pub user: String,
}

impl Instruction {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage {
                role: "system".into(),
                content: self.system.clone(),
            },
            ChatMessage {
                role: "user".into(),
                content: self.user.clone(),
            },
        ]
    }
}

pub fn build_instruction(prompt: &str) -> Result<Instruction, LlmError> {
    if prompt.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    Ok(Instruction {
        system: SYSTEM_PROMPT.to_string(),
        user: format!("{USER_PROMPT_PREFIX}Input: {prompt}"),
    })
}

/// Labelled fields extracted from a model reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMappingResponse {
    pub raw_text: String,
    pub num_rare_concepts: usize,
    pub final_sequence: String,
    pub context: String,
}

/// Value following `label` on a line, tolerating markdown emphasis and
/// bullet markers around the label.
fn labelled_value<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let stripped = line.trim().trim_start_matches(['*', '#', '-', '>', ' ', '\t']);
    let rest = stripped.strip_prefix(label)?;
    Some(rest.trim_start_matches('*').trim().trim_end_matches('*').trim())
}

fn last_field<'a>(raw: &'a str, label: &str) -> Option<&'a str> {
    raw.lines().rev().find_map(|l| labelled_value(l, label))
}

/// Number of `BREAK` clauses in a prompt sequence.
pub fn count_break_clauses(sequence: &str) -> usize {
    sequence.split_whitespace().filter(|t| *t == BREAK_TOKEN).count()
}

/// Extracts the labelled fields; the last occurrence of each label wins.
pub fn parse_llm_response(raw: &str) -> Result<ConceptMappingResponse, LlmError> {
    let final_sequence = last_field(raw, LABEL_FINAL_SEQUENCE)
        .ok_or(LlmError::MissingField("Final Prompt Sequence"))?
        .to_string();
    let context = last_field(raw, LABEL_CONTEXT).unwrap_or("").to_string();
    let parsed = count_break_clauses(&final_sequence);
    let num_rare_concepts = match last_field(raw, LABEL_NUM_RARE) {
        Some(v) => v.parse::<usize>().map_err(|_| LlmError::MalformedField {
            field: "Num Rare Concepts",
            value: v.to_string(),
        })?,
        None => parsed,
    };
    if num_rare_concepts != parsed {
        return Err(LlmError::InconsistentCount {
            declared: num_rare_concepts,
            parsed,
        });
    }
    Ok(ConceptMappingResponse {
        raw_text: raw.to_string(),
        num_rare_concepts,
        final_sequence,
        context,
    })
}

/// Anything that can answer a chat instruction.
pub trait ChatBackend {
    fn complete(&self, prompt: &str, instruction: &Instruction) -> Result<String, LlmError>;
}

/// Cache/fixture key: SHA-256 of `"{model}\n{prompt}"`, hex encoded.
pub fn fixture_key(prompt: &str, model: &str) -> String {
    sha256_hex(format!("{model}\n{prompt}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub prompt: String,
    pub raw_response: String,
}

fn fixture_path(dir: &Path, prompt: &str, model: &str) -> PathBuf {
    dir.join(format!("{}.json", fixture_key(prompt, model)))
}

/// Writes one fixture atomically.
pub fn write_fixture(dir: &Path, model: &str, fixture: &FixtureFile) -> Result<PathBuf, LlmError> {
    std::fs::create_dir_all(dir)?;
    let path = fixture_path(dir, &fixture.prompt, model);
    let json = crate::json::to_canonical_pretty(fixture)
        .map_err(|e| LlmError::MalformedReply(e.to_string()))?;
    atomic_write(&path, format!("{json}\n").as_bytes())?;
    Ok(path)
}

/// Replays stored replies from a directory.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    pub dir: PathBuf,
    pub model: String,
}

impl FixtureBackend {
    pub fn new(dir: impl Into<PathBuf>, model: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            model: model.into(),
        }
    }
}

impl ChatBackend for FixtureBackend {
    fn complete(&self, prompt: &str, _instruction: &Instruction) -> Result<String, LlmError> {
        let path = fixture_path(&self.dir, prompt, &self.model);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(LlmError::FixtureMissing {
                    prompt: prompt.to_string(),
                    path,
                })
            }
            Err(e) => {
                return Err(LlmError::FixtureInvalid {
                    path,
                    reason: e.to_string(),
                })
            }
        };
        let fixture: FixtureFile =
            serde_json::from_slice(&bytes).map_err(|e| LlmError::FixtureInvalid {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if fixture.prompt != prompt {
            return Err(LlmError::FixtureInvalid {
                path,
                reason: format!("stored prompt {:?} differs", fixture.prompt),
            });
        }
        Ok(fixture.raw_response)
    }
}

/// Chat-completions endpoint (`{model, temperature, messages}` in,
/// `choices[0].message.content` out).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    pub headers: Vec<(String, String)>,
    pub timeout: Duration,
    /// Replies are stored here as fixtures when set.
    pub cache_dir: Option<PathBuf>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key_env: Some(DEFAULT_API_KEY_ENV.into()),
            headers: Vec::new(),
            timeout: Duration::from_secs(60),
            cache_dir: None,
        }
    }

    pub fn request_body(&self, instruction: &Instruction) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": instruction.messages(),
        })
    }
}

fn reply_content(body: &serde_json::Value) -> Option<&str> {
    body.pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/message/content"))
        .or_else(|| body.get("content"))
        .and_then(|v| v.as_str())
}

impl ChatBackend for HttpBackend {
    fn complete(&self, prompt: &str, instruction: &Instruction) -> Result<String, LlmError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(var) = &self.api_key_env {
            match std::env::var(var) {
                Ok(key) if !key.is_empty() => {
                    req = req.set("Authorization", &format!("Bearer {key}"));
                }
                _ => {}
            }
        }
        for (k, v) in &self.headers {
            req = req.set(k, v);
        }
        let resp = match req.send_json(self.request_body(instruction)) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                return Err(LlmError::BackendStatus {
                    status,
                    body: r.into_string().unwrap_or_default(),
                })
            }
            Err(ureq::Error::Transport(t)) => return Err(LlmError::BackendUnavailable(t.to_string())),
        };
        let body: serde_json::Value = resp
            .into_json()
            .map_err(|e| LlmError::MalformedReply(e.to_string()))?;
        let content = reply_content(&body)
            .ok_or_else(|| LlmError::MalformedReply("no message content".into()))?
            .to_string();
        if let Some(dir) = &self.cache_dir {
            write_fixture(
                dir,
                &self.model,
                &FixtureFile {
                    prompt: prompt.to_string(),
                    raw_response: content.clone(),
                },
            )?;
        }
        Ok(content)
    }
}

/// Builds the instruction, queries `backend`, parses the reply and binds
/// the concept pairs to `prompt`.
pub fn map_concepts(prompt: &str, backend: &dyn ChatBackend) -> Result<PromptPlan, LlmError> {
    let instruction = build_instruction(prompt)?;
    let raw = backend.complete(prompt, &instruction)?;
    plan_from_response(prompt, &raw)
}

/// The parsing half of [`map_concepts`].
pub fn plan_from_response(prompt: &str, raw: &str) -> Result<PromptPlan, LlmError> {
    let response = parse_llm_response(raw).map_err(|e| LlmError::Parse {
        source: Box::new(e),
        raw: raw.to_string(),
    })?;
    if response.num_rare_concepts == 0 {
        return Ok(PromptPlan::common(prompt));
    }
    let annotate = |source| LlmError::Concept {
        source,
        raw: raw.to_string(),
    };
    let sequence = parse_prompt_sequence(&response.final_sequence, &response.context).map_err(annotate)?;
    bind_template_or_whole(prompt, sequence.pairs().to_vec()).map_err(annotate)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PEACH_REPLY: &str = "Num Rare Concepts: 1\n\
a. Rare concept: A peach made of glass\n\
b. A peach made of glass does not exist in reality, while the possibility of a pink sphere made of glass existing is much higher. Main noun subject: peach, Context: made of glass, Replaced frequent subject: pink sphere\n\
c. A pink sphere made of glass BREAK A peach made of glass\n\
Context: made of glass\n\
Final Prompt Sequence: A pink sphere made of glass BREAK A peach made of glass\n";

    const TWO_REPLY: &str = "Num Rare Concepts: 2\n\
a. Rare concept: A horned lion\n\
c. A horned animal BREAK A horned lion\n\
AND\n\
a. Rare concept: A hairy frog\n\
c. A hairy animal BREAK A hairy frog\n\
Context: horned AND a hairy\n\
Final Prompt Sequence: A horned animal BREAK A horned lion AND A hairy animal BREAK A hairy frog\n";

    #[test]
    fn instruction_layout() {
        let ins = build_instruction("A hairy frog").unwrap();
        assert!(ins.user.ends_with("Input: A hairy frog"));
        assert!(ins.system.starts_with("You are a helper language model"));
        assert!(ins.user.starts_with("Extract rare concepts from the input text"));
        assert_eq!(ins.messages()[0].role, "system");
        assert!(matches!(build_instruction(""), Err(LlmError::EmptyPrompt)));
        let multi = build_instruction("line one\nline two").unwrap();
        assert!(multi.user.ends_with("Input: line one\nline two"));
    }

    #[test]
    fn parses_peach_reply() {
        let r = parse_llm_response(PEACH_REPLY).unwrap();
        assert_eq!(r.num_rare_concepts, 1);
        assert_eq!(r.final_sequence, "A pink sphere made of glass BREAK A peach made of glass");
        assert_eq!(r.context, "made of glass");
    }

    #[test]
    fn parses_two_concept_reply() {
        let r = parse_llm_response(TWO_REPLY).unwrap();
        assert_eq!(r.num_rare_concepts, 2);
        assert_eq!(r.context, "horned AND a hairy");
        let reparsed = parse_prompt_sequence(&r.final_sequence, &r.context).unwrap();
        assert_eq!(reparsed.m(), r.num_rare_concepts);
    }

    #[test]
    fn missing_and_inconsistent_fields() {
        assert!(matches!(
            parse_llm_response("garbage"),
            Err(LlmError::MissingField("Final Prompt Sequence"))
        ));
        let wrong = "Num Rare Concepts: 2\nFinal Prompt Sequence: a BREAK b\n";
        assert!(matches!(
            parse_llm_response(wrong),
            Err(LlmError::InconsistentCount {
                declared: 2,
                parsed: 1
            })
        ));
        let bad = "Num Rare Concepts: two\nFinal Prompt Sequence: a BREAK b\n";
        assert!(matches!(parse_llm_response(bad), Err(LlmError::MalformedField { .. })));
    }

    #[test]
    fn last_label_wins_and_markdown_tolerated() {
        let raw = "Final Prompt Sequence: x BREAK y\n**Num Rare Concepts:** 1\n**Final Prompt Sequence:** A cat BREAK A tiger\n";
        let r = parse_llm_response(raw).unwrap();
        assert_eq!(r.final_sequence, "A cat BREAK A tiger");
        assert_eq!(r.context, "");
    }

    #[test]
    fn zero_concepts_keep_prompt() {
        let raw = "Num Rare Concepts: 0\nContext:\nFinal Prompt Sequence: A cat on a mat\n";
        let plan = plan_from_response("A cat on a mat", raw).unwrap();
        assert_eq!(plan.m(), 0);
        assert_eq!(plan.target(), "A cat on a mat");
    }

    #[test]
    fn downstream_errors_carry_raw() {
        let raw = "Num Rare Concepts: 1\nFinal Prompt Sequence: X BREAK X\n";
        match plan_from_response("X", raw) {
            Err(LlmError::Concept { source, raw: r }) => {
                assert_eq!(source, ConceptError::DegeneratePair { index: 1 });
                assert_eq!(r, raw);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fixture_key_is_stable() {
        assert_eq!(fixture_key("A hairy frog", "gpt-4o"), fixture_key("A hairy frog", "gpt-4o"));
        assert_ne!(fixture_key("A hairy frog", "gpt-4o"), fixture_key("A hairy frog", "llama3"));
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let backend = FixtureBackend::new(dir.path(), "m");
        assert!(matches!(
            map_concepts("A peach made of glass", &backend),
            Err(LlmError::FixtureMissing { .. })
        ));
        write_fixture(
            dir.path(),
            "m",
            &FixtureFile {
                prompt: "A peach made of glass".into(),
                raw_response: PEACH_REPLY.into(),
            },
        )
        .unwrap();
        let plan = map_concepts("A peach made of glass", &backend).unwrap();
        assert_eq!(plan.template(), "[slot1]");
        assert_eq!(plan.frequent(), "A pink sphere made of glass");
        assert_eq!(plan.pairs()[0].attribute_text(), "made of glass");
    }

    #[test]
    fn request_body_pins_temperature() {
        let b = HttpBackend::new("http://localhost/v1/chat/completions", "gpt-4o");
        let body = b.request_body(&build_instruction("x").unwrap());
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][1]["role"], "user");
    }
}
