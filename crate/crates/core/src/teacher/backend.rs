use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::extract_tagged;
use super::reflect::{scripted_reflection_reply, ReflectionDigest, REFLECTION_TAG};
use super::scripted::{decide_from_context, DecisionContext};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "TELL_LLM_API_KEY";
pub const DIGEST_TAG: &str = "digest";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("network failure: {0}")]
    Network(String),
    #[error("backend failure: {0}")]
    Other(String),
}

pub trait ChatBackend {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: u32,
    ) -> std::result::Result<String, BackendError>;

    fn name(&self) -> &str;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        (**self).chat(messages, temperature, max_tokens)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Deterministic offline backend. Answers decision prompts by running the
/// rule cascade on the embedded digest and reflection prompts with the
/// canonical constraint.
#[derive(Debug, Default, Clone)]
pub struct ScriptedBackend;

impl ChatBackend for ScriptedBackend {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        _temperature: f64,
        _max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .ok_or_else(|| BackendError::Other("no user message".into()))?;
        if let Some(raw) = extract_tagged(&user.content, REFLECTION_TAG) {
            let digest: ReflectionDigest = serde_json::from_str(raw)
                .map_err(|e| BackendError::Other(format!("bad reflection digest: {e}")))?;
            return Ok(scripted_reflection_reply(&digest));
        }
        let raw = extract_tagged(&user.content, DIGEST_TAG)
            .ok_or_else(|| BackendError::Other("prompt carries no digest".into()))?;
        let dc: DecisionContext = serde_json::from_str(raw)
            .map_err(|e| BackendError::Other(format!("bad digest: {e}")))?;
        let (action, reason) = decide_from_context(&dc);
        let reply = serde_json::json!({ "action": action.token(), "reason": reason });
        Ok(format!(
            "Step 1: check conflicts (tau_min = {}).\nStep 2: weigh speed against the target.\nStep 3: check the lane goal.\n{reply}",
            dc.tau_min.map_or("none".to_string(), |t| format!("{t:.2}"))
        ))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
}

/// Chat-completions client over HTTPS.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            Error::config("teacher.backend", format!("remote backend needs {API_KEY_ENV}"))
        })?;
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: RemoteConfig, api_key: String) -> Result<Self> {
        if !(cfg.timeout_s > 0.0) {
            return Err(Error::config("teacher.timeout_s", "must be > 0"));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .build()
            .into();
        Ok(Self {
            cfg,
            api_key,
            agent,
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        let resp = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout,
                other => BackendError::Network(other.to_string()),
            })?;
        let v: serde_json::Value = resp
            .into_body()
            .read_json()
            .map_err(|e| BackendError::Other(format!("response is not JSON: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Other("missing choices[0].message.content".into()))
    }

    fn name(&self) -> &str {
        "remote"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub request: TranscriptRequest,
    pub response: String,
}

/// Forwards to an inner backend and appends each exchange to a JSONL file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    out: BufWriter<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        temperature: f64,
        max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        let response = self.inner.chat(messages, temperature, max_tokens)?;
        let line = TranscriptLine {
            request: TranscriptRequest {
                messages: messages.to_vec(),
                temperature,
                max_tokens,
            },
            response: response.clone(),
        };
        let text = serde_json::to_string(&line).map_err(|e| BackendError::Other(e.to_string()))?;
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| BackendError::Other(format!("{}: {e}", self.path.display())))?;
        Ok(response)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Serves recorded responses in order.
pub struct ReplayBackend {
    lines: VecDeque<TranscriptLine>,
    strict: bool,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = VecDeque::new();
        for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: TranscriptLine = serde_json::from_str(l)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
            lines.push_back(line);
        }
        Ok(Self {
            lines,
            strict: false,
        })
    }

    pub fn from_lines(lines: Vec<TranscriptLine>) -> Self {
        Self {
            lines: lines.into(),
            strict: false,
        }
    }

    /// Require each request to match the recorded one exactly.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn remaining(&self) -> usize {
        self.lines.len()
    }
}

impl ChatBackend for ReplayBackend {
    fn chat(
        &mut self,
        messages: &[ChatMessage],
        _temperature: f64,
        _max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        let line = self
            .lines
            .pop_front()
            .ok_or_else(|| BackendError::Other("transcript exhausted".into()))?;
        if self.strict && line.request.messages != messages {
            return Err(BackendError::Other("request differs from transcript".into()));
        }
        Ok(line.response)
    }

    fn name(&self) -> &str {
        "replay"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Timeout,
    Network,
    Garbage,
    Empty,
    Reply(String),
}

/// Test backend cycling through a fixed list of behaviours.
#[derive(Debug, Clone)]
pub struct FaultBackend {
    script: Vec<Fault>,
    next: usize,
    pub calls: usize,
}

impl FaultBackend {
    pub fn new(script: Vec<Fault>) -> Self {
        assert!(!script.is_empty(), "fault script must not be empty");
        Self {
            script,
            next: 0,
            calls: 0,
        }
    }
}

impl ChatBackend for FaultBackend {
    fn chat(
        &mut self,
        _messages: &[ChatMessage],
        _temperature: f64,
        _max_tokens: u32,
    ) -> std::result::Result<String, BackendError> {
        let f = self.script[self.next % self.script.len()].clone();
        self.next += 1;
        self.calls += 1;
        match f {
            Fault::Timeout => Err(BackendError::Timeout),
            Fault::Network => Err(BackendError::Network("connection refused".into())),
            Fault::Garbage => Ok("}{ not json at all \u{fffd}".into()),
            Fault::Empty => Ok(String::new()),
            Fault::Reply(s) => Ok(s),
        }
    }

    fn name(&self) -> &str {
        "fault"
    }
}
