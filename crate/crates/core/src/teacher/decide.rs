use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, ChatBackend};
use super::prompt::Prompt;
use super::scripted::decide_from_context;
use crate::sim::Maneuver;

pub const PARSE_RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Llm,
    Scripted,
    Fallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherDecision {
    pub action: Maneuver,
    pub rationale: String,
    pub source: DecisionSource,
    /// Wall time spent obtaining the decision (s).
    pub latency: f64,
}

/// Equality ignores `latency`, which is wall-clock.
impl PartialEq for TeacherDecision {
    fn eq(&self, other: &Self) -> bool {
        self.action == other.action && self.rationale == other.rationale && self.source == other.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// Last well-formed JSON object in `text` whose "action" names a maneuver.
pub fn parse_decision(text: &str) -> Option<(Maneuver, String)> {
    let starts: Vec<usize> = text.match_indices('{').map(|(i, _)| i).collect();
    for &i in starts.iter().rev() {
        let mut it = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        let Some(Ok(v)) = it.next() else { continue };
        let Some(token) = v.get("action").and_then(|a| a.as_str()) else {
            continue;
        };
        if let Some(m) = Maneuver::parse_token(token) {
            let reason = v
                .get("reason")
                .and_then(|r| r.as_str())
                .unwrap_or_default()
                .to_string();
            return Some((m, reason));
        }
    }
    None
}

/// Queries the backend, retrying unparseable or forbidden replies. Network
/// failures, timeouts and exhausted retries fall back to the rule cascade.
pub fn decide(prompt: &Prompt, backend: &mut dyn ChatBackend, opts: &DecodeOptions) -> TeacherDecision {
    let start = Instant::now();
    let messages = prompt.messages();
    let banned = prompt.digest.forbidden();
    let source = if backend.name() == "scripted" {
        DecisionSource::Scripted
    } else {
        DecisionSource::Llm
    };
    let mut last_problem = String::new();
    for _ in 0..=PARSE_RETRIES {
        match backend.chat(&messages, opts.temperature, opts.max_tokens) {
            Ok(text) => match parse_decision(&text) {
                Some((action, _)) if banned.contains(&action) => {
                    last_problem = format!("reply chose forbidden action {action}");
                }
                Some((action, rationale)) => {
                    return TeacherDecision {
                        action,
                        rationale,
                        source,
                        latency: start.elapsed().as_secs_f64(),
                    }
                }
                None => last_problem = "reply carried no decision object".into(),
            },
            Err(e @ (BackendError::Timeout | BackendError::Network(_))) => {
                last_problem = e.to_string();
                break;
            }
            Err(e) => last_problem = e.to_string(),
        }
        log::debug!("teacher retry: {last_problem}");
    }
    let (action, reason) = decide_from_context(&prompt.digest);
    TeacherDecision {
        action,
        rationale: format!("fallback after {last_problem}: {reason}"),
        source: DecisionSource::Fallback,
        latency: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_last_object() {
        let t = r#"thinking {"note": 1} ... {"action":"cruise","reason":"a"} then {"action": "slow_down", "reason": "b"}"#;
        assert_eq!(parse_decision(t), Some((Maneuver::SlowDown, "b".into())));
        assert_eq!(parse_decision("no json"), None);
        assert_eq!(parse_decision(r#"{"action": "fly"}"#), None);
        let nested = r#"{"action": "speed_up", "meta": {"k": 2}}"#;
        assert_eq!(parse_decision(nested).unwrap().0, Maneuver::SpeedUp);
    }
}
