use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::backend::{ChatBackend, ChatMessage};
use super::constraint::{Comparison, ConstraintRule, GuardCondition, GuardField};
use super::decide::DecodeOptions;
use crate::sim::{Event, Maneuver, ScenarioKind};

pub const REFLECTION_TAG: &str = "reflection_digest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedStep {
    pub t: usize,
    pub action: Maneuver,
    /// τ_min of the state the action was taken from; `None` if conflict-free.
    pub tau_min: Option<f64>,
    pub ego_speed: f64,
    pub omega: f64,
    #[serde(default)]
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSegment {
    pub scenario: ScenarioKind,
    pub start: usize,
    pub end: usize,
    pub steps: Vec<FlaggedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionDigest {
    pub horizon: f64,
    pub segments: Vec<FlaggedSegment>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub policy_delta: String,
    pub prompt_delta: String,
    pub constraint_delta: Vec<ConstraintRule>,
}

impl ReflectionDigest {
    /// The step with the largest Ω (earliest on ties).
    pub fn worst(&self) -> Option<(&FlaggedSegment, &FlaggedStep)> {
        let mut best: Option<(&FlaggedSegment, &FlaggedStep)> = None;
        for seg in &self.segments {
            for st in &seg.steps {
                if best.is_none_or(|(_, b)| st.omega > b.omega) {
                    best = Some((seg, st));
                }
            }
        }
        best
    }
}

fn narrate(d: &ReflectionDigest) -> String {
    let mut s = String::from(
        "The following segments of a driving episode were flagged as risky. \
         Analyse the sequence of actions and explain what should change.\n",
    );
    for seg in &d.segments {
        let _ = writeln!(s, "\nSegment t={}..{} ({}):", seg.start, seg.end, seg.scenario);
        for st in &seg.steps {
            let _ = writeln!(
                s,
                "- t={}: action {}, tau_min {}, speed {:.1} m/s, omega {:.2}{}",
                st.t,
                st.action,
                st.tau_min.map_or("none".into(), |t| format!("{t:.2} s")),
                st.ego_speed,
                st.omega,
                if st.events.is_empty() {
                    String::new()
                } else {
                    format!(", events {:?}", st.events)
                }
            );
        }
    }
    s.push_str(
        "\nAnswer with three lines:\nPOLICY_DELTA: <lesson for future decisions>\n\
         PROMPT_DELTA: <addition to the decision instructions>\n\
         CONSTRAINTS: <JSON array of {\"scenario_kind\", \"forbidden_action\", \"guard\": \
         [{\"field\": \"tau_min\"|\"ego_speed\", \"cmp\": \"lt\"|\"gt\", \"threshold\": number}]}>\n",
    );
    let digest = serde_json::to_string(d).expect("digest serialises");
    let _ = write!(s, "\n<{REFLECTION_TAG}>{digest}</{REFLECTION_TAG}>");
    s
}

/// Canonical scripted answer: forbid the worst step's action whenever τ_min
/// is below the value observed when it was taken.
pub(crate) fn scripted_reflection_reply(d: &ReflectionDigest) -> String {
    let Some((seg, st)) = d.worst() else {
        return "POLICY_DELTA: \nPROMPT_DELTA: \nCONSTRAINTS: []".into();
    };
    let threshold = st.tau_min.unwrap_or(d.horizon).min(d.horizon);
    let rule = ConstraintRule {
        scenario_kind: seg.scenario,
        forbidden_action: st.action,
        guard: vec![GuardCondition {
            field: GuardField::TauMin,
            cmp: Comparison::Lt,
            threshold,
        }],
    };
    format!(
        "POLICY_DELTA: In {} avoid {} when tau_min is below {:.2} s.\n\
         PROMPT_DELTA: Check tau_min before choosing {}.\n\
         CONSTRAINTS: {}",
        seg.scenario,
        st.action,
        threshold,
        st.action,
        serde_json::to_string(&[rule]).expect("rule serialises")
    )
}

/// Parses the three-line reply. Constraint entries that fail the schema are
/// dropped with a warning; the text deltas are kept regardless.
pub fn parse_reflection(text: &str) -> ReflectionOutcome {
    let mut out = ReflectionOutcome::default();
    let mut constraints_raw: Option<String> = None;
    for line in text.lines() {
        let l = line.trim();
        if let Some(rest) = l.strip_prefix("POLICY_DELTA:") {
            out.policy_delta = rest.trim().to_string();
        } else if let Some(rest) = l.strip_prefix("PROMPT_DELTA:") {
            out.prompt_delta = rest.trim().to_string();
        } else if let Some(rest) = l.strip_prefix("CONSTRAINTS:") {
            constraints_raw = Some(rest.trim().to_string());
        } else if let Some(buf) = constraints_raw.as_mut() {
            buf.push('\n');
            buf.push_str(l);
        }
    }
    let Some(raw) = constraints_raw.filter(|r| !r.is_empty()) else {
        return out;
    };
    match serde_json::from_str::<Vec<serde_json::Value>>(&raw) {
        Ok(items) => {
            for item in items {
                match serde_json::from_value::<ConstraintRule>(item) {
                    Ok(rule) => match rule.validate() {
                        Ok(()) => out.constraint_delta.push(rule),
                        Err(e) => log::warn!("dropping constraint: {e}"),
                    },
                    Err(e) => log::warn!("dropping constraint: {e}"),
                }
            }
        }
        Err(e) => log::warn!("constraint block is not a JSON array: {e}"),
    }
    out
}

/// Best effort: a backend failure yields empty deltas.
pub fn reflect(
    flagged: &[FlaggedSegment],
    horizon: f64,
    backend: &mut dyn ChatBackend,
    opts: &DecodeOptions,
) -> ReflectionOutcome {
    let digest = ReflectionDigest {
        horizon,
        segments: flagged.to_vec(),
    };
    let messages = vec![
        ChatMessage::system(
            "You review risky driving episodes and propose corrections to the decision policy.",
        ),
        ChatMessage::user(narrate(&digest)),
    ];
    match backend.chat(&messages, opts.temperature, opts.max_tokens) {
        Ok(text) => parse_reflection(&text),
        Err(e) => {
            log::warn!("reflection skipped: {e}");
            ReflectionOutcome::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::backend::ScriptedBackend;

    fn seg(action: Maneuver, tau: f64) -> FlaggedSegment {
        FlaggedSegment {
            scenario: ScenarioKind::Merge,
            start: 3,
            end: 5,
            steps: vec![
                FlaggedStep {
                    t: 4,
                    action: Maneuver::Cruise,
                    tau_min: Some(3.0),
                    ego_speed: 20.0,
                    omega: 0.3,
                    events: vec![],
                },
                FlaggedStep {
                    t: 5,
                    action,
                    tau_min: Some(tau),
                    ego_speed: 22.0,
                    omega: 10.0,
                    events: vec![Event::Collision],
                },
            ],
        }
    }

    #[test]
    fn scripted_rule_forbids_flagged_action() {
        let out = reflect(
            &[seg(Maneuver::SpeedUp, 0.8)],
            6.0,
            &mut ScriptedBackend,
            &DecodeOptions::default(),
        );
        assert_eq!(out.constraint_delta.len(), 1);
        let r = &out.constraint_delta[0];
        assert_eq!(r.forbidden_action, Maneuver::SpeedUp);
        assert_eq!(r.scenario_kind, ScenarioKind::Merge);
        assert_eq!(r.guard[0].threshold, 0.8);
        assert!(!out.policy_delta.is_empty());
    }

    #[test]
    fn malformed_constraints_keep_text_deltas() {
        let reply = "POLICY_DELTA: brake earlier\nPROMPT_DELTA: mention gaps\nCONSTRAINTS: [{\"scenario_kind\": \"merge\", \"forbidden_action\": ";
        let out = parse_reflection(reply);
        assert_eq!(out.policy_delta, "brake earlier");
        assert_eq!(out.prompt_delta, "mention gaps");
        assert!(out.constraint_delta.is_empty());

        let mixed = "CONSTRAINTS: [{\"scenario_kind\":\"merge\",\"forbidden_action\":\"fly\",\"guard\":[]}, \
                     {\"scenario_kind\":\"merge\",\"forbidden_action\":\"cruise\",\"guard\":[{\"field\":\"ego_speed\",\"cmp\":\"gt\",\"threshold\":30}]}]";
        assert_eq!(parse_reflection(mixed).constraint_delta.len(), 1);
    }
}
