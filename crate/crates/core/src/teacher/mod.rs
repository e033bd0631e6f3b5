//! The language-model teacher.
//!
//! Each query encodes the state, retrieves similar memories, builds a
//! prompt and decodes a maneuver from the backend. Risky episodes are sent
//! back for reflection; the resulting lessons and constraint rules are
//! stored in memory and shape later prompts and fallbacks.

mod backend;
mod constraint;
mod decide;
mod memory;
mod prompt;
mod reflect;
mod scripted;
mod state;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use backend::{
    BackendError, ChatBackend, ChatMessage, Fault, FaultBackend, RecordingBackend, RemoteBackend,
    RemoteConfig, ReplayBackend, ScriptedBackend, TranscriptLine, TranscriptRequest, API_KEY_ENV,
    DIGEST_TAG,
};
pub use constraint::{forbidden, Comparison, ConstraintRule, GuardCondition, GuardField};
pub use decide::{decide, parse_decision, DecisionSource, DecodeOptions, TeacherDecision, PARSE_RETRIES};
pub use memory::{
    MemoryEntry, MemoryRepository, Outcome, Retrieved, MAX_LESSON_CHARS, MEMORY_CAPACITY,
    MEMORY_SCHEMA_VERSION,
};
pub use prompt::{build_prompt, estimate_tokens, extract_tagged, Prompt, MAX_PROMPT_TOKENS, N_SHOT};
pub use reflect::{
    parse_reflection, reflect, FlaggedSegment, FlaggedStep, ReflectionDigest, ReflectionOutcome,
    REFLECTION_TAG,
};
pub use scripted::{decide_from_context, scripted_decide, DecisionContext, DrivingContext, NeighborDigest};
pub use state::{cosine, encode_state, StateVector, STATE_DIM};

use crate::error::{Error, Result};
use crate::risk::{self, RiskParams};
use crate::sim::{Event, Maneuver, ScenarioKind, ScenarioState};

/// Lessons kept for the system prompt.
const MAX_PROMPT_LESSONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: f64,
    pub n_shot: usize,
    pub memory_capacity: usize,
    pub memory_file: Option<PathBuf>,
    /// Reflect on risky episodes while the teacher is active.
    pub reflection: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_s: 30.0,
            n_shot: N_SHOT,
            memory_capacity: MEMORY_CAPACITY,
            memory_file: None,
            reflection: true,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shot == 0 || self.n_shot > N_SHOT {
            return Err(Error::config("teacher.n_shot", format!("must lie in 1..={N_SHOT}")));
        }
        if self.memory_capacity == 0 {
            return Err(Error::config("teacher.memory_capacity", "must be > 0"));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::config("teacher.timeout_s", "must be > 0"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::config("teacher.temperature", "must lie in [0, 2]"));
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_empty() {
            return Err(Error::config("teacher.endpoint", "required for the remote backend"));
        }
        Ok(())
    }

    pub fn build_backend(&self) -> Result<Box<dyn ChatBackend>> {
        Ok(match self.backend {
            BackendKind::Scripted => Box::new(ScriptedBackend),
            BackendKind::Remote => Box::new(RemoteBackend::new(RemoteConfig {
                endpoint: self.endpoint.clone(),
                model: self.model.clone(),
                timeout_s: self.timeout_s,
            })?),
        })
    }
}

/// Result of one teacher query.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStep {
    pub decision: TeacherDecision,
    pub z: StateVector,
    pub tau_min: f64,
    pub prompt: Prompt,
}

/// One transition of a finished episode, for reflection.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub z: StateVector,
    pub action: Maneuver,
    pub tau_min_before: f64,
    pub ego_speed: f64,
    pub omega: f64,
    pub events: Vec<Event>,
}

/// Teacher state outside the memory file, for resuming a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherSnapshot {
    pub lessons: Vec<String>,
    pub queries: u64,
    pub reflections: u64,
}

pub struct Teacher {
    backend: Box<dyn ChatBackend>,
    memory: MemoryRepository,
    lessons: Vec<String>,
    risk: RiskParams,
    n_shot: usize,
    opts: DecodeOptions,
    queries: u64,
    reflections: u64,
}

impl Teacher {
    pub fn new(backend: Box<dyn ChatBackend>, memory: MemoryRepository, risk: RiskParams) -> Self {
        Self {
            backend,
            memory,
            lessons: Vec::new(),
            risk,
            n_shot: N_SHOT,
            opts: DecodeOptions::default(),
            queries: 0,
            reflections: 0,
        }
    }

    pub fn scripted(risk: RiskParams) -> Self {
        Self::new(Box::new(ScriptedBackend), MemoryRepository::default(), risk)
    }

    pub fn from_config(cfg: &TeacherConfig, risk: RiskParams) -> Result<Self> {
        cfg.validate()?;
        let memory = match &cfg.memory_file {
            Some(p) if p.exists() => MemoryRepository::load(p)?,
            _ => MemoryRepository::new(cfg.memory_capacity),
        };
        let mut t = Self::new(cfg.build_backend()?, memory, risk);
        t.n_shot = cfg.n_shot;
        t.opts = DecodeOptions {
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        };
        Ok(t)
    }

    pub fn with_backend(mut self, backend: Box<dyn ChatBackend>) -> Self {
        self.backend = backend;
        self
    }

    pub fn memory(&self) -> &MemoryRepository {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut MemoryRepository {
        &mut self.memory
    }

    pub fn lessons(&self) -> &[String] {
        &self.lessons
    }

    /// Decision queries served so far (retries are not counted).
    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn reflections(&self) -> u64 {
        self.reflections
    }

    pub fn constraints(&self) -> Vec<ConstraintRule> {
        self.memory.constraints().cloned().collect()
    }

    /// Full decision pipeline for the current state.
    pub fn query(&mut self, state: &ScenarioState) -> TeacherStep {
        self.queries += 1;
        let obs = state.observe();
        let assessment = risk::assess(state, &self.risk);
        let z = encode_state(&obs, &assessment, self.risk.horizon);
        let constraints = self.constraints();
        let dc = DecisionContext::new(&obs, &assessment, DrivingContext::from_state(state), &constraints);
        let retrieved = self.memory.retrieve(&z, self.n_shot);
        let prompt = build_prompt(dc, &retrieved, &self.lessons);
        let decision = decide(&prompt, self.backend.as_mut(), &self.opts);
        TeacherStep {
            decision,
            z,
            tau_min: assessment.tau_min,
            prompt,
        }
    }

    pub fn remember(&mut self, entry: MemoryEntry) {
        self.memory.insert(entry);
    }

    /// Flags risky stretches of an episode and, if any, reflects on them.
    /// The outcome is stored as a lesson entry keyed by the worst step.
    pub fn reflect_on_episode(
        &mut self,
        kind: ScenarioKind,
        steps: &[EpisodeStep],
        outcome: Outcome,
        episode_return: f64,
    ) -> Option<ReflectionOutcome> {
        let omegas: Vec<f64> = steps.iter().map(|s| s.omega).collect();
        let ranges = risk::flag_segments(&omegas, self.risk.delta);
        if ranges.is_empty() {
            return None;
        }
        let finite = |t: f64| t.is_finite().then_some(t);
        let segments: Vec<FlaggedSegment> = ranges
            .iter()
            .map(|&(a, b)| FlaggedSegment {
                scenario: kind,
                start: a,
                end: b,
                steps: (a..=b)
                    .map(|t| FlaggedStep {
                        t,
                        action: steps[t].action,
                        tau_min: finite(steps[t].tau_min_before),
                        ego_speed: steps[t].ego_speed,
                        omega: steps[t].omega,
                        events: steps[t].events.clone(),
                    })
                    .collect(),
            })
            .collect();
        let result = reflect(&segments, self.risk.horizon, self.backend.as_mut(), &self.opts);
        self.reflections += 1;
        let worst = omegas
            .iter()
            .enumerate()
            .fold(0, |best, (i, w)| if *w > omegas[best] { i } else { best });
        if !result.prompt_delta.is_empty() {
            self.lessons.push(result.prompt_delta.clone());
            if self.lessons.len() > MAX_PROMPT_LESSONS {
                self.lessons.remove(0);
            }
        }
        let lesson = if result.policy_delta.is_empty() {
            "flagged episode".to_string()
        } else {
            result.policy_delta.clone()
        };
        self.memory.insert(MemoryEntry {
            z: steps[worst].z.clone(),
            scenario_kind: kind,
            action: steps[worst].action,
            outcome,
            ret: episode_return,
            lesson,
            constraints: result.constraint_delta.clone(),
        });
        Some(result)
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot {
            lessons: self.lessons.clone(),
            queries: self.queries,
            reflections: self.reflections,
        }
    }

    pub fn restore(&mut self, snap: TeacherSnapshot) {
        self.lessons = snap.lessons;
        self.queries = snap.queries;
        self.reflections = snap.reflections;
    }

    pub fn save_memory(&self, path: &std::path::Path) -> Result<()> {
        self.memory.save(path)
    }
}
