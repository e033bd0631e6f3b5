use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain actor-critic, no teacher.
    #[serde(rename = "v-ppo")]
    VPpo,
    /// Attention fusion network, no teacher.
    #[serde(rename = "a-ppo")]
    APpo,
    /// Attention fusion with teacher guidance.
    #[serde(rename = "la-ppo")]
    LaPpo,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Self::VPpo, Self::APpo, Self::LaPpo];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::VPpo => "v-ppo",
            Self::APpo => "a-ppo",
            Self::LaPpo => "la-ppo",
        }
    }

    pub fn fusion(self) -> bool {
        self != Self::VPpo
    }

    pub fn uses_teacher(self) -> bool {
        self == Self::LaPpo
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "v-ppo" | "vppo" => Ok(Self::VPpo),
            "a-ppo" | "appo" => Ok(Self::APpo),
            "la-ppo" | "lappo" => Ok(Self::LaPpo),
            other => Err(Error::config(
                "train.variant",
                format!("unknown variant `{other}` (expected v-ppo|a-ppo|la-ppo)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub rollout_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_initial: f64,
    pub clip_floor: f64,
    pub teacher_window_fraction: f64,
    pub sigma_initial: f64,
    pub sigma_final: f64,
    pub kl_lambda: f64,
    pub value_coef: f64,
    pub distill_coef: f64,
    pub entropy_coef: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Probability mass spread over non-chosen actions in π^T.
    pub teacher_smoothing: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Checkpoint after this many evaluations (and at the end).
    pub checkpoint_every_evals: u64,
    /// Write measured decision times into the metrics CSV. Off keeps the
    /// CSV byte-reproducible.
    pub log_timing: bool,
    /// Write JSONL traces of the final evaluation episodes.
    pub trace_final_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            eval_interval: 500,
            eval_episodes: 20,
            rollout_size: 1600,
            batch_size: 128,
            epochs: 10,
            lr: 5e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_initial: 0.2,
            clip_floor: 0.02,
            teacher_window_fraction: 0.10,
            sigma_initial: 0.1,
            sigma_final: 2.0,
            kl_lambda: 10.0,
            value_coef: 0.5,
            distill_coef: 1.0,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            teacher_smoothing: 0.1,
            seed: 0,
            variant: Variant::LaPpo,
            checkpoint_every_evals: 10,
            log_timing: false,
            trace_final_eval: true,
        }
    }
}

impl TrainConfig {
    pub fn window_steps(&self) -> u64 {
        (self.teacher_window_fraction * self.total_steps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.total_steps", self.total_steps as f64),
            ("train.eval_interval", self.eval_interval as f64),
            ("train.eval_episodes", self.eval_episodes as f64),
            ("train.rollout_size", self.rollout_size as f64),
            ("train.batch_size", self.batch_size as f64),
            ("train.epochs", self.epochs as f64),
            ("train.lr", self.lr),
            ("train.checkpoint_every_evals", self.checkpoint_every_evals as f64),
        ];
        for (field, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if self.batch_size > self.rollout_size {
            return Err(Error::config(
                "train.batch_size",
                format!("must not exceed rollout_size {}", self.rollout_size),
            ));
        }
        if !(self.teacher_window_fraction > 0.0 && self.teacher_window_fraction < 1.0) {
            return Err(Error::config("train.teacher_window_fraction", "must lie in (0, 1)"));
        }
        for (field, v) in [("train.gamma", self.gamma), ("train.gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.clip_floor > 0.0 && self.clip_floor <= self.clip_initial) {
            return Err(Error::config("train.clip_floor", "must lie in (0, clip_initial]"));
        }
        if !(self.sigma_initial >= 0.0 && self.sigma_final >= self.sigma_initial) {
            return Err(Error::config("train.sigma_final", "must be >= sigma_initial >= 0"));
        }
        if !(0.0..1.0).contains(&self.teacher_smoothing) {
            return Err(Error::config("train.teacher_smoothing", "must lie in [0, 1)"));
        }
        for (field, v) in [
            ("train.kl_lambda", self.kl_lambda),
            ("train.value_coef", self.value_coef),
            ("train.distill_coef", self.distill_coef),
            ("train.entropy_coef", self.entropy_coef),
            ("train.max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(field, "must be >= 0"));
            }
        }
        Ok(())
    }
}
