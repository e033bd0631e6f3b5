//! Training loop: on-policy PPO with GAE over a fixed-size rollout buffer.
//!
//! Each cycle collects `rollout_size` decision steps with actions sampled
//! from the student, then runs shuffled minibatch epochs. During the first
//! `teacher_window_fraction` of the budget the teacher labels every step;
//! those labels drive the KL constraint and the teacher-head distillation.
//! Greedy evaluations run every `eval_interval` steps.
//!
//! Every random stream is derived from `(seed, cycle)`, and the environment
//! is re-seeded at the start of each cycle, so a run resumed from a cycle
//! boundary reproduces the uninterrupted run exactly.

mod ablate;
mod buffer;
mod config;
mod eval;
mod run;
mod schedule;

pub use ablate::{curve_auc, eval_at_fraction, run_ablation, AblationResult, AblationRun, AblationSpec};
pub use buffer::{gae, normalize, RolloutBuffer, Transition};
pub use config::{TrainConfig, Variant};
pub use eval::{evaluate, EvalReport, EVAL_SEED_BASE};
pub use run::{sidecar, RunSpec, RunSummary, Trainer, TrainerState, LOSS_HEADER, METRICS_HEADER};
pub use schedule::{clip_range, kl_budget};

/// SplitMix64 over `(seed, a, b)`; used to derive independent streams.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
