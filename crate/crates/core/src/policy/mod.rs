//! Student policy: dual encoders fused by two-token self-attention, the
//! teacher-approximation heads, and the student losses.
//!
//! The student embedding `h^S` queries a key/value set made of the teacher
//! embedding `h^T` and `h^S` itself; head outputs are concatenated,
//! projected back to the hidden width and added to `h^S`. With fusion off
//! the final heads read `h^S` directly.

mod loss;
mod net;

pub use loss::{
    bellman_targets, distill_loss, kl_divergence, kl_penalty, loss_and_grads, ppo_policy_loss,
    smoothed_one_hot, total_loss, value_loss, LossBatch, LossReport, LossWeights,
    TEACHER_PROB_FLOOR,
};
pub use net::{
    features, ForwardVars, FusionPolicyNet, NetConfig, PolicyOutput, ACTIONS, INPUT_DIM,
};
