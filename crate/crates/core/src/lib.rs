//! Teacher-guided attention PPO for high-level driving decisions.
//!
//! The crate is organised bottom-up:
//!
//! - [`sim`]: seedable kinematic traffic simulator (intersection, merge, highway).
//! - [`risk`]: time-to-conflict-point estimates, the risk functional and
//!   episode flagging.
//! - [`teacher`]: the language-model teacher (state encoding, memory
//!   retrieval, prompting, decision parsing, reflection) with pluggable
//!   chat backends, including a deterministic scripted one.
//! - [`tensor`]: a small reverse-mode autodiff engine with Adam and a
//!   checksummed checkpoint format.
//! - [`policy`]: the fusion policy network and the student losses.
//! - [`train`]: rollouts, PPO updates, guidance scheduling, evaluation and
//!   the ablation driver.
//! - [`config`]: the global TOML configuration with dotted overrides.

pub mod config;
pub mod error;
pub mod policy;
pub mod risk;
pub mod sim;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
