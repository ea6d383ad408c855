//! Constrained multi-turn dialogue RL gym.
//!
//! A customer-service agent talks to simulated users and may issue a voucher. Training
//! maximizes user satisfaction while a PID-controlled Lagrange multiplier holds the voucher
//! rate near a budget. See the crate README for the command-line workflow.

pub mod cmpo;
pub mod constraint;
pub mod env;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod reward;
pub mod scenario;
pub mod seeding;
pub mod store;

#[cfg(test)]
mod testutil;

pub use cmpo::{CmpoConfig, RolloutGroup, SoftmaxPolicy, Trainer};
pub use constraint::{LagrangeState, LambdaMode, PidGains};
pub use env::{AgentAction, Decision, Env, Trajectory};
pub use error::{Error, Result};
pub use metrics::{EvalReport, EvalSpec};
pub use reward::{PrincipleSet, SatisfactionScale};
pub use scenario::{Difficulty, PersonaBank, Scenario};
pub use store::RunConfig;
