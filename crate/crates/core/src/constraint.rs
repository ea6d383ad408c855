//! PID-Lagrangian cost controller.
//!
//! The multiplier update accumulates all three terms into λ:
//!
//! ```text
//! e_k     = J_C,k − δ
//! I_k     = clamp(I_{k−1} + e_k, ±integral_clamp)
//! λ_{k+1} = clip(λ_k + K_P·e_k + K_I·I_k + K_D·(e_k − e_{k−1}), 0, λ_max)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("cannot compute cost of an empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 0.2,
            ki: 0.07,
            kd: 0.0,
        }
    }
}

/// Controller memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub integral: f64,
    pub prev_error: f64,
    pub step: u64,
    pub gains: PidGains,
    pub lambda_max: f64,
    pub delta: f64,
    pub integral_clamp: f64,
}

impl Default for LagrangeState {
    fn default() -> Self {
        LagrangeState::new(PidGains::default(), 0.30, 5.0, 0.0, 10.0)
    }
}

impl LagrangeState {
    pub fn new(gains: PidGains, delta: f64, lambda_max: f64, lambda0: f64, integral_clamp: f64) -> Self {
        LagrangeState {
            lambda: lambda0.clamp(0.0, lambda_max),
            integral: 0.0,
            prev_error: 0.0,
            step: 0,
            gains,
            lambda_max,
            delta,
            integral_clamp,
        }
    }

    /// The error that `report` would produce against the threshold.
    pub fn error_for(&self, report: &CostReport) -> f64 {
        report.batch_cost - self.delta
    }
}

/// Fraction of sessions in the update batch that issued a voucher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch_cost: f64,
    pub batch_size: usize,
}

pub fn batch_cost(trajs: &[Trajectory]) -> Result<CostReport, ConstraintError> {
    let flags: Vec<bool> = trajs.iter().map(Trajectory::issued_voucher).collect();
    cost_of(&flags)
}

/// Batch cost from per-session voucher flags.
pub fn cost_of(issued: &[bool]) -> Result<CostReport, ConstraintError> {
    if issued.is_empty() {
        return Err(ConstraintError::EmptyBatch);
    }
    let n = issued.iter().filter(|&&v| v).count();
    Ok(CostReport {
        batch_cost: n as f64 / issued.len() as f64,
        batch_size: issued.len(),
    })
}

pub fn update_lambda(state: &LagrangeState, report: &CostReport) -> LagrangeState {
    let e = state.error_for(report);
    let integral = (state.integral + e).clamp(-state.integral_clamp, state.integral_clamp);
    let de = e - state.prev_error;
    let g = state.gains;
    let lambda = (state.lambda + g.kp * e + g.ki * integral + g.kd * de).clamp(0.0, state.lambda_max);
    LagrangeState {
        lambda,
        integral,
        prev_error: e,
        step: state.step + 1,
        ..*state
    }
}

/// How λ evolves during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// PID update every step.
    Pid,
    /// λ held at its initial value; the controller state still tracks the error.
    Frozen,
    /// λ held at a given value.
    Fixed(f64),
    /// Plain error-driven update `λ ← clip(λ + K_P·e)` without integral or derivative terms.
    Plain,
}

pub fn advance(state: &LagrangeState, report: &CostReport, mode: LambdaMode) -> LagrangeState {
    match mode {
        LambdaMode::Pid => update_lambda(state, report),
        LambdaMode::Frozen | LambdaMode::Fixed(_) => {
            let tracked = update_lambda(state, report);
            LagrangeState {
                lambda: state.lambda,
                ..tracked
            }
        }
        LambdaMode::Plain => {
            let plain = LagrangeState {
                gains: PidGains {
                    kp: state.gains.kp,
                    ki: 0.0,
                    kd: 0.0,
                },
                ..*state
            };
            LagrangeState {
                gains: state.gains,
                ..update_lambda(&plain, report)
            }
        }
    }
}
