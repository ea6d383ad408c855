//! Config-driven entry points shared by the command line and the acceptance suite.

use crate::cmpo::{SoftmaxPolicy, StepRecord, Trainer, TrainerState};
use crate::error::Result;
use crate::metrics::{dynamics_report, DynamicsSummary};
use crate::store::RunConfig;

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub state: TrainerState,
}

impl TrainOutcome {
    /// Mean of `f` over the last `window` steps.
    pub fn tail_mean(&self, window: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
        tail_mean(&self.records, window, f)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    pub fn v_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.v_rate).collect()
    }

    pub fn dynamics(&self, cfg: &RunConfig) -> Result<DynamicsSummary> {
        Ok(dynamics_report(&self.lambdas(), &self.v_rates(), &cfg.dynamics())?)
    }
}

pub fn tail_mean(records: &[StepRecord], window: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
    let w = window.clamp(1, records.len().max(1));
    let tail = &records[records.len().saturating_sub(w)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Mean λ over the second half of a run.
pub fn late_mean_lambda(records: &[StepRecord]) -> f64 {
    tail_mean(records, records.len() / 2, |r| r.lambda)
}

/// The untrained policy for a configuration.
pub fn initial_policy(cfg: &RunConfig) -> Result<SoftmaxPolicy> {
    Ok(SoftmaxPolicy::standard(cfg.temperature)?)
}

/// Train for `steps` steps, starting fresh or from `resume`. `on_step` sees every record and
/// the state after it, which is where callers log and checkpoint.
pub fn train<F>(cfg: &RunConfig, resume: Option<TrainerState>, steps: u64, on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepRecord, &TrainerState) -> Result<()>,
{
    let source = cfg.source(None)?;
    let simulator = cfg.simulator();
    let judge = cfg.judge();
    let mut trainer = Trainer::new(
        cfg.train_settings(),
        &source,
        simulator.as_ref(),
        judge.as_ref(),
        cfg.principle_set()?,
        initial_policy(cfg)?,
    )?;
    if let Some(state) = resume {
        trainer = trainer.with_state(state)?;
    }
    let records = trainer.run(steps, on_step)?;
    Ok(TrainOutcome {
        records,
        state: trainer.state().clone(),
    })
}
