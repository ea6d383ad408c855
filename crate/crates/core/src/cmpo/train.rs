//! The training loop: sample, roll out under the frozen policy, score, penalize, step, update λ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_advantages, collect_groups, surrogate_loss, CmpoConfig, CmpoError, HybridAdvantageTable, RolloutContext,
    RolloutGroup, SoftmaxPolicy,
};
use crate::constraint::{advance, cost_of, LagrangeState, LambdaMode};
use crate::env::{Env, Trajectory, UserSimulator};
use crate::error::Result;
use crate::metrics::satisfaction_1_to_5;
use crate::reward::{PrincipleSet, SatisfactionScale, TurnJudge};
use crate::scenario::{sample_batch_with, BatchSpec, DemandMix, PersonaBank, Scenario};

/// Where each step's scenarios come from.
pub trait ScenarioSource: Send + Sync {
    fn draw(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Scenario>>;
}

/// Easy/Hard mixture over a persona bank.
#[derive(Debug, Clone)]
pub struct MixtureSource {
    pub bank: PersonaBank,
    pub easy_fraction: f64,
    pub mix: DemandMix,
}

impl ScenarioSource for MixtureSource {
    fn draw(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Scenario>> {
        let spec = BatchSpec {
            easy_fraction: self.easy_fraction,
            count,
        };
        Ok(sample_batch_with(&spec, &self.bank, &self.mix, rng)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub env: Env,
    pub cmpo: CmpoConfig,
    pub learning_rate: f64,
    pub scenarios_per_step: usize,
    pub scale: SatisfactionScale,
    pub use_process_reward: bool,
    pub lambda_mode: LambdaMode,
    pub lagrange: LagrangeState,
    pub temperature: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), CmpoError> {
        self.cmpo.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CmpoError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.scenarios_per_step == 0 {
            return Err(CmpoError::InvalidConfig("scenarios_per_step must be positive".into()));
        }
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if !(0.0..=self.lagrange.lambda_max).contains(&v) {
                return Err(CmpoError::InvalidConfig(format!(
                    "fixed lambda {v} outside [0, {}]",
                    self.lagrange.lambda_max
                )));
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training; enough to resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub policy: SoftmaxPolicy,
    pub reference: SoftmaxPolicy,
    pub lagrange: LagrangeState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn initial(settings: &TrainSettings, policy: SoftmaxPolicy) -> Self {
        let mut lagrange = settings.lagrange;
        if let LambdaMode::Fixed(v) = settings.lambda_mode {
            lagrange.lambda = v;
        }
        TrainerState {
            reference: policy.clone(),
            policy,
            lagrange,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
        }
    }
}

/// Per-step log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub e_k: f64,
    /// λ after this step's controller update.
    pub lambda: f64,
    /// λ used in this step's advantages.
    pub lambda_used: f64,
    pub j_c: f64,
    pub j_r: f64,
    pub mean_sat: f64,
    pub v_rate: f64,
    pub finish_rate: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

impl StepRecord {
    /// `step e_k lambda J_C mean_sat v_rate`
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.step, self.e_k, self.lambda, self.j_c, self.mean_sat, self.v_rate
        )
    }
}

pub struct Trainer<'a> {
    settings: TrainSettings,
    source: &'a dyn ScenarioSource,
    simulator: &'a dyn UserSimulator,
    judge: &'a dyn TurnJudge,
    principles: PrincipleSet,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        settings: TrainSettings,
        source: &'a dyn ScenarioSource,
        simulator: &'a dyn UserSimulator,
        judge: &'a dyn TurnJudge,
        principles: PrincipleSet,
        policy: SoftmaxPolicy,
    ) -> Result<Self> {
        settings.validate()?;
        let state = TrainerState::initial(&settings, policy);
        Ok(Trainer {
            settings,
            source,
            simulator,
            judge,
            principles,
            state,
        })
    }

    pub fn with_state(mut self, state: TrainerState) -> Result<Self> {
        if !state.policy.same_shape(&self.state.policy) || !state.reference.same_shape(&self.state.policy) {
            return Err(CmpoError::ShapeMismatch("restored policy does not match the configured one".into()).into());
        }
        self.state = state;
        Ok(self)
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.state.policy
    }

    /// λ that the next step will use in its advantages.
    pub fn current_lambda(&self) -> f64 {
        match self.settings.lambda_mode {
            LambdaMode::Fixed(v) => v,
            _ => self.state.lagrange.lambda,
        }
    }

    fn context(&self) -> RolloutContext<'_> {
        RolloutContext {
            env: self.settings.env,
            simulator: self.simulator,
            judge: self.judge,
            principles: self.settings.use_process_reward.then_some(&self.principles),
            scale: self.settings.scale,
        }
    }

    /// Roll out `scenarios` under `policy` and compute advantages at `lambda`.
    pub fn rollout_batch(
        &self,
        scenarios: &[Scenario],
        policy: &SoftmaxPolicy,
        lambda: f64,
    ) -> Result<(Vec<RolloutGroup>, Vec<HybridAdvantageTable>)> {
        let groups = collect_groups(&self.context(), scenarios, policy, self.settings.cmpo.group_size)?;
        let tables = batch_advantages(&groups, lambda, &self.settings.cmpo)?;
        Ok((groups, tables))
    }

    /// Draw the next step's scenarios, advancing the sampling stream.
    pub fn draw_scenarios(&mut self) -> Result<Vec<Scenario>> {
        self.source.draw(self.settings.scenarios_per_step, &mut self.state.rng)
    }

    /// One optimizer step. State is only committed if every stage succeeds.
    pub fn step(&mut self) -> Result<StepRecord> {
        let mut rng = self.state.rng.clone();
        let scenarios = self.source.draw(self.settings.scenarios_per_step, &mut rng)?;
        let old = self.state.policy.clone();
        let lambda_used = self.current_lambda();
        let (groups, tables) = self.rollout_batch(&scenarios, &old, lambda_used)?;
        let trajectories: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
        let flags: Vec<bool> = trajectories.iter().map(|t| t.issued_voucher()).collect();
        let report = cost_of(&flags)?;
        let out = surrogate_loss(
            &groups,
            &tables,
            &self.state.policy,
            &old,
            &self.state.reference,
            &self.settings.cmpo,
        )?;
        let lr = self.settings.learning_rate;
        let logits: Vec<f64> = old
            .logits()
            .iter()
            .zip(&out.gradient)
            .map(|(l, g)| l - lr * g)
            .collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(CmpoError::Numerical("updated logits".into()).into());
        }
        let lagrange = advance(&self.state.lagrange, &report, self.settings.lambda_mode);
        let n = trajectories.len() as f64;
        let record = StepRecord {
            step: self.state.step + 1,
            e_k: self.state.lagrange.error_for(&report),
            lambda: lagrange.lambda,
            lambda_used,
            j_c: report.batch_cost,
            j_r: groups.iter().flat_map(|g| &g.breakdowns).map(|b| b.outcome).sum::<f64>() / n,
            mean_sat: trajectories
                .iter()
                .map(|t| satisfaction_1_to_5(t.final_satisfaction))
                .sum::<f64>()
                / n,
            v_rate: trajectories.iter().filter(|t| t.issued_voucher()).count() as f64 / n,
            finish_rate: trajectories.iter().filter(|t| t.finish_valid).count() as f64 / n,
            loss: out.loss,
            kl: out.kl,
            clip_fraction: out.clip_fraction,
        };
        self.state.policy.set_logits(logits)?;
        self.state.lagrange = lagrange;
        self.state.step += 1;
        self.state.rng = rng;
        Ok(record)
    }

    /// Run `steps` optimizer steps, calling `on_step` after each.
    pub fn run<F>(&mut self, steps: u64, mut on_step: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(&StepRecord, &TrainerState) -> Result<()>,
    {
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let record = self.step()?;
            on_step(&record, &self.state)?;
            log.push(record);
        }
        Ok(log)
    }
}
