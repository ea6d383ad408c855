//! Group rollouts, hybrid advantages, the clipped KL-regularized surrogate and the training loop.

mod advantage;
pub mod mini;
mod policy;
mod surrogate;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{AgentPolicy, Env, Trajectory, UserSimulator};
use crate::error::Result;
use crate::reward::{score_trajectory, PrincipleSet, RewardBreakdown, SatisfactionScale, TurnJudge};
use crate::scenario::Scenario;
use crate::seeding::derive_seed;

pub use advantage::{batch_advantages, hybrid_advantages, normalize, raw_rewards, AdvantageEntry, HybridAdvantageTable};
pub use policy::{feature_index, ActionTemplate, SoftmaxPolicy, TemplatePolicy, COOP_BUCKETS, NUM_FEATURES};
pub use surrogate::{surrogate_from_samples, surrogate_loss, SurrogateOutput, TurnSample};
pub use train::{MixtureSource, ScenarioSource, StepRecord, TrainSettings, Trainer, TrainerState};

#[derive(Debug, Error, PartialEq)]
pub enum CmpoError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("enumeration needs {needed} combinations, budget is {budget}")]
    TooLarge { needed: u128, budget: u128 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    Group,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmpoConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub group_size: usize,
    pub broadcast_outcome: bool,
    pub norm_scope: NormScope,
    pub eps_norm: f64,
    /// Leave format-failed trajectories out of the normalization statistics.
    pub exclude_failed_from_norm: bool,
}

impl Default for CmpoConfig {
    fn default() -> Self {
        CmpoConfig {
            clip_eps: 0.2,
            kl_beta: 0.005,
            gamma: 1.0,
            group_size: 4,
            broadcast_outcome: true,
            norm_scope: NormScope::Group,
            eps_norm: 1e-8,
            exclude_failed_from_norm: false,
        }
    }
}

impl CmpoConfig {
    pub fn validate(&self) -> Result<(), CmpoError> {
        let bad = |m: String| Err(CmpoError::InvalidConfig(m));
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return bad(format!("clip_eps {} must be positive", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad(format!("kl_beta {} must be non-negative", self.kl_beta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.group_size < 2 {
            return bad(format!("group_size {} must be at least 2", self.group_size));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm.is_finite()) {
            return bad(format!("eps_norm {} must be positive", self.eps_norm));
        }
        Ok(())
    }
}

/// G rollouts of one scenario under the same frozen policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub scenario_id: String,
    pub trajectories: Vec<Trajectory>,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Everything needed to roll out and score a session.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub env: Env,
    pub simulator: &'a dyn UserSimulator,
    pub judge: &'a dyn TurnJudge,
    pub principles: Option<&'a PrincipleSet>,
    pub scale: SatisfactionScale,
}

/// Sub-seed of rollout `i` within a scenario's group.
pub fn rollout_seed(scenario: &Scenario, i: usize) -> u64 {
    derive_seed(scenario.rng_seed, i as u64)
}

pub fn collect_group(
    ctx: &RolloutContext<'_>,
    scenario: &Scenario,
    policy: &dyn AgentPolicy,
    group_size: usize,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(CmpoError::InvalidConfig(format!("group_size {group_size} must be at least 2")).into());
    }
    let scored: Vec<(Trajectory, RewardBreakdown)> = (0..group_size)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut traj = ctx
                .env
                .rollout(scenario, policy, ctx.simulator, rollout_seed(scenario, i))?;
            let breakdown = score_trajectory(&mut traj, ctx.principles, ctx.judge, ctx.scale)?;
            Ok((traj, breakdown))
        })
        .collect::<Result<_>>()?;
    let (trajectories, breakdowns) = scored.into_iter().unzip();
    Ok(RolloutGroup {
        scenario_id: scenario.id.clone(),
        trajectories,
        breakdowns,
    })
}

/// Collect one group per scenario, in scenario order.
pub fn collect_groups(
    ctx: &RolloutContext<'_>,
    scenarios: &[Scenario],
    policy: &dyn AgentPolicy,
    group_size: usize,
) -> Result<Vec<RolloutGroup>> {
    scenarios
        .par_iter()
        .map(|s| collect_group(ctx, s, policy, group_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ScriptedSimulator;
    use crate::reward::ScriptedJudge;
    use crate::scenario::{DemandKind, Disclosure};
    use crate::testutil::scenario;

    fn ctx<'a>(sim: &'a ScriptedSimulator, judge: &'a ScriptedJudge, ps: &'a PrincipleSet) -> RolloutContext<'a> {
        RolloutContext {
            env: Env::default(),
            simulator: sim,
            judge,
            principles: Some(ps),
            scale: SatisfactionScale::default(),
        }
    }

    #[test]
    fn groups_are_reproducible_with_distinct_seeds() {
        let (sim, judge, ps) = (ScriptedSimulator, ScriptedJudge, PrincipleSet::reference());
        let s = scenario(3, DemandKind::IncentiveOpen, Disclosure::Medium, false);
        let policy = SoftmaxPolicy::standard(1.0).unwrap();
        let a = collect_group(&ctx(&sim, &judge, &ps), &s, &policy, 4).unwrap();
        let b = collect_group(&ctx(&sim, &judge, &ps), &s, &policy, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let seeds: std::collections::BTreeSet<_> = a.trajectories.iter().map(|t| t.sim_seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn voucher_policy_on_rigid_user_costs_every_rollout() {
        let (sim, judge, ps) = (ScriptedSimulator, ScriptedJudge, PrincipleSet::reference());
        let s = scenario(4, DemandKind::RigidPursuit, Disclosure::High, true);
        let policy = TemplatePolicy {
            template: ActionTemplate::offer_voucher(),
        };
        let g = collect_group(&ctx(&sim, &judge, &ps), &s, &policy, 4).unwrap();
        assert!(g.trajectories.iter().all(|t| t.total_cost() == 1));
    }

    #[test]
    fn rejects_singleton_groups() {
        let (sim, judge, ps) = (ScriptedSimulator, ScriptedJudge, PrincipleSet::reference());
        let s = scenario(3, DemandKind::IncentiveOpen, Disclosure::Medium, false);
        let policy = SoftmaxPolicy::standard(1.0).unwrap();
        assert!(collect_group(&ctx(&sim, &judge, &ps), &s, &policy, 1).is_err());
        let mut cfg = CmpoConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.group_size = 1;
        assert!(cfg.validate().is_err());
    }
}
