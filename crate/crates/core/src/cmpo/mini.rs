//! A small enumerable dialogue MDP with an exact constrained optimum.
//!
//! Each class is a user type (cooperativeness, demand) with a mixture weight and a table
//! `outcomes[turn][action]` giving the user's satisfaction and whether they leave. The
//! table drives a [`UserSimulator`], so policies are run through the real environment.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{feature_index, ActionTemplate, CmpoError, SoftmaxPolicy};
use crate::env::{Decision, Env, EnvError, EnvState, SimRequest, TerminationReason, UserSimulator, UserTurn};
use crate::error::Result;
use crate::reward::{outcome_from, SatisfactionScale};
use crate::scenario::{
    Affect, BusinessSignals, CommStyle, DemandKind, Difficulty, Disclosure, ExtrinsicDemand, IntrinsicPersona,
    IssueCategory, Scenario, SolveStyle,
};

use super::ScenarioSource;

/// Default cap on the number of joint plans the oracle will enumerate.
pub const ENUMERATION_BUDGET: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniOutcome {
    pub satisfaction: u8,
    pub terminate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniClass {
    pub name: String,
    pub weight: f64,
    pub cooperativeness: u8,
    pub demand: DemandKind,
    /// `outcomes[turn][action]`, turn 0-based.
    pub outcomes: Vec<Vec<MiniOutcome>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniMdp {
    pub horizon: usize,
    pub actions: Vec<ActionTemplate>,
    pub classes: Vec<MiniClass>,
    pub delta: f64,
}

/// Satisfaction 1..=5 mapped to [0, 1].
pub const MINI_SCALE: SatisfactionScale = SatisfactionScale { min: 1, max: 5 };

fn stop(satisfaction: u8) -> MiniOutcome {
    MiniOutcome {
        satisfaction,
        terminate: true,
    }
}

fn wait(satisfaction: u8) -> MiniOutcome {
    MiniOutcome {
        satisfaction,
        terminate: false,
    }
}

impl MiniMdp {
    pub fn validate(&self) -> Result<(), CmpoError> {
        let bad = |m: String| Err(CmpoError::InvalidConfig(m));
        if self.horizon == 0 || self.actions.is_empty() || self.classes.is_empty() {
            return bad("mini MDP needs a horizon, actions and classes".into());
        }
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| c.weight < 0.0) {
            return bad(format!("class weights must be non-negative and sum to 1, got {total}"));
        }
        for c in &self.classes {
            if c.outcomes.len() < self.horizon || c.outcomes.iter().any(|r| r.len() != self.actions.len()) {
                return bad(format!("class {} needs a {}×{} outcome table", c.name, self.horizon, self.actions.len()));
            }
            if !(1..=5).contains(&c.cooperativeness) {
                return bad(format!("class {} cooperativeness out of range", c.name));
            }
        }
        Ok(())
    }

    /// One turn, two actions: chat ends at satisfaction 3, a voucher ends at 5.
    pub fn single_turn(delta: f64) -> Self {
        MiniMdp {
            horizon: 1,
            actions: vec![ActionTemplate::appease(), ActionTemplate::offer_voucher()],
            classes: vec![MiniClass {
                name: "any".into(),
                weight: 1.0,
                cooperativeness: 3,
                demand: DemandKind::IncentiveOpen,
                outcomes: vec![vec![stop(3), stop(5)]],
            }],
            delta,
        }
    }

    /// Two-turn service episode over ask_info, offer_voucher and close.
    /// Asking keeps the user waiting at satisfaction 2; closing settles at 3;
    /// a voucher settles at the class's voucher satisfaction.
    fn two_turn(classes: &[(&str, f64, u8, DemandKind, u8)], delta: f64) -> Self {
        let classes = classes
            .iter()
            .map(|&(name, weight, coop, demand, voucher_sat)| MiniClass {
                name: name.into(),
                weight,
                cooperativeness: coop,
                demand,
                outcomes: vec![
                    vec![wait(2), stop(voucher_sat), stop(3)],
                    vec![stop(2), stop(voucher_sat), stop(3)],
                ],
            })
            .collect();
        MiniMdp {
            horizon: 2,
            actions: vec![ActionTemplate::ask_info(), ActionTemplate::offer_voucher(), ActionTemplate::close()],
            classes,
            delta,
        }
    }

    /// Half incentive-open users (a voucher delights them), half rigid users (a voucher angers them).
    pub fn incentive_vs_rigid(delta: f64) -> Self {
        Self::two_turn(
            &[
                ("incentive", 0.5, 4, DemandKind::IncentiveOpen, 5),
                ("rigid", 0.5, 4, DemandKind::RigidPursuit, 1),
            ],
            delta,
        )
    }

    /// Vouchers help both incentive-open classes, but the budget only covers one of them.
    pub fn binding_budget(delta: f64) -> Self {
        Self::two_turn(
            &[
                ("keen", 0.3, 5, DemandKind::IncentiveOpen, 5),
                ("lukewarm", 0.3, 1, DemandKind::IncentiveOpen, 4),
                ("rigid", 0.4, 3, DemandKind::RigidPursuit, 1),
            ],
            delta,
        )
    }

    pub fn scenario(&self, class: usize, seed: u64) -> Scenario {
        let c = &self.classes[class];
        let (solve_style, affect) = if c.cooperativeness == 1 {
            (SolveStyle::Adversarial, Affect::Volatile)
        } else {
            (SolveStyle::Collaborative, Affect::Stable)
        };
        Scenario {
            id: format!("mini-{class}-{seed:016x}"),
            difficulty: if matches!(c.demand, DemandKind::RigidPursuit | DemandKind::PreferenceLearning) {
                Difficulty::Hard
            } else {
                Difficulty::Easy
            },
            persona: IntrinsicPersona {
                cooperativeness: c.cooperativeness,
                comm_style: CommStyle::Neutral,
                disclosure: Disclosure::High,
                solve_style,
                affect,
                patience_budget: None,
            },
            demand: ExtrinsicDemand::of_kind(c.demand),
            signals: BusinessSignals {
                order_id: "ORD-MINI".into(),
                merchant: "Green Bowl".into(),
                food_items: vec!["dumplings".into()],
                issue_category: IssueCategory::Quality,
                order_value: 10.0,
                has_photo_evidence: true,
                prior_complaints_flag: false,
            },
            rng_seed: seed,
        }
    }

    pub fn env(&self) -> Env {
        Env::new(self.horizon)
    }

    pub fn simulator(&self) -> TableSimulator<'_> {
        TableSimulator { mdp: self }
    }
}

fn class_of(id: &str) -> Option<usize> {
    id.strip_prefix("mini-")?.split('-').next()?.parse().ok()
}

/// User simulator that looks replies up in a [`MiniMdp`]'s outcome tables.
#[derive(Debug, Clone, Copy)]
pub struct TableSimulator<'a> {
    mdp: &'a MiniMdp,
}

impl UserSimulator for TableSimulator<'_> {
    fn respond(&self, req: &SimRequest<'_>) -> Result<UserTurn, EnvError> {
        let class = class_of(&req.scenario.id)
            .and_then(|c| self.mdp.classes.get(c))
            .ok_or_else(|| EnvError::Simulator(format!("unknown mini scenario {}", req.scenario.id)))?;
        let Some(last) = req.moves.last() else {
            return Ok(UserTurn {
                utterance: "My order arrived wrong.".into(),
                satisfaction: 2,
                terminate: false,
                reason: TerminationReason::Ongoing,
            });
        };
        let action = self
            .mdp
            .actions
            .iter()
            .position(|a| a.response == last.response && a.decision == last.decision)
            .ok_or_else(|| EnvError::Simulator(format!("unrecognised agent move {:?}", last.response)))?;
        let turn = req.moves.len() - 1;
        let o = class
            .outcomes
            .get(turn)
            .map(|row| row[action])
            .ok_or_else(|| EnvError::Simulator(format!("no outcome row for turn {turn}")))?;
        let reason = match (o.terminate, o.satisfaction) {
            (false, _) => TerminationReason::Ongoing,
            (true, s) if s >= 3 => TerminationReason::Satisfied,
            (true, _) => TerminationReason::Frustrated,
        };
        Ok(UserTurn {
            utterance: format!("ok ({})", o.satisfaction),
            satisfaction: o.satisfaction,
            terminate: o.terminate,
            reason,
        })
    }
}

/// Draws mini scenarios by class weight.
#[derive(Debug, Clone)]
pub struct MiniSource {
    pub mdp: MiniMdp,
}

impl ScenarioSource for MiniSource {
    fn draw(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<crate::scenario::Scenario>> {
        let weights: Vec<f64> = self.mdp.classes.iter().map(|c| c.weight).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| CmpoError::InvalidConfig(format!("class weights: {e}")))?;
        Ok((0..count)
            .map(|_| {
                let c = dist.sample(rng);
                self.mdp.scenario(c, rng.gen())
            })
            .collect())
    }
}

/// A complete action sequence for one class.
#[derive(Debug, Clone)]
struct Plan {
    actions: Vec<usize>,
    features: Vec<usize>,
    reward: f64,
    cost: f64,
}

fn render(mdp: &MiniMdp, action: usize) -> crate::env::AgentAction {
    let t = &mdp.actions[action];
    crate::env::AgentAction {
        reasoning: String::new(),
        response: t.response.clone(),
        decision: t.decision,
    }
}

fn terminal_value(state: &EnvState) -> Result<f64> {
    Ok(outcome_from(state.satisfaction(), state.finish_valid, MINI_SCALE)?)
}

fn plans_for(mdp: &MiniMdp, class: usize) -> Result<Vec<Plan>> {
    let env = mdp.env();
    let sim = mdp.simulator();
    let root = env.reset(&mdp.scenario(class, 0), &sim, 0)?;
    let mut out = Vec::new();
    let mut stack = vec![(root, Vec::new(), Vec::new())];
    while let Some((state, actions, features)) = stack.pop() {
        if state.done {
            out.push(Plan {
                reward: terminal_value(&state)?,
                cost: f64::from(u8::from(state.voucher_issued)),
                actions,
                features,
            });
            continue;
        }
        let f = feature_index(&state.snapshot());
        for a in (0..mdp.actions.len()).rev() {
            let mut next = state.clone();
            env.step(&mut next, render(mdp, a), &sim)?;
            let mut acts = actions.clone();
            acts.push(a);
            let mut feats = features.clone();
            feats.push(f);
            stack.push((next, acts, feats));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub best_jr: f64,
    pub best_jc: f64,
    /// Index of the optimal joint plan in enumeration order.
    pub best_policy: u128,
    /// The optimal action sequence for each class.
    pub plans: Vec<Vec<usize>>,
    pub feasible: u128,
    pub enumerated: u128,
}

/// Exhaustively search deterministic policies (joint per-class plans that agree wherever
/// classes share a feature row) for the highest `J_R` with `J_C ≤ δ`.
pub fn brute_force_constrained_optimum(mdp: &MiniMdp, budget: u128) -> Result<BruteForceResult> {
    mdp.validate()?;
    let per_class: Vec<Vec<Plan>> = (0..mdp.classes.len()).map(|c| plans_for(mdp, c)).collect::<Result<_>>()?;
    let needed = per_class.iter().map(|p| p.len() as u128).product::<u128>();
    if needed > budget {
        return Err(CmpoError::TooLarge { needed, budget }.into());
    }
    let mut best: Option<BruteForceResult> = None;
    let mut feasible = 0u128;
    let mut digits = vec![0usize; per_class.len()];
    for id in 0..needed {
        let mut rem = id;
        for (d, plans) in digits.iter_mut().zip(&per_class) {
            *d = (rem % plans.len() as u128) as usize;
            rem /= plans.len() as u128;
        }
        let mut table = std::collections::BTreeMap::new();
        let consistent = digits.iter().zip(&per_class).all(|(&d, plans)| {
            let p = &plans[d];
            p.features
                .iter()
                .zip(&p.actions)
                .all(|(f, a)| *table.entry(*f).or_insert(*a) == *a)
        });
        if !consistent {
            continue;
        }
        let (mut jr, mut jc) = (0.0, 0.0);
        for ((&d, plans), class) in digits.iter().zip(&per_class).zip(&mdp.classes) {
            jr += class.weight * plans[d].reward;
            jc += class.weight * plans[d].cost;
        }
        if jc > mdp.delta + 1e-12 {
            continue;
        }
        feasible += 1;
        if best.as_ref().is_none_or(|b| jr > b.best_jr) {
            best = Some(BruteForceResult {
                best_jr: jr,
                best_jc: jc,
                best_policy: id,
                plans: digits.iter().zip(&per_class).map(|(&d, p)| p[d].actions.clone()).collect(),
                feasible: 0,
                enumerated: needed,
            });
        }
    }
    let mut best = best.ok_or_else(|| CmpoError::InvalidConfig("no deterministic policy meets the budget".into()))?;
    best.feasible = feasible;
    Ok(best)
}

/// Exact `(J_R, J_C)` of a stochastic tabular policy, by walking the whole trajectory tree.
pub fn exact_value(mdp: &MiniMdp, policy: &SoftmaxPolicy) -> Result<(f64, f64)> {
    mdp.validate()?;
    if policy.templates() != mdp.actions.as_slice() {
        return Err(CmpoError::ShapeMismatch("policy templates differ from the MDP's actions".into()).into());
    }
    let env = mdp.env();
    let sim = mdp.simulator();
    let (mut jr, mut jc) = (0.0, 0.0);
    for (c, class) in mdp.classes.iter().enumerate() {
        let root = env.reset(&mdp.scenario(c, 0), &sim, 0)?;
        let mut stack = vec![(root, 1.0)];
        while let Some((state, p)) = stack.pop() {
            if state.done {
                jr += class.weight * p * terminal_value(&state)?;
                jc += class.weight * p * f64::from(u8::from(state.voucher_issued));
                continue;
            }
            let probs = policy.probs(feature_index(&state.snapshot()));
            for (a, pa) in probs.iter().enumerate() {
                let mut next = state.clone();
                env.step(&mut next, render(mdp, a), &sim)?;
                stack.push((next, p * pa));
            }
        }
    }
    Ok((jr, jc))
}

/// Whether `policy` only issues vouchers through the dedicated template.
pub fn voucher_template(mdp: &MiniMdp) -> Option<usize> {
    mdp.actions.iter().position(|a| a.decision == Decision::Voucher)
}
