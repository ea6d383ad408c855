//! Shared unit-test fixtures.

use rand_chacha::ChaCha8Rng;

use crate::env::{AgentPolicy, EnvError, EnvState, PolicyOutput, SimRequest, TerminationReason, UserSimulator, UserTurn};
use crate::scenario::{
    Affect, BusinessSignals, CommStyle, DemandKind, Difficulty, Disclosure, ExtrinsicDemand,
    IntrinsicPersona, IssueCategory, Scenario, SolveStyle,
};

pub fn scenario(coop: u8, kind: DemandKind, disclosure: Disclosure, photo: bool) -> Scenario {
    let (solve_style, affect) = if coop <= 2 {
        (SolveStyle::Adversarial, Affect::Volatile)
    } else {
        (SolveStyle::Collaborative, Affect::Stable)
    };
    Scenario {
        id: format!("c{coop}-{kind}"),
        difficulty: Difficulty::Easy,
        persona: IntrinsicPersona {
            cooperativeness: coop,
            comm_style: CommStyle::Neutral,
            disclosure,
            solve_style,
            affect,
            patience_budget: None,
        },
        demand: ExtrinsicDemand::of_kind(kind),
        signals: BusinessSignals {
            order_id: "ORD-1".into(),
            merchant: "Golden Wok".into(),
            food_items: vec!["fried rice".into()],
            issue_category: IssueCategory::ColdFood,
            order_value: 20.0,
            has_photo_evidence: photo,
            prior_complaints_flag: false,
        },
        rng_seed: 11,
    }
}

/// Emits the i-th scripted output at turn i, repeating the last one afterwards.
pub struct FixedPolicy(Vec<String>);

impl FixedPolicy {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(outputs: I) -> Self {
        FixedPolicy(outputs.into_iter().map(Into::into).collect())
    }
}

impl AgentPolicy for FixedPolicy {
    fn act(&self, state: &EnvState, _rng: &mut ChaCha8Rng) -> PolicyOutput {
        let i = state.turn_index.min(self.0.len() - 1);
        PolicyOutput {
            raw: self.0[i].clone(),
            choice: None,
        }
    }
}

/// Simulator that never ends the episode on its own.
pub struct Endless;

impl UserSimulator for Endless {
    fn respond(&self, _req: &SimRequest<'_>) -> Result<UserTurn, EnvError> {
        Ok(UserTurn {
            utterance: "go on".into(),
            satisfaction: 3,
            terminate: false,
            reason: TerminationReason::Ongoing,
        })
    }
}

/// A group whose trajectories have the given lengths and reward breakdowns.
/// Each entry is `(R_O, [(R_P, cost) per turn])`.
pub fn synthetic_group(spec: &[(f64, Vec<(f64, u8)>)]) -> crate::cmpo::RolloutGroup {
    let s = scenario(3, DemandKind::IncentiveOpen, Disclosure::High, true);
    let chat = crate::env::AgentAction {
        reasoning: "r".into(),
        response: "ok".into(),
        decision: crate::env::Decision::Chat,
    }
    .render();
    let mut trajectories = Vec::new();
    let mut breakdowns = Vec::new();
    for (i, (outcome, turns)) in spec.iter().enumerate() {
        let traj = crate::env::Env::new(turns.len())
            .rollout(&s, &FixedPolicy::new([chat.clone()]), &Endless, i as u64)
            .unwrap();
        trajectories.push(traj);
        breakdowns.push(crate::reward::RewardBreakdown {
            outcome: *outcome,
            process: turns.iter().map(|t| t.0).collect(),
            cost: turns.iter().map(|t| t.1).collect(),
        });
    }
    crate::cmpo::RolloutGroup {
        scenario_id: s.id,
        trajectories,
        breakdowns,
    }
}
