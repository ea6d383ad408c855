//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dialogue_cmdp::cmpo::RolloutGroup;
use dialogue_cmdp::env::{
    AgentPolicy, EnvError, EnvState, PolicyOutput, SimRequest, TerminationReason, UserSimulator, UserTurn,
};
use dialogue_cmdp::reward::RewardBreakdown;
use dialogue_cmdp::{AgentAction, Decision, Env, Scenario};

pub fn render(decision: Decision, response: &str) -> String {
    AgentAction {
        reasoning: "r".into(),
        response: response.into(),
        decision,
    }
    .render()
}

/// Always chats.
pub struct ChatOnly;

impl AgentPolicy for ChatOnly {
    fn act(&self, _state: &EnvState, _rng: &mut ChaCha8Rng) -> PolicyOutput {
        PolicyOutput {
            raw: render(Decision::Chat, "I see."),
            choice: None,
        }
    }
}

/// Never ends an episode on its own.
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

/// Picks uniformly among well-formed moves of every kind, vouchers included, and a few
/// malformed outputs.
pub struct RandomRaw;

const RAW_MOVES: &[&str] = &[
    "<think>a</think><response>Could you share a photo of the order?</response><action>chat</action>",
    "<think>a</think><response>I am sorry about this.</response><action>chat</action>",
    "<think>a</think><response>I've issued a voucher for you.</response><action>voucher</action>",
    "<think>a</think><response>We cannot refund this order.</response><action>chat</action>",
    "<think>a</think><response>Is there anything else I can help with?</response><action>chat</action>",
    "<response>no reasoning</response><action>chat</action>",
    "<think>a</think><response>bad value</response><action>refund</action>",
    "<action>chat</action><think>a</think><response>out of order</response>",
];

impl AgentPolicy for RandomRaw {
    fn act(&self, _state: &EnvState, rng: &mut ChaCha8Rng) -> PolicyOutput {
        // Malformed outputs are rarer so most episodes run long.
        let i = if rng.gen_bool(0.03) {
            rng.gen_range(5..RAW_MOVES.len())
        } else {
            rng.gen_range(0..5)
        };
        PolicyOutput {
            raw: RAW_MOVES[i].to_string(),
            choice: None,
        }
    }
}

/// A group with given outcomes and per-turn `(R_P, cost)` entries, built from real trajectories.
pub fn synthetic_group(scenario: &Scenario, spec: &[(f64, Vec<(f64, u8)>)]) -> RolloutGroup {
    let mut trajectories = Vec::new();
    let mut breakdowns = Vec::new();
    for (i, (outcome, turns)) in spec.iter().enumerate() {
        let traj = Env::new(turns.len())
            .rollout(scenario, &ChatOnly, &Endless, i as u64)
            .expect("chat-only rollout");
        assert_eq!(traj.turns.len(), turns.len());
        trajectories.push(traj);
        breakdowns.push(RewardBreakdown {
            outcome: *outcome,
            process: turns.iter().map(|t| t.0).collect(),
            cost: turns.iter().map(|t| t.1).collect(),
        });
    }
    RolloutGroup {
        scenario_id: scenario.id.clone(),
        trajectories,
        breakdowns,
    }
}
