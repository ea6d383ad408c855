//! Turn-level constrained dialogue environment.
//!
//! One episode is a complaint session: the simulated user opens, then each
//! agent turn is answered by the user simulator until the user terminates,
//! the agent issues an illegal second voucher, or `t_max` agent turns have
//! been taken.

mod simulator;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{DemandKind, Disclosure, Scenario};
use crate::seeding::derive_seed;

pub use simulator::{
    classify_response, scripted_user_step, AgentIntent, AgentMove, RemoteSimulator,
    ScriptedSimulator, SimRequest, UserSimulator, EVIDENCE_MARKER, OPENING_SATISFACTION,
};

/// Highest raw satisfaction a user can report.
pub const MAX_SATISFACTION: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Chat,
    Voucher,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Chat => "chat",
            Decision::Voucher => "voucher",
        }
    }
}

/// Composite agent output: reasoning, user-facing response, business decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub reasoning: String,
    pub response: String,
    pub decision: Decision,
}

impl AgentAction {
    pub fn render(&self) -> String {
        format!(
            "<think>{}</think><response>{}</response><action>{}</action>",
            self.reasoning,
            self.response,
            self.decision.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatErrorKind {
    MissingTag,
    BadActionValue,
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed agent output ({kind:?}): {detail}")]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub detail: String,
}

impl FormatError {
    fn new(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        FormatError {
            kind,
            detail: detail.into(),
        }
    }
}

const TAGS: [&str; 3] = ["think", "response", "action"];

fn find_segment(raw: &str, tag: &str) -> Option<(usize, usize, usize)> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)?;
    let body = start + open.len();
    let end = body + raw[body..].find(&close)?;
    Some((start, body, end))
}

/// Parse the three-tag agent format `<think>..</think><response>..</response><action>..</action>`.
pub fn parse_agent_output(raw: &str) -> Result<AgentAction, FormatError> {
    let mut segments = Vec::with_capacity(3);
    for tag in TAGS {
        match find_segment(raw, tag) {
            Some(seg) => segments.push(seg),
            None => {
                return Err(FormatError::new(
                    FormatErrorKind::MissingTag,
                    format!("no <{tag}>...</{tag}> segment"),
                ))
            }
        }
    }
    if !segments.windows(2).all(|w| w[0].2 < w[1].0) {
        return Err(FormatError::new(
            FormatErrorKind::OutOfOrder,
            "expected think, response, action in that order",
        ));
    }
    let text = |(_, body, end): (usize, usize, usize)| raw[body..end].trim().to_string();
    let action_value = text(segments[2]);
    let decision = match action_value.to_ascii_lowercase().as_str() {
        "chat" => Decision::Chat,
        "voucher" => Decision::Voucher,
        _ => {
            return Err(FormatError::new(
                FormatErrorKind::BadActionValue,
                format!("action value {action_value:?}"),
            ))
        }
    };
    Ok(AgentAction {
        reasoning: text(segments[0]),
        response: text(segments[1]),
        decision,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Satisfied,
    Frustrated,
    Timeout,
    Impasse,
    Ongoing,
}

impl TerminationReason {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "satisfied" => Self::Satisfied,
            "frustrated" => Self::Frustrated,
            "timeout" => Self::Timeout,
            "impasse" => Self::Impasse,
            "ongoing" => Self::Ongoing,
            _ => return None,
        })
    }
}

/// User reply plus metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTurn {
    pub utterance: String,
    pub satisfaction: u8,
    pub terminate: bool,
    pub reason: TerminationReason,
}

impl UserTurn {
    pub fn is_consistent(&self) -> bool {
        self.satisfaction <= MAX_SATISFACTION
            && (self.terminate == (self.reason != TerminationReason::Ongoing))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutstandingFlag {
    AwaitingEvidence,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub action: AgentAction,
    pub reply: UserTurn,
}

/// Live episode state. `turn_index` counts agent actions recorded so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub scenario: Scenario,
    pub opening: UserTurn,
    pub exchanges: Vec<Exchange>,
    pub turn_index: usize,
    pub voucher_issued: bool,
    pub done: bool,
    pub finish_valid: bool,
    pub flags: BTreeSet<OutstandingFlag>,
    pub sim_seed: u64,
}

impl EnvState {
    pub fn satisfaction(&self) -> u8 {
        self.last_reply().satisfaction
    }

    pub fn last_reply(&self) -> &UserTurn {
        self.exchanges
            .last()
            .map(|e| &e.reply)
            .unwrap_or(&self.opening)
    }

    pub fn evidence_gathered(&self) -> bool {
        !self.flags.contains(&OutstandingFlag::AwaitingEvidence)
    }

    pub fn agent_moves(&self) -> Vec<AgentMove> {
        self.exchanges
            .iter()
            .map(|e| AgentMove::from_action(&e.action))
            .collect()
    }

    /// Facts visible at the start of the next agent turn.
    pub fn snapshot(&self) -> TurnSnapshot {
        let previous = self.exchanges.last().map(|e| &e.action);
        TurnSnapshot {
            turn: self.turn_index + 1,
            evidence_gathered: self.evidence_gathered(),
            voucher_issued: self.voucher_issued,
            satisfaction: self.satisfaction(),
            escalated: self.flags.contains(&OutstandingFlag::Escalated),
            previous_response: previous.map(|a| a.response.clone()),
            previous_intent: previous.map(|a| classify_response(&a.response)),
            asked_after_evidence: self.asked_after_evidence(),
            acknowledged: self
                .exchanges
                .iter()
                .any(|e| classify_response(&e.action.response) == AgentIntent::Acknowledge),
            cooperativeness: self.scenario.persona.cooperativeness,
            disclosure: self.scenario.persona.disclosure,
            demand: self.scenario.demand.kind,
            has_photo_evidence: self.scenario.signals.has_photo_evidence,
        }
    }

    fn asked_after_evidence(&self) -> bool {
        // Evidence arrives in a reply; any later info request is redundant.
        let mut evidence = self.opening.utterance.contains(EVIDENCE_MARKER);
        let mut redundant = false;
        for e in &self.exchanges {
            if evidence && classify_response(&e.action.response) == AgentIntent::AskInfo {
                redundant = true;
            }
            evidence |= e.reply.utterance.contains(EVIDENCE_MARKER);
        }
        redundant
    }

    fn refresh_flags(&mut self, reply: &UserTurn) {
        if reply.utterance.contains(EVIDENCE_MARKER) {
            self.flags.remove(&OutstandingFlag::AwaitingEvidence);
        }
        if reply.satisfaction <= 1 {
            self.flags.insert(OutstandingFlag::Escalated);
        }
    }
}

/// Agent-turn state summary recorded with each turn and shown to judges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSnapshot {
    /// 1-based index of the agent turn this snapshot precedes.
    pub turn: usize,
    pub evidence_gathered: bool,
    pub voucher_issued: bool,
    pub satisfaction: u8,
    pub escalated: bool,
    pub previous_response: Option<String>,
    pub previous_intent: Option<AgentIntent>,
    pub asked_after_evidence: bool,
    pub acknowledged: bool,
    pub cooperativeness: u8,
    pub disclosure: Disclosure,
    pub demand: DemandKind,
    pub has_photo_evidence: bool,
}

/// Index of a tabular policy's feature row and action template, when the policy has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionChoice {
    pub feature: usize,
    pub template: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub snapshot: TurnSnapshot,
    pub action: AgentAction,
    pub reply: UserTurn,
    /// `R_P` for the turn, plus `R_O` on the final turn, once rewards are attached.
    pub reward: f64,
    /// 1 iff this turn issued the episode's (single) voucher.
    pub cost: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<ActionChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_error: Option<FormatErrorKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_id: String,
    pub sim_seed: u64,
    pub opening: UserTurn,
    pub turns: Vec<TurnRecord>,
    pub final_satisfaction: u8,
    pub finish_valid: bool,
    pub termination: TerminationReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn total_cost(&self) -> u32 {
        self.turns.iter().map(|t| u32::from(t.cost)).sum()
    }

    pub fn issued_voucher(&self) -> bool {
        self.total_cost() > 0
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already terminated")]
    EpisodeDone,
    #[error("user simulator failure: {0}")]
    Simulator(String),
}

/// Output of an agent policy for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub raw: String,
    pub choice: Option<ActionChoice>,
}

/// Anything that can act in the environment. Implementations must be pure given the rng.
pub trait AgentPolicy: Send + Sync {
    fn act(&self, state: &EnvState, rng: &mut ChaCha8Rng) -> PolicyOutput;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Env {
    pub t_max: usize,
}

impl Default for Env {
    fn default() -> Self {
        Env { t_max: 15 }
    }
}

impl Env {
    pub fn new(t_max: usize) -> Self {
        assert!(t_max >= 1, "t_max must be at least 1");
        Env { t_max }
    }

    pub fn reset(
        &self,
        scenario: &Scenario,
        simulator: &dyn UserSimulator,
        sim_seed: u64,
    ) -> Result<EnvState, EnvError> {
        let opening = simulator.respond(&SimRequest {
            scenario,
            moves: &[],
            seed: sim_seed,
        })?;
        let mut flags = BTreeSet::new();
        if !scenario.signals.has_photo_evidence {
            flags.insert(OutstandingFlag::AwaitingEvidence);
        }
        let mut state = EnvState {
            scenario: scenario.clone(),
            opening: opening.clone(),
            exchanges: Vec::new(),
            turn_index: 0,
            voucher_issued: false,
            done: false,
            finish_valid: true,
            flags,
            sim_seed,
        };
        state.refresh_flags(&opening);
        if opening.terminate {
            state.done = true;
        }
        Ok(state)
    }

    pub fn step(
        &self,
        state: &mut EnvState,
        action: AgentAction,
        simulator: &dyn UserSimulator,
    ) -> Result<UserTurn, EnvError> {
        if state.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.decision == Decision::Voucher && state.voucher_issued {
            let reply = UserTurn {
                utterance: String::new(),
                satisfaction: state.satisfaction(),
                terminate: true,
                reason: TerminationReason::Impasse,
            };
            state.exchanges.push(Exchange {
                action,
                reply: reply.clone(),
            });
            state.turn_index += 1;
            state.finish_valid = false;
            state.done = true;
            return Ok(reply);
        }
        if action.decision == Decision::Voucher {
            state.voucher_issued = true;
        }
        let mut moves = state.agent_moves();
        moves.push(AgentMove::from_action(&action));
        let mut reply = simulator.respond(&SimRequest {
            scenario: &state.scenario,
            moves: &moves,
            seed: state.sim_seed,
        })?;
        state.turn_index += 1;
        if !reply.terminate && state.turn_index >= self.t_max {
            reply.terminate = true;
            reply.reason = TerminationReason::Timeout;
        }
        state.refresh_flags(&reply);
        state.done = reply.terminate;
        state.exchanges.push(Exchange {
            action,
            reply: reply.clone(),
        });
        Ok(reply)
    }

    /// Run one episode to completion.
    pub fn rollout(
        &self,
        scenario: &Scenario,
        policy: &dyn AgentPolicy,
        simulator: &dyn UserSimulator,
        sim_seed: u64,
    ) -> Result<Trajectory, EnvError> {
        let mut state = self.reset(scenario, simulator, sim_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sim_seed, 0x706f_6c69_6379));
        let mut turns = Vec::new();
        while !state.done {
            let snapshot = state.snapshot();
            let out = policy.act(&state, &mut rng);
            match parse_agent_output(&out.raw) {
                Ok(action) => {
                    let granted = action.decision == Decision::Voucher && !state.voucher_issued;
                    let reply = self.step(&mut state, action.clone(), simulator)?;
                    turns.push(TurnRecord {
                        snapshot,
                        action,
                        reply,
                        reward: 0.0,
                        cost: u8::from(granted),
                        choice: out.choice,
                        format_error: None,
                    });
                }
                Err(err) => {
                    let reply = UserTurn {
                        utterance: String::new(),
                        satisfaction: 0,
                        terminate: true,
                        reason: TerminationReason::Impasse,
                    };
                    turns.push(TurnRecord {
                        snapshot,
                        action: AgentAction {
                            reasoning: String::new(),
                            response: out.raw,
                            decision: Decision::Chat,
                        },
                        reply,
                        reward: 0.0,
                        cost: 0,
                        choice: out.choice,
                        format_error: Some(err.kind),
                    });
                    state.finish_valid = false;
                    state.done = true;
                }
            }
        }
        let last = turns.last().map(|t| &t.reply).unwrap_or(&state.opening);
        Ok(Trajectory {
            scenario_id: scenario.id.clone(),
            sim_seed,
            opening: state.opening.clone(),
            final_satisfaction: last.satisfaction,
            termination: last.reason,
            finish_valid: state.finish_valid,
            turns,
        })
    }
}
