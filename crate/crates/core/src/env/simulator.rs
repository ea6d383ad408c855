//! User simulators.
//!
//! [`ScriptedSimulator`] is a deterministic finite-state stand-in for an LLM
//! user. Its behaviour is fixed by these rules, replayed over the agent's
//! moves on every call:
//!
//! * R1 opening: a complaint templated from the issue category, satisfaction 2.
//!   The evidence marker is included when the order already carries a photo.
//! * R2 evidence: the user hands over evidence after 1/2/3 information
//!   requests for high/medium/low disclosure.
//! * R3 patience: every turn past `patience_budget` costs one satisfaction
//!   point; the user leaves frustrated at satisfaction 0 or two turns past
//!   the budget.
//! * R4 vouchers: IncentiveOpen and PreferenceLearning users accept and end
//!   satisfied at `clamp(s + 2)`. FeedbackOriented users who accept vouchers
//!   end satisfied at `clamp(s + 1)`.
//! * R5 rigid pursuit: a voucher is rejected (−1) and never satisfies.
//! * R6 feedback: a FeedbackOriented user ends satisfied once evidence is in,
//!   the agent has acknowledged the problem and is acknowledging or closing,
//!   and no redundant question was asked twice in a row.
//! * R7 negotiation: a PreferenceLearning user accepts a close once evidence
//!   is in and the problem was acknowledged.
//!
//! A first acknowledgment raises satisfaction by one for users who require it;
//! a refusal costs one point for volatile users; a second consecutive redundant
//! question costs one point.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentAction, Decision, EnvError, TerminationReason, UserTurn, MAX_SATISFACTION};
use crate::scenario::{
    Affect, BusinessSignals, CommStyle, DemandKind, ExtrinsicDemand, IntrinsicPersona,
    IssueCategory, Scenario,
};
use crate::seeding::derive_seed;

/// Substring that marks a user utterance as carrying evidence (photo, order details).
pub const EVIDENCE_MARKER: &str = "[photo attached]";
pub const OPENING_SATISFACTION: u8 = 2;

/// Coarse reading of an agent response, used by the scripted user and judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentIntent {
    AskInfo,
    Acknowledge,
    Refuse,
    Close,
    Other,
}

pub fn classify_response(text: &str) -> AgentIntent {
    let t = text.to_lowercase();
    let has = |keys: &[&str]| keys.iter().any(|k| t.contains(k));
    if has(&["anything else", "glad we could", "goodbye", "have a nice"]) {
        AgentIntent::Close
    } else if has(&["cannot", "can't", "unable", "not able"]) {
        AgentIntent::Refuse
    } else if t.contains('?') {
        AgentIntent::AskInfo
    } else if has(&["sorry", "apolog", "understand"]) {
        AgentIntent::Acknowledge
    } else {
        AgentIntent::Other
    }
}

/// What the user simulator sees of one agent turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentMove {
    pub intent: AgentIntent,
    pub decision: Decision,
    pub response: String,
}

impl AgentMove {
    pub fn from_action(a: &AgentAction) -> Self {
        AgentMove {
            intent: classify_response(&a.response),
            decision: a.decision,
            response: a.response.clone(),
        }
    }
}

pub struct SimRequest<'a> {
    pub scenario: &'a Scenario,
    /// Agent moves so far, oldest first; empty for the opening turn.
    pub moves: &'a [AgentMove],
    pub seed: u64,
}

/// The user side of the interaction. Must be safe for concurrent independent calls.
pub trait UserSimulator: Send + Sync {
    fn respond(&self, req: &SimRequest<'_>) -> Result<UserTurn, EnvError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedSimulator;

impl UserSimulator for ScriptedSimulator {
    fn respond(&self, req: &SimRequest<'_>) -> Result<UserTurn, EnvError> {
        let s = req.scenario;
        Ok(scripted_user_step(
            &s.persona,
            &s.demand,
            &s.signals,
            req.moves,
            req.seed,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cue {
    Opening,
    ProvideEvidence,
    StillWaiting,
    Redundant,
    Thanks,
    RejectVoucher,
    Accept,
    Annoyed,
    Frustrated,
}

struct UserFsm {
    sat: i32,
    asks: u32,
    evidence: bool,
    acknowledged: bool,
    redundant_streak: u32,
}

/// Deterministic scripted user reply to the latest agent move (or the opening when `history` is empty).
pub fn scripted_user_step(
    persona: &IntrinsicPersona,
    demand: &ExtrinsicDemand,
    signals: &BusinessSignals,
    history: &[AgentMove],
    seed: u64,
) -> UserTurn {
    let mut fsm = UserFsm {
        sat: i32::from(OPENING_SATISFACTION),
        asks: 0,
        evidence: signals.has_photo_evidence,
        acknowledged: false,
        redundant_streak: 0,
    };
    let mut outcome = (Cue::Opening, TerminationReason::Ongoing);
    let patience = persona.patience() as usize;
    for (i, mv) in history.iter().enumerate() {
        let t = i + 1;
        outcome = fsm.advance(persona, demand, mv, t, patience);
        if outcome.1 != TerminationReason::Ongoing {
            break;
        }
    }
    let (cue, reason) = outcome;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, history.len() as u64));
    let mut utterance = phrase(cue, persona, signals, &mut rng);
    let with_evidence = match cue {
        Cue::Opening => signals.has_photo_evidence,
        Cue::ProvideEvidence => true,
        _ => false,
    };
    if with_evidence {
        utterance.push(' ');
        utterance.push_str(EVIDENCE_MARKER);
    }
    UserTurn {
        utterance,
        satisfaction: fsm.sat.clamp(0, i32::from(MAX_SATISFACTION)) as u8,
        terminate: reason != TerminationReason::Ongoing,
        reason,
    }
}

impl UserFsm {
    fn bump(&mut self, delta: i32) {
        self.sat = (self.sat + delta).clamp(0, i32::from(MAX_SATISFACTION));
    }

    fn advance(
        &mut self,
        persona: &IntrinsicPersona,
        demand: &ExtrinsicDemand,
        mv: &AgentMove,
        t: usize,
        patience: usize,
    ) -> (Cue, TerminationReason) {
        if t > patience {
            self.bump(-1);
        }
        let mut cue = Cue::StillWaiting;
        if mv.decision == Decision::Voucher {
            self.redundant_streak = 0;
            if demand.accepts_voucher && demand.kind != DemandKind::RigidPursuit {
                let gain = if demand.kind == DemandKind::FeedbackOriented { 1 } else { 2 };
                self.bump(gain);
                return (Cue::Accept, TerminationReason::Satisfied);
            }
            self.bump(-1);
            cue = Cue::RejectVoucher;
        } else {
            match mv.intent {
                AgentIntent::AskInfo if !self.evidence => {
                    self.redundant_streak = 0;
                    self.asks += 1;
                    if self.asks >= persona.disclosure.asks_required() {
                        self.evidence = true;
                        cue = Cue::ProvideEvidence;
                    }
                }
                AgentIntent::AskInfo => {
                    self.redundant_streak += 1;
                    if self.redundant_streak >= 2 {
                        self.bump(-1);
                    }
                    cue = Cue::Redundant;
                }
                AgentIntent::Acknowledge => {
                    self.redundant_streak = 0;
                    if !self.acknowledged {
                        self.acknowledged = true;
                        if demand.requires_acknowledgment {
                            self.bump(1);
                        }
                        cue = Cue::Thanks;
                    }
                }
                AgentIntent::Refuse => {
                    self.redundant_streak = 0;
                    if persona.affect == Affect::Volatile {
                        self.bump(-1);
                    }
                    cue = Cue::Annoyed;
                }
                AgentIntent::Close | AgentIntent::Other => {
                    self.redundant_streak = 0;
                }
            }
            let resolved = self.evidence && self.acknowledged;
            let satisfied = match demand.kind {
                DemandKind::FeedbackOriented => {
                    resolved && matches!(mv.intent, AgentIntent::Acknowledge | AgentIntent::Close)
                }
                DemandKind::PreferenceLearning => resolved && mv.intent == AgentIntent::Close,
                _ => false,
            };
            if satisfied {
                return (Cue::Accept, TerminationReason::Satisfied);
            }
        }
        if self.sat == 0 || t >= patience + 2 {
            return (Cue::Frustrated, TerminationReason::Frustrated);
        }
        (cue, TerminationReason::Ongoing)
    }
}

fn issue_phrase(issue: IssueCategory, item: &str) -> String {
    match issue {
        IssueCategory::ColdFood => format!("My {item} arrived completely cold."),
        IssueCategory::Quality => format!("The {item} tastes off, the quality is terrible."),
        IssueCategory::MissingItem => format!("My {item} is missing from the bag."),
        IssueCategory::WrongItem => format!("I got the wrong order, this is not my {item}."),
        IssueCategory::Delay => format!("My {item} came over an hour late."),
    }
}

fn phrase(
    cue: Cue,
    persona: &IntrinsicPersona,
    signals: &BusinessSignals,
    rng: &mut ChaCha8Rng,
) -> String {
    let item = signals.food_items.first().map(String::as_str).unwrap_or("order");
    let pick = |rng: &mut ChaCha8Rng, opts: &[&str]| -> String {
        opts.choose(rng).copied().unwrap_or_default().to_string()
    };
    let core = match cue {
        Cue::Opening => {
            let base = issue_phrase(signals.issue_category, item);
            let tone = match persona.cooperativeness {
                1 => pick(rng, &["Fix this now or I'm reporting you.", "This is unacceptable."]),
                2 => pick(rng, &["I'm really annoyed.", "Honestly, again?"]),
                3 => pick(rng, &["Please look into it.", "What can you do?"]),
                _ => pick(rng, &["Could you help me with this?", "Thanks in advance for helping."]),
            };
            format!("{base} {tone}")
        }
        Cue::ProvideEvidence => format!(
            "Order {} from {}, here is what it looked like.",
            signals.order_id, signals.merchant
        ),
        Cue::StillWaiting => pick(rng, &["So what now?", "I'm still waiting.", "And?"]),
        Cue::Redundant => pick(rng, &["I already told you that.", "You asked me that already."]),
        Cue::Thanks => pick(rng, &["Okay, thanks for listening.", "At least you get it."]),
        Cue::RejectVoucher => pick(rng, &["I don't want a coupon, I want my money back.", "A voucher? No. Refund me."]),
        Cue::Accept => pick(rng, &["Alright, that works for me.", "Fine, thank you."]),
        Cue::Annoyed => pick(rng, &["That's not good enough.", "Seriously?"]),
        Cue::Frustrated => pick(rng, &["Forget it, I'm done.", "I'm escalating this."]),
    };
    match persona.comm_style {
        CommStyle::Verbose if cue != Cue::Opening => format!("{core} I expected better from you."),
        _ => core,
    }
}

#[derive(Debug, Serialize)]
struct RemoteHistoryEntry<'a> {
    role: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    action: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct RemoteSimRequest<'a> {
    persona: &'a IntrinsicPersona,
    demand: &'a ExtrinsicDemand,
    signals: &'a BusinessSignals,
    history: Vec<RemoteHistoryEntry<'a>>,
}

#[derive(Debug, Deserialize)]
struct RemoteSimReply {
    utterance: String,
    satisfaction: i64,
    terminate: bool,
    reason: String,
}

/// HTTP user simulator: `POST {base_url}/simulate`.
///
/// The request history only carries agent turns (with their `action`) because the
/// remote side owns its own replies; callers that need the full transcript should
/// keep it server-side.
#[derive(Debug, Clone)]
pub struct RemoteSimulator {
    base_url: String,
    timeout: Duration,
    retries: u32,
}

impl RemoteSimulator {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        RemoteSimulator {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
            retries,
        }
    }

    fn call(&self, body: &RemoteSimRequest<'_>) -> Result<UserTurn, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&format!("{}/simulate", self.base_url))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let reply: RemoteSimReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("malformed reply: {e}"))?;
        let reason = TerminationReason::parse(&reply.reason)
            .ok_or_else(|| format!("unknown reason {:?}", reply.reason))?;
        if !(0..=i64::from(MAX_SATISFACTION)).contains(&reply.satisfaction) {
            return Err(format!("satisfaction {} outside 0..=5", reply.satisfaction));
        }
        let turn = UserTurn {
            utterance: reply.utterance,
            satisfaction: reply.satisfaction as u8,
            terminate: reply.terminate,
            reason,
        };
        if !turn.is_consistent() {
            return Err("terminate flag disagrees with reason".into());
        }
        Ok(turn)
    }
}

impl UserSimulator for RemoteSimulator {
    fn respond(&self, req: &SimRequest<'_>) -> Result<UserTurn, EnvError> {
        let history = req
            .moves
            .iter()
            .map(|m| RemoteHistoryEntry {
                role: "agent",
                text: &m.response,
                action: Some(m.decision.as_str()),
            })
            .collect();
        let body = RemoteSimRequest {
            persona: &req.scenario.persona,
            demand: &req.scenario.demand,
            signals: &req.scenario.signals,
            history,
        };
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.call(&body) {
                Ok(turn) => return Ok(turn),
                Err(e) => last = e,
            }
        }
        Err(EnvError::Simulator(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Disclosure, SolveStyle};

    fn persona(coop: u8, disclosure: Disclosure) -> IntrinsicPersona {
        IntrinsicPersona {
            cooperativeness: coop,
            comm_style: CommStyle::Neutral,
            disclosure,
            solve_style: if coop == 1 { SolveStyle::Adversarial } else { SolveStyle::Passive },
            affect: if coop <= 2 { Affect::Volatile } else { Affect::Stable },
            patience_budget: None,
        }
    }

    fn signals(photo: bool) -> BusinessSignals {
        BusinessSignals {
            order_id: "ORD-42".into(),
            merchant: "Sushi Lane".into(),
            food_items: vec!["miso soup".into()],
            issue_category: IssueCategory::ColdFood,
            order_value: 12.5,
            has_photo_evidence: photo,
            prior_complaints_flag: false,
        }
    }

    fn mv(text: &str) -> AgentMove {
        AgentMove {
            intent: classify_response(text),
            decision: Decision::Chat,
            response: text.into(),
        }
    }

    #[test]
    fn classifier_reads_templates() {
        assert_eq!(classify_response("Could you share a photo?"), AgentIntent::AskInfo);
        assert_eq!(classify_response("I'm so sorry about this."), AgentIntent::Acknowledge);
        assert_eq!(classify_response("We cannot refund this."), AgentIntent::Refuse);
        assert_eq!(classify_response("Is there anything else I can help with?"), AgentIntent::Close);
        assert_eq!(classify_response("Okay."), AgentIntent::Other);
    }

    #[test]
    fn empty_history_is_opening() {
        let p = persona(3, Disclosure::Medium);
        let d = ExtrinsicDemand::of_kind(DemandKind::IncentiveOpen);
        let t = scripted_user_step(&p, &d, &signals(false), &[], 7);
        assert_eq!(t.satisfaction, OPENING_SATISFACTION);
        assert!(!t.terminate);
        assert!(t.utterance.contains("cold"));
        assert!(!t.utterance.contains(EVIDENCE_MARKER));
    }

    #[test]
    fn high_disclosure_hands_over_evidence_on_first_ask() {
        let p = persona(4, Disclosure::High);
        let d = ExtrinsicDemand::of_kind(DemandKind::RigidPursuit);
        let t = scripted_user_step(&p, &d, &signals(false), &[mv("Could you share a photo?")], 7);
        assert!(t.utterance.contains(EVIDENCE_MARKER));
        assert_eq!(t.satisfaction, OPENING_SATISFACTION);
        assert!(!t.terminate);
    }

    #[test]
    fn low_disclosure_needs_three_asks() {
        let p = persona(3, Disclosure::Low);
        let d = ExtrinsicDemand::of_kind(DemandKind::RigidPursuit);
        let ask = mv("Could you share a photo?");
        let h: Vec<_> = std::iter::repeat(ask).take(3).collect();
        for n in 1..3 {
            assert!(!scripted_user_step(&p, &d, &signals(false), &h[..n], 1).utterance.contains(EVIDENCE_MARKER));
        }
        assert!(scripted_user_step(&p, &d, &signals(false), &h, 1).utterance.contains(EVIDENCE_MARKER));
    }

    #[test]
    fn patience_exhaustion_trace() {
        // coop 2 => patience 4; turns 5 and 6 each cost one point; 2 -> 0 at turn 6.
        let p = persona(2, Disclosure::Medium);
        assert_eq!(p.patience(), 4);
        let d = ExtrinsicDemand::of_kind(DemandKind::RigidPursuit);
        let h: Vec<_> = std::iter::repeat(mv("Okay.")).take(6).collect();
        for n in 1..=4 {
            let t = scripted_user_step(&p, &d, &signals(false), &h[..n], 1);
            assert_eq!(t.satisfaction, 2);
            assert!(!t.terminate);
        }
        let t5 = scripted_user_step(&p, &d, &signals(false), &h[..5], 1);
        assert_eq!((t5.satisfaction, t5.terminate), (1, false));
        let t6 = scripted_user_step(&p, &d, &signals(false), &h, 1);
        assert_eq!(t6.satisfaction, 0);
        assert!(t6.terminate);
        assert_eq!(t6.reason, TerminationReason::Frustrated);
    }

    #[test]
    fn feedback_user_satisfied_by_acknowledgment() {
        let p = persona(4, Disclosure::High);
        let d = ExtrinsicDemand::of_kind(DemandKind::FeedbackOriented);
        let h = [mv("Could you share a photo?"), mv("I'm so sorry, I understand.")];
        let t = scripted_user_step(&p, &d, &signals(false), &h, 1);
        assert_eq!(t.reason, TerminationReason::Satisfied);
        assert_eq!(t.satisfaction, 3);
    }

    #[test]
    fn preference_learner_negotiates() {
        let p = persona(4, Disclosure::High);
        let d = ExtrinsicDemand::of_kind(DemandKind::PreferenceLearning);
        let h = [
            mv("I'm so sorry, I understand."),
            mv("Is there anything else I can help with?"),
        ];
        let t = scripted_user_step(&p, &d, &signals(true), &h, 1);
        assert_eq!(t.reason, TerminationReason::Satisfied);
        assert_eq!(t.satisfaction, 3);
    }

    #[test]
    fn replies_depend_only_on_inputs() {
        let p = persona(5, Disclosure::High);
        let d = ExtrinsicDemand::of_kind(DemandKind::IncentiveOpen);
        let h = [mv("Okay.")];
        assert_eq!(
            scripted_user_step(&p, &d, &signals(false), &h, 99),
            scripted_user_step(&p, &d, &signals(false), &h, 99)
        );
    }
}
