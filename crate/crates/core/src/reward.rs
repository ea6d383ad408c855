//! Reward components: session outcome utility, turn-level principle credit and
//! the per-turn voucher cost indicator.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{AgentAction, AgentIntent, Decision, Trajectory, TurnSnapshot};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid satisfaction scale: max {max} must exceed min {min}")]
    Scale { min: u8, max: u8 },
    #[error("judge failure: {0}")]
    Judge(String),
    #[error("judge returned {value} for principle {principle}; scores must be 0, 0.5 or 1")]
    ScoreDomain { principle: String, value: f64 },
    #[error("expected {expected} principle scores, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("invalid principle set: {0}")]
    InvalidPrinciples(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principle {
    pub id: String,
    pub description: String,
}

/// Evaluation principles with normalized non-negative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipleSet {
    principles: Vec<Principle>,
    weights: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrincipleRecord {
    id: String,
    description: String,
    weight: f64,
}

impl PrincipleSet {
    /// Build a set, rescaling weights to sum to one (with a warning when they did not).
    pub fn new(principles: Vec<Principle>, weights: Vec<f64>) -> Result<Self, RewardError> {
        if principles.is_empty() {
            return Err(RewardError::InvalidPrinciples("at least one principle required".into()));
        }
        if principles.len() != weights.len() {
            return Err(RewardError::Arity {
                expected: principles.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::InvalidPrinciples("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(RewardError::InvalidPrinciples("weights sum to zero".into()));
        }
        let weights = if (total - 1.0).abs() > 1e-12 {
            log::warn!("principle weights sum to {total}; rescaling to 1");
            weights.iter().map(|w| w / total).collect()
        } else {
            weights
        };
        Ok(PrincipleSet { principles, weights })
    }

    /// Persona, stage, general-quality and scenario principles at 0.25 each.
    pub fn reference() -> Self {
        let p = |id: &str, d: &str| Principle {
            id: id.into(),
            description: d.into(),
        };
        Self::new(
            vec![
                p("persona", "Strategy fits the user's cooperativeness profile"),
                p("stage", "Response matches the dialogue stage: gather, judge, then resolve"),
                p("general", "Concise, non-repetitive, factual"),
                p("scenario", "Compensation only after sufficient evidence and at most once"),
            ],
            vec![0.25; 4],
        )
        .expect("reference principles are valid")
    }

    pub fn from_json(text: &str) -> Result<Self, RewardError> {
        let records: Vec<PrincipleRecord> =
            serde_json::from_str(text).map_err(|e| RewardError::InvalidPrinciples(e.to_string()))?;
        let (principles, weights) = records
            .into_iter()
            .map(|r| {
                (
                    Principle {
                        id: r.id,
                        description: r.description,
                    },
                    r.weight,
                )
            })
            .unzip();
        Self::new(principles, weights)
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RewardError::InvalidPrinciples(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn principles(&self) -> &[Principle] {
        &self.principles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.principles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.principles.is_empty()
    }
}

/// Per-principle scores for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipleScoreRow {
    pub turn_index: usize,
    pub scores: Vec<f64>,
    pub rationale: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub outcome: f64,
    pub process: Vec<f64>,
    pub cost: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatisfactionScale {
    pub min: u8,
    pub max: u8,
}

impl Default for SatisfactionScale {
    fn default() -> Self {
        SatisfactionScale { min: 0, max: 5 }
    }
}

/// `(s - min) / (max - min)` for a valid session, 0 when the session failed the format gate.
/// Satisfaction below `min` is clamped to `min`.
pub fn outcome_utility(traj: &Trajectory, scale: SatisfactionScale) -> Result<f64, RewardError> {
    outcome_from(traj.final_satisfaction, traj.finish_valid, scale)
}

pub fn outcome_from(satisfaction: u8, finish_valid: bool, scale: SatisfactionScale) -> Result<f64, RewardError> {
    if scale.max <= scale.min {
        return Err(RewardError::Scale {
            min: scale.min,
            max: scale.max,
        });
    }
    if !finish_valid {
        return Ok(0.0);
    }
    let s = satisfaction.clamp(scale.min, scale.max);
    Ok(f64::from(s - scale.min) / f64::from(scale.max - scale.min))
}

/// `Σ w_j · S_j`.
pub fn process_reward(row: &PrincipleScoreRow, principles: &PrincipleSet) -> Result<f64, RewardError> {
    if row.scores.len() != principles.len() {
        return Err(RewardError::Arity {
            expected: principles.len(),
            got: row.scores.len(),
        });
    }
    Ok(row
        .scores
        .iter()
        .zip(principles.weights())
        .map(|(s, w)| s * w)
        .sum())
}

pub fn cost_indicator(traj: &Trajectory) -> Vec<u8> {
    traj.turns.iter().map(|t| t.cost).collect()
}

fn is_valid_score(v: f64) -> bool {
    v == 0.0 || v == 0.5 || v == 1.0
}

/// A turn-level auditor scoring one action against one principle.
pub trait TurnJudge: Send + Sync {
    fn judge(
        &self,
        snapshot: &TurnSnapshot,
        action: &AgentAction,
        principle: &Principle,
    ) -> Result<(f64, Option<String>), RewardError>;
}

/// Score a turn against every principle. Out-of-domain scores are rejected, never rounded.
pub fn score_turn(
    snapshot: &TurnSnapshot,
    action: &AgentAction,
    principles: &PrincipleSet,
    judge: &dyn TurnJudge,
) -> Result<PrincipleScoreRow, RewardError> {
    let mut scores = Vec::with_capacity(principles.len());
    let mut rationale = Vec::with_capacity(principles.len());
    for p in principles.principles() {
        let (score, why) = judge.judge(snapshot, action, p)?;
        if !is_valid_score(score) {
            return Err(RewardError::ScoreDomain {
                principle: p.id.clone(),
                value: score,
            });
        }
        scores.push(score);
        rationale.push(why);
    }
    Ok(PrincipleScoreRow {
        turn_index: snapshot.turn,
        scores,
        rationale,
    })
}

/// Deterministic rubric approximating the persona, stage, general and scenario principles
/// with predicates over facts the environment records.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedJudge;

fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?'])
        .filter(|s| !s.trim().is_empty())
        .count()
}

impl ScriptedJudge {
    fn persona(s: &TurnSnapshot, intent: AgentIntent, decision: Decision) -> f64 {
        let ev = s.evidence_gathered;
        if decision == Decision::Voucher {
            // A coupon for someone who has rejected alternatives is appeasement.
            if s.demand == crate::scenario::DemandKind::RigidPursuit {
                return 0.0;
            }
            return match (s.cooperativeness, ev) {
                (_, true) => 1.0,
                (1..=2, false) => 0.0,
                _ => 0.5,
            };
        }
        match s.cooperativeness {
            1..=2 => match intent {
                AgentIntent::AskInfo if ev => 0.0,
                AgentIntent::AskInfo => 1.0,
                AgentIntent::Refuse if s.demand == crate::scenario::DemandKind::RigidPursuit => 1.0,
                _ => 0.5,
            },
            3 => match intent {
                AgentIntent::Refuse => 0.5,
                AgentIntent::AskInfo if ev => 0.5,
                _ => 1.0,
            },
            _ => match intent {
                AgentIntent::Acknowledge => 1.0,
                AgentIntent::AskInfo if !ev => 1.0,
                AgentIntent::Close if s.acknowledged => 1.0,
                AgentIntent::Refuse => 0.0,
                _ => 0.5,
            },
        }
    }

    fn stage(s: &TurnSnapshot, intent: AgentIntent, decision: Decision) -> f64 {
        if decision == Decision::Voucher {
            // Compensating past an unaddressed refund demand skips the rationality check.
            let ignores_demand = s.demand == crate::scenario::DemandKind::RigidPursuit;
            return if s.evidence_gathered && !ignores_demand { 1.0 } else { 0.0 };
        }
        let repeated = s.previous_intent == Some(intent);
        if !s.evidence_gathered {
            return match intent {
                AgentIntent::AskInfo => 1.0,
                _ => 0.5,
            };
        }
        match intent {
            AgentIntent::AskInfo => 0.0,
            AgentIntent::Acknowledge if repeated || s.acknowledged => 0.0,
            AgentIntent::Acknowledge => 1.0,
            AgentIntent::Close if s.acknowledged => 1.0,
            _ => 0.5,
        }
    }

    fn general(s: &TurnSnapshot, action: &AgentAction) -> f64 {
        if s.previous_response.as_deref() == Some(action.response.as_str()) {
            return 0.0;
        }
        if sentence_count(&action.response) > 2 {
            return 0.0;
        }
        1.0
    }

    fn scenario(s: &TurnSnapshot, intent: AgentIntent, decision: Decision) -> f64 {
        if decision == Decision::Voucher {
            if s.voucher_issued || !(s.evidence_gathered || s.has_photo_evidence) {
                return 0.0;
            }
            return 1.0;
        }
        if intent == AgentIntent::Acknowledge && !s.evidence_gathered {
            return 0.5;
        }
        1.0
    }
}

impl TurnJudge for ScriptedJudge {
    fn judge(
        &self,
        snapshot: &TurnSnapshot,
        action: &AgentAction,
        principle: &Principle,
    ) -> Result<(f64, Option<String>), RewardError> {
        let intent = crate::env::classify_response(&action.response);
        let d = action.decision;
        let score = match principle.id.as_str() {
            "persona" => Self::persona(snapshot, intent, d),
            "stage" => Self::stage(snapshot, intent, d),
            "general" => Self::general(snapshot, action),
            "scenario" => Self::scenario(snapshot, intent, d),
            other => {
                return Err(RewardError::Judge(format!(
                    "scripted judge has no rubric for principle {other:?}"
                )))
            }
        };
        Ok((score, None))
    }
}

#[derive(Debug, Serialize)]
struct RemoteScoreRequest<'a> {
    state_summary: &'a TurnSnapshot,
    action: &'a AgentAction,
    principle_id: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteScoreReply {
    score: f64,
    #[serde(default)]
    rationale: Option<String>,
}

/// HTTP judge: `POST {base_url}/score`.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    base_url: String,
    timeout: Duration,
    retries: u32,
}

impl RemoteJudge {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        RemoteJudge {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
            retries,
        }
    }

    fn call(&self, body: &RemoteScoreRequest<'_>) -> Result<RemoteScoreReply, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        agent
            .post(&format!("{}/score", self.base_url))
            .send_json(body)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| format!("malformed reply: {e}"))
    }
}

impl TurnJudge for RemoteJudge {
    fn judge(
        &self,
        snapshot: &TurnSnapshot,
        action: &AgentAction,
        principle: &Principle,
    ) -> Result<(f64, Option<String>), RewardError> {
        let body = RemoteScoreRequest {
            state_summary: snapshot,
            action,
            principle_id: &principle.id,
        };
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.call(&body) {
                Ok(r) => return Ok((r.score, r.rationale)),
                Err(e) => last = e,
            }
        }
        Err(RewardError::Judge(last))
    }
}

/// Compute the reward breakdown for a finished trajectory and write per-turn rewards into it.
///
/// With `principles = None` the process term is zero on every turn. Turns that failed
/// the format gate are scored 0 without consulting the judge.
pub fn score_trajectory(
    traj: &mut Trajectory,
    principles: Option<&PrincipleSet>,
    judge: &dyn TurnJudge,
    scale: SatisfactionScale,
) -> Result<RewardBreakdown, RewardError> {
    let outcome = outcome_utility(traj, scale)?;
    let mut process = Vec::with_capacity(traj.turns.len());
    for turn in &traj.turns {
        let r = match principles {
            Some(ps) if turn.format_error.is_none() => {
                process_reward(&score_turn(&turn.snapshot, &turn.action, ps, judge)?, ps)?
            }
            _ => 0.0,
        };
        process.push(r);
    }
    let cost = cost_indicator(traj);
    let last = traj.turns.len().saturating_sub(1);
    for (t, turn) in traj.turns.iter_mut().enumerate() {
        turn.reward = process[t] + if t == last { outcome } else { 0.0 };
    }
    Ok(RewardBreakdown {
        outcome,
        process,
        cost,
    })
}
