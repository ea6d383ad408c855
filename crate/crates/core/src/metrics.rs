//! Evaluation metrics: satisfaction, finish rate, voucher rate, rubric scores, and λ dynamics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmpo::ScenarioSource;
use crate::env::{AgentIntent, AgentPolicy, Decision, Env, TerminationReason, Trajectory, UserSimulator, MAX_SATISFACTION};
use crate::error::Result;
use crate::scenario::Scenario;
use crate::seeding::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("rubric score {value} at dimension {index} outside [0, {max}]")]
    Range { index: usize, value: f64, max: f64 },
    #[error("rubric expects {expected} dimensions, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("log needs at least 2 steps, got {0}")]
    ShortLog(usize),
    #[error("invalid evaluation spec: {0}")]
    InvalidSpec(String),
}

/// Raw 0–5 satisfaction on the 1–5 reporting scale.
pub fn satisfaction_1_to_5(raw: u8) -> f64 {
    1.0 + 4.0 * f64::from(raw.min(MAX_SATISFACTION)) / f64::from(MAX_SATISFACTION)
}

/// Per-dimension ceilings of a rubric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub max_per_dim: Vec<f64>,
}

impl Rubric {
    pub fn uniform(dims: usize, max: f64) -> Self {
        Rubric {
            max_per_dim: vec![max; dims],
        }
    }

    /// Seven dimensions of two 0–2 subitems each.
    pub fn communication() -> Self {
        Self::uniform(7, 4.0)
    }

    /// Information gathering, decision soundness, compliance.
    pub fn logic() -> Self {
        Rubric {
            max_per_dim: vec![6.0, 5.0, 1.0],
        }
    }

    pub fn ceiling(&self) -> f64 {
        self.max_per_dim.iter().sum()
    }
}

/// Plain sum of bounded dimension scores. Half-point scores are summed exactly.
pub fn rubric_aggregate(scores: &[f64], rubric: &Rubric) -> Result<f64, MetricsError> {
    if scores.len() != rubric.max_per_dim.len() {
        return Err(MetricsError::Arity {
            expected: rubric.max_per_dim.len(),
            got: scores.len(),
        });
    }
    for (index, (&value, &max)) in scores.iter().zip(&rubric.max_per_dim).enumerate() {
        if !(0.0..=max).contains(&value) {
            return Err(MetricsError::Range { index, value, max });
        }
    }
    let halves: Option<i64> = scores
        .iter()
        .map(|s| {
            let h = s * 2.0;
            (h.fract() == 0.0).then_some(h as i64)
        })
        .sum();
    Ok(match halves {
        Some(h) => h as f64 / 2.0,
        None => scores.iter().sum(),
    })
}

/// Per-dimension rubric scores for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricScores {
    pub comm: Vec<f64>,
    pub logic: Vec<f64>,
}

/// Session-level quality auditor.
pub trait RubricJudge: Send + Sync {
    fn score(&self, scenario: &Scenario, traj: &Trajectory) -> Result<RubricScores>;
}

/// Deterministic rubric over facts recorded in the trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedRubricJudge;

fn grade(ok: bool, partial: bool) -> f64 {
    if ok {
        2.0
    } else if partial {
        1.0
    } else {
        0.0
    }
}

impl RubricJudge for ScriptedRubricJudge {
    fn score(&self, scenario: &Scenario, traj: &Trajectory) -> Result<RubricScores> {
        let intents: Vec<AgentIntent> = traj
            .turns
            .iter()
            .map(|t| crate::env::classify_response(&t.action.response))
            .collect();
        let count = |i: AgentIntent| intents.iter().filter(|&&x| x == i).count();
        let first = |i: AgentIntent| intents.iter().position(|&x| x == i);
        let n = traj.turns.len().max(1);
        let voucher_turn = traj.turns.iter().position(|t| t.action.decision == Decision::Voucher);
        let formats_ok = traj.turns.iter().all(|t| t.format_error.is_none());
        let refusals = count(AgentIntent::Refuse);
        let acks = count(AgentIntent::Acknowledge);
        let ack_first = first(AgentIntent::Acknowledge);
        let decisive = voucher_turn.or(first(AgentIntent::Refuse));
        let short = traj
            .turns
            .iter()
            .filter(|t| t.action.response.split(['.', '!', '?']).filter(|s| !s.trim().is_empty()).count() <= 2)
            .count();
        let distinct = traj
            .turns
            .iter()
            .map(|t| t.action.response.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let redundant = traj
            .turns
            .iter()
            .zip(&intents)
            .filter(|(t, &i)| i == AgentIntent::AskInfo && t.snapshot.evidence_gathered)
            .count();
        let volatile = scenario.persona.affect == crate::scenario::Affect::Volatile;
        let ended = traj.termination;
        let demand = scenario.demand;

        let comm = vec![
            // empathy: acknowledges, and before any decisive move
            grade(acks > 0 && decisive.is_none_or(|d| ack_first.is_some_and(|a| a <= d)), acks > 0)
                + grade(refusals == 0, refusals == 1 && !volatile),
            // clarity: short turns, valid format
            grade(short == traj.turns.len(), 2 * short >= traj.turns.len()) + grade(formats_ok, false),
            // politeness: no refusal to an escalated user, no abrupt close
            grade(
                !traj.turns.iter().zip(&intents).any(|(t, &i)| t.snapshot.escalated && i == AgentIntent::Refuse),
                false,
            ) + grade(first(AgentIntent::Close).is_none_or(|c| c > 0), false),
            // personalization: acknowledgment where the demand calls for it, variety
            grade(!demand.requires_acknowledgment || acks > 0, false) + grade(distinct == n, 2 * distinct >= n),
            // responsiveness: asks when evidence is missing, not after
            grade(
                scenario.signals.has_photo_evidence || first(AgentIntent::AskInfo).is_some_and(|a| a <= 1),
                first(AgentIntent::AskInfo).is_some(),
            ) + grade(redundant == 0, redundant == 1),
            // conciseness: resolves within a few turns
            grade(traj.len() <= 4, traj.len() <= 8) + grade(ended != TerminationReason::Timeout, false),
            // proactivity: moves toward a resolution, closes politely once resolved
            grade(decisive.is_some() || ended == TerminationReason::Satisfied, false)
                + grade(ended == TerminationReason::Satisfied, ended != TerminationReason::Frustrated),
        ];

        let evidence_before_decision = traj.turns.iter().any(|t| t.snapshot.evidence_gathered)
            && voucher_turn.is_none_or(|v| traj.turns[v].snapshot.evidence_gathered);
        let gathering = grade(evidence_before_decision, traj.turns.iter().any(|t| t.snapshot.evidence_gathered))
            + grade(redundant == 0, redundant == 1)
            + grade(
                scenario.signals.has_photo_evidence || first(AgentIntent::AskInfo).is_some_and(|a| a <= 1),
                first(AgentIntent::AskInfo).is_some(),
            );
        let decision = match (voucher_turn.is_some(), demand.accepts_voucher) {
            (true, true) => 3.0,
            (false, false) => 3.0,
            (false, true) => 2.0,
            (true, false) => 0.0,
        } + match ended {
            TerminationReason::Satisfied => 2.0,
            TerminationReason::Timeout | TerminationReason::Ongoing => 1.0,
            TerminationReason::Frustrated | TerminationReason::Impasse => 0.0,
        };
        let compliance = if traj.finish_valid && traj.total_cost() <= 1 { 1.0 } else { 0.0 };
        Ok(RubricScores {
            comm,
            logic: vec![gathering, decision, compliance],
        })
    }
}

/// Facts about one evaluated session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub satisfaction: u8,
    pub finish_valid: bool,
    pub voucher: bool,
    pub comm: f64,
    pub logic: f64,
}

impl SessionScore {
    /// A session that crashed before completing.
    pub fn crashed() -> Self {
        SessionScore {
            satisfaction: 0,
            finish_valid: false,
            voucher: false,
            comm: 0.0,
            logic: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_sessions: usize,
    pub mean_satisfaction: f64,
    pub finish_rate: f64,
    pub voucher_rate: f64,
    pub comm_quality: f64,
    pub logic_quality: f64,
}

/// Aggregate sessions with integer accumulators, so the result does not depend on order.
pub fn aggregate_run(sessions: &[SessionScore]) -> Result<RunMetrics, MetricsError> {
    if sessions.is_empty() {
        return Err(MetricsError::InvalidSpec("no sessions to aggregate".into()));
    }
    let n = sessions.len() as f64;
    let sat: u64 = sessions.iter().map(|s| u64::from(s.satisfaction.min(MAX_SATISFACTION))).sum();
    let finished = sessions.iter().filter(|s| s.finish_valid).count();
    let vouchers = sessions.iter().filter(|s| s.voucher).count();
    let halves = |f: fn(&SessionScore) -> f64| -> f64 {
        let exact: Option<i64> = sessions
            .iter()
            .map(|s| {
                let h = f(s) * 2.0;
                (h.fract() == 0.0).then_some(h as i64)
            })
            .sum();
        match exact {
            Some(h) => h as f64 / 2.0,
            None => {
                let mut v: Vec<f64> = sessions.iter().map(f).collect();
                v.sort_by(f64::total_cmp);
                v.iter().sum()
            }
        }
    };
    Ok(RunMetrics {
        n_sessions: sessions.len(),
        mean_satisfaction: 1.0 + 4.0 * (sat as f64 / n) / f64::from(MAX_SATISFACTION),
        finish_rate: finished as f64 / n,
        voucher_rate: vouchers as f64 / n,
        comm_quality: halves(|s| s.comm) / n,
        logic_quality: halves(|s| s.logic) / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n_sessions: usize,
    pub runs: usize,
    pub seed: u64,
    /// Give every run its own seed; when false all runs replay the same sessions.
    pub fresh_seeds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sessions: usize,
    pub mean_satisfaction: f64,
    pub finish_rate: f64,
    pub voucher_rate: f64,
    pub comm_quality: f64,
    pub logic_quality: f64,
    pub per_run: Vec<RunMetrics>,
    /// Population standard deviation of each metric across runs.
    pub std: RunMetrics,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn report_from_runs(per_run: Vec<RunMetrics>) -> Result<EvalReport, MetricsError> {
    if per_run.is_empty() {
        return Err(MetricsError::InvalidSpec("no runs".into()));
    }
    let col = |f: fn(&RunMetrics) -> f64| mean_std(&per_run.iter().map(f).collect::<Vec<_>>());
    let sat = col(|r| r.mean_satisfaction);
    let fr = col(|r| r.finish_rate);
    let vr = col(|r| r.voucher_rate);
    let comm = col(|r| r.comm_quality);
    let logic = col(|r| r.logic_quality);
    Ok(EvalReport {
        n_sessions: per_run.iter().map(|r| r.n_sessions).sum(),
        mean_satisfaction: sat.0,
        finish_rate: fr.0,
        voucher_rate: vr.0,
        comm_quality: comm.0,
        logic_quality: logic.0,
        std: RunMetrics {
            n_sessions: 0,
            mean_satisfaction: sat.1,
            finish_rate: fr.1,
            voucher_rate: vr.1,
            comm_quality: comm.1,
            logic_quality: logic.1,
        },
        per_run,
    })
}

/// Score one finished session.
pub fn score_session(scenario: &Scenario, traj: &Trajectory, judge: &dyn RubricJudge) -> Result<SessionScore> {
    let r = judge.score(scenario, traj)?;
    Ok(SessionScore {
        satisfaction: traj.final_satisfaction,
        finish_valid: traj.finish_valid,
        voucher: traj.issued_voucher(),
        comm: rubric_aggregate(&r.comm, &Rubric::communication())?,
        logic: rubric_aggregate(&r.logic, &Rubric::logic())?,
    })
}

/// Evaluate `policy` over `spec.runs` runs of `spec.n_sessions` sessions each.
/// Sessions whose rollout fails count as unfinished rather than aborting the run.
pub fn evaluate(
    policy: &dyn AgentPolicy,
    source: &dyn ScenarioSource,
    env: Env,
    simulator: &dyn UserSimulator,
    judge: &dyn RubricJudge,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    if spec.n_sessions == 0 || spec.runs == 0 {
        return Err(MetricsError::InvalidSpec("sessions and runs must be positive".into()).into());
    }
    let mut per_run = Vec::with_capacity(spec.runs);
    for run in 0..spec.runs {
        let seed = if spec.fresh_seeds { derive_seed(spec.seed, run as u64) } else { spec.seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenarios = source.draw(spec.n_sessions, &mut rng)?;
        let sessions: Vec<SessionScore> = scenarios
            .par_iter()
            .map(|s| match env.rollout(s, policy, simulator, s.rng_seed) {
                Ok(traj) => score_session(s, &traj, judge),
                Err(e) => {
                    log::warn!("session {} failed: {e}", s.id);
                    Ok(SessionScore::crashed())
                }
            })
            .collect::<Result<_>>()?;
        per_run.push(aggregate_run(&sessions)?);
    }
    Ok(report_from_runs(per_run)?)
}

/// Table with one row per labelled report: Sat, FR, Comm, Logic, V-Rate with `^{±std}` notes.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let cell = |m: f64, s: f64, pct: bool| {
        if pct {
            format!("{:.2}^{{±{:.2}}}", m * 100.0, s * 100.0)
        } else {
            format!("{m:.2}^{{±{s:.2}}}")
        }
    };
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$} | {:>14} | {:>15} | {:>14} | {:>14} | {:>15}\n",
        "Method", "Sat", "FR (%)", "Comm", "Logic", "V-Rate (%)"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 86)));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>14} | {:>15} | {:>14} | {:>14} | {:>15}\n",
            label,
            cell(r.mean_satisfaction, r.std.mean_satisfaction, false),
            cell(r.finish_rate, r.std.finish_rate, true),
            cell(r.comm_quality, r.std.comm_quality, false),
            cell(r.logic_quality, r.std.logic_quality, false),
            cell(r.voucher_rate, r.std.voucher_rate, true),
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub delta: f64,
    /// A spike must raise λ by more than this in total.
    pub spike_threshold: f64,
    pub settle_band: f64,
    /// Trailing steps averaged for the settled rate.
    pub final_window: usize,
    /// Moving-average width applied to V-Rate before the settle test.
    pub smooth_window: usize,
}

impl DynamicsConfig {
    pub fn new(delta: f64, lambda_max: f64) -> Self {
        DynamicsConfig {
            delta,
            spike_threshold: 0.05 * lambda_max,
            settle_band: 0.05,
            final_window: 20,
            smooth_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    /// Index of the step where the rise starts and the last rising step.
    pub start: usize,
    pub end: usize,
    pub rise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub spike_count: usize,
    pub spikes: Vec<Spike>,
    pub settled_rate: f64,
    /// First step index after which smoothed V-Rate stays within the band around δ.
    pub settle_step: Option<usize>,
    pub peak_lambda: f64,
}

/// Count λ spikes and find where the voucher rate settles.
///
/// A spike is a maximal run of consecutive λ increases whose total rise exceeds the threshold.
pub fn dynamics_report(lambdas: &[f64], v_rates: &[f64], cfg: &DynamicsConfig) -> Result<DynamicsSummary, MetricsError> {
    let n = lambdas.len();
    if n < 2 || v_rates.len() != n {
        return Err(MetricsError::ShortLog(n.min(v_rates.len())));
    }
    let mut spikes = Vec::new();
    let mut k = 1;
    while k < n {
        if lambdas[k] > lambdas[k - 1] {
            let start = k - 1;
            while k < n && lambdas[k] > lambdas[k - 1] {
                k += 1;
            }
            let rise = lambdas[k - 1] - lambdas[start];
            if rise > cfg.spike_threshold {
                spikes.push(Spike { start, end: k - 1, rise });
            }
        } else {
            k += 1;
        }
    }
    let w = cfg.final_window.clamp(1, n);
    let settled_rate = v_rates[n - w..].iter().sum::<f64>() / w as f64;
    let sw = cfg.smooth_window.max(1);
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = (i + 1).saturating_sub(sw);
            v_rates[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    let inside = |v: f64| (v - cfg.delta).abs() <= cfg.settle_band;
    let settle_step = match smoothed.iter().rposition(|&v| !inside(v)) {
        None => Some(0),
        Some(last_out) if last_out + 1 < n => Some(last_out + 1),
        Some(_) => None,
    };
    Ok(DynamicsSummary {
        spike_count: spikes.len(),
        spikes,
        settled_rate,
        settle_step,
        peak_lambda: lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}
