//! Clipped, KL-regularized surrogate with its exact gradient for the tabular policy.
//!
//! ```text
//! J = 1/N Σ_i 1/T_i Σ_t [ min(r·Â, clip(r, 1−ε, 1+ε)·Â) − β·(ρ − 1 − ln ρ) ]
//! r = π_θ(a|s) / π_old(a|s),  ρ = π_ref(a|s) / π_θ(a|s),  loss = −J
//! ```

use serde::{Deserialize, Serialize};

use super::{CmpoConfig, CmpoError, HybridAdvantageTable, RolloutGroup, SoftmaxPolicy};

/// One visited (state, action) pair with its advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    pub feature: usize,
    pub action: usize,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateOutput {
    pub loss: f64,
    /// Batch mean of the clipped policy term.
    pub surrogate: f64,
    /// Batch mean of the per-turn KL estimate.
    pub kl: f64,
    /// Fraction of turns whose ratio lies outside the clip range.
    pub clip_fraction: f64,
    /// d loss / d logits, same layout as the policy table.
    pub gradient: Vec<f64>,
}

fn check(name: &str, v: f64) -> Result<f64, CmpoError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CmpoError::Numerical(format!("{name} = {v}")))
    }
}

/// Gather per-trajectory turn samples from groups and their advantage tables.
pub fn samples_from(groups: &[RolloutGroup], tables: &[HybridAdvantageTable]) -> Result<Vec<Vec<TurnSample>>, CmpoError> {
    if groups.len() != tables.len() {
        return Err(CmpoError::ShapeMismatch(format!(
            "{} groups but {} advantage tables",
            groups.len(),
            tables.len()
        )));
    }
    let mut out = Vec::new();
    for (g, table) in groups.iter().zip(tables) {
        if table.entries.len() != g.trajectories.len() {
            return Err(CmpoError::ShapeMismatch("advantage table does not match its group".into()));
        }
        for (traj, row) in g.trajectories.iter().zip(&table.entries) {
            if row.len() != traj.turns.len() {
                return Err(CmpoError::ShapeMismatch("advantage row does not match trajectory length".into()));
            }
            let samples = traj
                .turns
                .iter()
                .zip(row)
                .map(|(turn, e)| {
                    let c = turn.choice.ok_or_else(|| {
                        CmpoError::ShapeMismatch("turn carries no tabular action choice".into())
                    })?;
                    Ok(TurnSample {
                        feature: c.feature,
                        action: c.template,
                        advantage: e.advantage,
                    })
                })
                .collect::<Result<Vec<_>, CmpoError>>()?;
            out.push(samples);
        }
    }
    Ok(out)
}

pub fn surrogate_loss(
    groups: &[RolloutGroup],
    tables: &[HybridAdvantageTable],
    policy: &SoftmaxPolicy,
    old_policy: &SoftmaxPolicy,
    ref_policy: &SoftmaxPolicy,
    cfg: &CmpoConfig,
) -> Result<SurrogateOutput, CmpoError> {
    let samples = samples_from(groups, tables)?;
    surrogate_from_samples(&samples, policy, old_policy, ref_policy, cfg)
}

/// The surrogate over explicit per-trajectory samples.
pub fn surrogate_from_samples(
    trajectories: &[Vec<TurnSample>],
    policy: &SoftmaxPolicy,
    old_policy: &SoftmaxPolicy,
    ref_policy: &SoftmaxPolicy,
    cfg: &CmpoConfig,
) -> Result<SurrogateOutput, CmpoError> {
    if !policy.same_shape(old_policy) || !policy.same_shape(ref_policy) {
        return Err(CmpoError::ShapeMismatch("policies differ in feature or action space".into()));
    }
    let n_actions = policy.n_actions();
    let mut gradient = vec![0.0; policy.logits().len()];
    let (mut surrogate, mut kl, mut clipped, mut turns) = (0.0, 0.0, 0usize, 0usize);
    let counted = trajectories.iter().filter(|t| !t.is_empty()).count();
    if counted == 0 {
        return Err(CmpoError::ShapeMismatch("no turns to optimize over".into()));
    }
    let tau = policy.temperature();
    for traj in trajectories.iter().filter(|t| !t.is_empty()) {
        let w = 1.0 / (counted as f64 * traj.len() as f64);
        for s in traj {
            if s.feature >= policy.n_features() || s.action >= n_actions {
                return Err(CmpoError::ShapeMismatch(format!(
                    "sample ({}, {}) outside the policy table",
                    s.feature, s.action
                )));
            }
            let probs = policy.probs(s.feature);
            let p = probs[s.action];
            let p_old = old_policy.prob(s.feature, s.action);
            let p_ref = ref_policy.prob(s.feature, s.action);
            let r = check("ratio", p / p_old)?;
            let rho = check("reference ratio", p_ref / p)?;
            let a = check("advantage", s.advantage)?;
            let lo = 1.0 - cfg.clip_eps;
            let hi = 1.0 + cfg.clip_eps;
            let rc = r.clamp(lo, hi);
            let unclipped_active = r * a <= rc * a;
            let term = if unclipped_active { r * a } else { rc * a };
            let k3 = check("kl estimate", rho - 1.0 - rho.ln())?;
            surrogate += w * term;
            kl += w * k3;
            clipped += usize::from(r < lo || r > hi);
            turns += 1;
            // d/dθ_b log π(a) = (1[b = a] − π(b)) / τ
            // d term = A·r·∇log π when unclipped; d k3 = (1 − ρ)·∇log π.
            let coeff = (if unclipped_active { a * r } else { 0.0 }) - cfg.kl_beta * (1.0 - rho);
            let row = &mut gradient[s.feature * n_actions..(s.feature + 1) * n_actions];
            for (b, g) in row.iter_mut().enumerate() {
                let dlog = (f64::from(u8::from(b == s.action)) - probs[b]) / tau;
                *g -= w * coeff * dlog;
            }
        }
    }
    let objective = surrogate - cfg.kl_beta * kl;
    let loss = check("loss", -objective)?;
    if let Some(bad) = gradient.iter().find(|g| !g.is_finite()) {
        return Err(CmpoError::Numerical(format!("gradient entry {bad}")));
    }
    Ok(SurrogateOutput {
        loss,
        surrogate,
        kl,
        clip_fraction: clipped as f64 / turns as f64,
        gradient,
    })
}
