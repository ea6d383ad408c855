//! Hybrid advantages: outcome + process credit − λ·cost, normalized over the group.

use serde::{Deserialize, Serialize};

use super::{CmpoConfig, CmpoError, NormScope, RolloutGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEntry {
    pub outcome: f64,
    pub process: f64,
    pub cost: u8,
    pub raw: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAdvantageTable {
    /// `entries[i][t]` for trajectory `i`, turn `t`.
    pub entries: Vec<Vec<AdvantageEntry>>,
    pub group_mean: f64,
    pub group_std: f64,
    pub lambda_used: f64,
    /// Set when there were fewer than two turns to normalize over; all advantages are then 0.
    pub degenerate: bool,
}

/// Population z-scores `(x − mean) / max(std, eps)`.
///
/// Statistics are accumulated on deviations from the first value, so adding a constant
/// that is exactly representable alongside the inputs gives bitwise identical output.
pub fn normalize(values: &[f64], eps: f64) -> (f64, f64, Vec<f64>) {
    match stats_of(values) {
        Some(s) => {
            let denom = s.std.max(eps);
            let z = values.iter().map(|v| ((v - s.pivot) - s.mean_dev) / denom).collect();
            (s.pivot + s.mean_dev, s.std, z)
        }
        None => (values.first().copied().unwrap_or(0.0), 0.0, vec![0.0; values.len()]),
    }
}

fn deviation_stats(devs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = devs.clone().count() as f64;
    let mean = devs.clone().sum::<f64>() / n;
    let var = devs.map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `R_O` (broadcast or final-turn only, discounted by `γ^(T−1−t)`) `+ R_P − λ·𝕀` for every turn.
pub fn raw_rewards(group: &RolloutGroup, lambda: f64, cfg: &CmpoConfig) -> Result<Vec<Vec<AdvantageEntry>>, CmpoError> {
    if group.breakdowns.len() != group.trajectories.len() {
        return Err(CmpoError::ShapeMismatch(format!(
            "{} trajectories but {} reward breakdowns",
            group.trajectories.len(),
            group.breakdowns.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CmpoError::InvalidConfig(format!("lambda {lambda} must be non-negative")));
    }
    let mut out = Vec::with_capacity(group.len());
    for (traj, b) in group.trajectories.iter().zip(&group.breakdowns) {
        let n = traj.turns.len();
        if b.process.len() != n || b.cost.len() != n {
            return Err(CmpoError::ShapeMismatch(format!(
                "trajectory {} has {n} turns but breakdown has {} process / {} cost entries",
                traj.scenario_id,
                b.process.len(),
                b.cost.len()
            )));
        }
        let row = (0..n)
            .map(|t| {
                let outcome = if cfg.broadcast_outcome || t + 1 == n {
                    b.outcome * cfg.gamma.powi((n - 1 - t) as i32)
                } else {
                    0.0
                };
                let penalty = if b.cost[t] == 1 { lambda } else { 0.0 };
                AdvantageEntry {
                    outcome,
                    process: b.process[t],
                    cost: b.cost[t],
                    raw: outcome + b.process[t] - penalty,
                    advantage: 0.0,
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

fn pooled<'a>(
    rows: impl Iterator<Item = (&'a Vec<AdvantageEntry>, bool)>,
    cfg: &CmpoConfig,
) -> Vec<f64> {
    rows.filter(|(_, valid)| *valid || !cfg.exclude_failed_from_norm)
        .flat_map(|(row, _)| row.iter().map(|e| e.raw))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Stats {
    pivot: f64,
    mean_dev: f64,
    std: f64,
}

fn stats_of(values: &[f64]) -> Option<Stats> {
    if values.len() < 2 {
        return None;
    }
    let pivot = values[0];
    let (mean_dev, std) = deviation_stats(values.iter().map(|v| v - pivot));
    Some(Stats { pivot, mean_dev, std })
}

fn table(mut entries: Vec<Vec<AdvantageEntry>>, stats: Option<Stats>, lambda: f64, eps: f64) -> HybridAdvantageTable {
    let (mean, std) = match stats {
        Some(s) => {
            let denom = s.std.max(eps);
            for e in entries.iter_mut().flatten() {
                e.advantage = ((e.raw - s.pivot) - s.mean_dev) / denom;
            }
            (s.pivot + s.mean_dev, s.std)
        }
        None => (entries.iter().flatten().map(|e| e.raw).next().unwrap_or(0.0), 0.0),
    };
    HybridAdvantageTable {
        entries,
        group_mean: mean,
        group_std: std,
        lambda_used: lambda,
        degenerate: stats.is_none(),
    }
}

/// Hybrid advantages for one group, normalized over all of its turns.
pub fn hybrid_advantages(group: &RolloutGroup, lambda: f64, cfg: &CmpoConfig) -> Result<HybridAdvantageTable, CmpoError> {
    let entries = raw_rewards(group, lambda, cfg)?;
    let values = pooled(
        entries.iter().zip(group.trajectories.iter().map(|t| t.finish_valid)),
        cfg,
    );
    Ok(table(entries, stats_of(&values), lambda, cfg.eps_norm))
}

/// Advantages for a whole batch, honouring `cfg.norm_scope`.
pub fn batch_advantages(groups: &[RolloutGroup], lambda: f64, cfg: &CmpoConfig) -> Result<Vec<HybridAdvantageTable>, CmpoError> {
    match cfg.norm_scope {
        NormScope::Group => groups.iter().map(|g| hybrid_advantages(g, lambda, cfg)).collect(),
        NormScope::Batch => {
            let all: Vec<Vec<Vec<AdvantageEntry>>> = groups
                .iter()
                .map(|g| raw_rewards(g, lambda, cfg))
                .collect::<Result<_, _>>()?;
            let values = pooled(
                all.iter()
                    .zip(groups)
                    .flat_map(|(rows, g)| rows.iter().zip(g.trajectories.iter().map(|t| t.finish_valid))),
                cfg,
            );
            let stats = stats_of(&values);
            Ok(all
                .into_iter()
                .map(|entries| table(entries, stats, lambda, cfg.eps_norm))
                .collect())
        }
    }
}
