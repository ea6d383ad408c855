//! Run configuration, checkpoints, record files, metrics logs and manifests.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cmpo::{CmpoConfig, HybridAdvantageTable, MixtureSource, NormScope, RolloutGroup, TrainSettings, TrainerState};
use crate::constraint::{LagrangeState, LambdaMode, PidGains};
use crate::env::{Env, RemoteSimulator, ScriptedSimulator, Trajectory, UserSimulator};
use crate::metrics::DynamicsConfig;
use crate::reward::{PrincipleSet, RemoteJudge, SatisfactionScale, ScriptedJudge, TurnJudge};
use crate::scenario::{load_persona_bank, DemandMix, PersonaBank, Scenario};

/// Version stamped into every record and document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variables that override endpoint URLs.
pub const SIMULATOR_URL_VAR: &str = "CMPO_SIMULATOR_URL";
pub const JUDGE_URL_VAR: &str = "CMPO_JUDGE_URL";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaModeName {
    Pid,
    Frozen,
    Fixed,
    Plain,
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub t_max: usize,

    pub delta: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub lambda_max: f64,
    pub lambda0: f64,
    pub integral_clamp: f64,
    pub lambda_mode: LambdaModeName,
    pub fixed_lambda: f64,

    pub clip_eps: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub group_size: usize,
    pub update_batch: usize,
    pub broadcast_outcome: bool,
    pub norm_scope: NormScope,
    pub eps_norm: f64,
    pub exclude_failed_from_norm: bool,
    pub learning_rate: f64,
    pub temperature: f64,

    pub easy_fraction: f64,
    pub easy_incentive_open: f64,
    pub hard_rigid_pursuit: f64,
    pub satisfaction_min: u8,
    pub satisfaction_max: u8,
    pub process_reward: bool,

    pub persona_bank: Option<String>,
    pub principles: Option<String>,
    pub simulator_url: Option<String>,
    pub judge_url: Option<String>,
    pub remote_timeout_secs: f64,
    pub remote_retries: u32,

    pub spike_threshold_frac: f64,
    pub settle_band: f64,
    pub final_window: usize,
    pub smooth_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            t_max: 15,
            delta: 0.30,
            kp: 0.2,
            ki: 0.07,
            kd: 0.0,
            lambda_max: 5.0,
            lambda0: 0.0,
            integral_clamp: 10.0,
            lambda_mode: LambdaModeName::Pid,
            fixed_lambda: 0.0,
            clip_eps: 0.2,
            kl_beta: 0.005,
            gamma: 1.0,
            group_size: 4,
            update_batch: 128,
            broadcast_outcome: true,
            norm_scope: NormScope::Group,
            eps_norm: 1e-8,
            exclude_failed_from_norm: false,
            learning_rate: 20.0,
            temperature: 1.0,
            easy_fraction: 0.4,
            easy_incentive_open: 0.5,
            hard_rigid_pursuit: 0.7,
            satisfaction_min: 0,
            satisfaction_max: 5,
            process_reward: true,
            persona_bank: None,
            principles: None,
            simulator_url: None,
            judge_url: None,
            remote_timeout_secs: 30.0,
            remote_retries: 2,
            spike_threshold_frac: 0.05,
            settle_band: 0.05,
            final_window: 20,
            smooth_window: 10,
        }
    }
}

fn known_keys() -> Vec<String> {
    match toml::Value::try_from(RunConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Parse a TOML configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, StoreError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| StoreError::Parse(e.to_string()))?;
    let known = known_keys();
    // Optional keys that default to None are absent from the serialized default table.
    let optional = ["persona_bank", "principles", "simulator_url", "judge_url"];
    if let Some(k) = table
        .keys()
        .find(|k| !known.contains(k) && !optional.contains(&k.as_str()))
    {
        return Err(StoreError::UnknownKey(k.clone()));
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| StoreError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidConfig(m));
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1]", self.delta));
        }
        if [self.kp, self.ki, self.kd].iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("PID gains must be non-negative".into());
        }
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max {} must be positive", self.lambda_max));
        }
        if !(0.0..=self.lambda_max).contains(&self.lambda0) || !(0.0..=self.lambda_max).contains(&self.fixed_lambda) {
            return bad("lambda0 and fixed_lambda must lie in [0, lambda_max]".into());
        }
        if !(self.integral_clamp > 0.0) {
            return bad("integral_clamp must be positive".into());
        }
        if self.update_batch == 0 || self.group_size == 0 || self.update_batch % self.group_size != 0 {
            return bad(format!(
                "update_batch {} must be a positive multiple of group_size {}",
                self.update_batch, self.group_size
            ));
        }
        for (name, p) in [
            ("easy_fraction", self.easy_fraction),
            ("easy_incentive_open", self.easy_incentive_open),
            ("hard_rigid_pursuit", self.hard_rigid_pursuit),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.satisfaction_max <= self.satisfaction_min || self.satisfaction_max > 5 {
            return bad("satisfaction scale must satisfy min < max ≤ 5".into());
        }
        if !(self.remote_timeout_secs > 0.0) {
            return bad("remote_timeout_secs must be positive".into());
        }
        if self.final_window == 0 || self.smooth_window == 0 {
            return bad("dynamics windows must be positive".into());
        }
        self.train_settings()
            .validate()
            .map_err(|e| StoreError::InvalidConfig(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Keys whose values differ from the defaults.
    pub fn overrides(&self) -> Vec<String> {
        let mine = serde_json::to_value(self).expect("config serializes");
        let base = serde_json::to_value(RunConfig::default()).expect("config serializes");
        match (mine, base) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, v)| format!("{k}={v}"))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Point endpoints at the URLs in the environment, when set.
    pub fn apply_env_overrides(&mut self) {
        if let Ok(url) = std::env::var(SIMULATOR_URL_VAR) {
            if !url.is_empty() {
                self.simulator_url = Some(url);
            }
        }
        if let Ok(url) = std::env::var(JUDGE_URL_VAR) {
            if !url.is_empty() {
                self.judge_url = Some(url);
            }
        }
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        match self.lambda_mode {
            LambdaModeName::Pid => LambdaMode::Pid,
            LambdaModeName::Frozen => LambdaMode::Frozen,
            LambdaModeName::Fixed => LambdaMode::Fixed(self.fixed_lambda),
            LambdaModeName::Plain => LambdaMode::Plain,
        }
    }

    pub fn cmpo(&self) -> CmpoConfig {
        CmpoConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            gamma: self.gamma,
            group_size: self.group_size,
            broadcast_outcome: self.broadcast_outcome,
            norm_scope: self.norm_scope,
            eps_norm: self.eps_norm,
            exclude_failed_from_norm: self.exclude_failed_from_norm,
        }
    }

    pub fn lagrange(&self) -> LagrangeState {
        LagrangeState::new(
            PidGains {
                kp: self.kp,
                ki: self.ki,
                kd: self.kd,
            },
            self.delta,
            self.lambda_max,
            self.lambda0,
            self.integral_clamp,
        )
    }

    pub fn scale(&self) -> SatisfactionScale {
        SatisfactionScale {
            min: self.satisfaction_min,
            max: self.satisfaction_max,
        }
    }

    pub fn env(&self) -> Env {
        Env::new(self.t_max.max(1))
    }

    pub fn demand_mix(&self) -> DemandMix {
        DemandMix {
            easy_incentive_open: self.easy_incentive_open,
            hard_rigid_pursuit: self.hard_rigid_pursuit,
        }
    }

    pub fn dynamics(&self) -> DynamicsConfig {
        DynamicsConfig {
            delta: self.delta,
            spike_threshold: self.spike_threshold_frac * self.lambda_max,
            settle_band: self.settle_band,
            final_window: self.final_window,
            smooth_window: self.smooth_window,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            env: self.env(),
            cmpo: self.cmpo(),
            learning_rate: self.learning_rate,
            scenarios_per_step: self.update_batch / self.group_size.max(1),
            scale: self.scale(),
            use_process_reward: self.process_reward,
            lambda_mode: self.lambda_mode(),
            lagrange: self.lagrange(),
            temperature: self.temperature,
            seed: self.seed,
        }
    }

    pub fn persona_bank(&self) -> crate::Result<PersonaBank> {
        Ok(match &self.persona_bank {
            Some(p) => load_persona_bank(Path::new(p))?,
            None => PersonaBank::reference(),
        })
    }

    pub fn principle_set(&self) -> crate::Result<PrincipleSet> {
        Ok(match &self.principles {
            Some(p) => PrincipleSet::load(Path::new(p))?,
            None => PrincipleSet::reference(),
        })
    }

    /// Scenario source with the given easy fraction (defaults to the configured one).
    pub fn source(&self, easy_fraction: Option<f64>) -> crate::Result<MixtureSource> {
        Ok(MixtureSource {
            bank: self.persona_bank()?,
            easy_fraction: easy_fraction.unwrap_or(self.easy_fraction),
            mix: self.demand_mix(),
        })
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.remote_timeout_secs)
    }

    /// Remote simulator when an endpoint is configured, scripted otherwise.
    pub fn simulator(&self) -> Box<dyn UserSimulator> {
        match &self.simulator_url {
            Some(url) => Box::new(RemoteSimulator::new(url.clone(), self.timeout(), self.remote_retries)),
            None => Box::new(ScriptedSimulator),
        }
    }

    pub fn judge(&self) -> Box<dyn TurnJudge> {
        match &self.judge_url {
            Some(url) => Box::new(RemoteJudge::new(url.clone(), self.timeout(), self.remote_retries)),
            None => Box::new(ScriptedJudge),
        }
    }
}

/// Resumable training state tied to the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, state: TrainerState) -> Self {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            config_hash: config.hash(),
            state,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Write a checkpoint via a temporary file so a crash never leaves a torn one behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), StoreError> {
    let json = serde_json::to_vec(ckpt).map_err(|e| StoreError::Parse(e.to_string()))?;
    write_atomic(path, &json)
}

/// Load a checkpoint, rejecting other schema versions and, when given, other configurations.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| StoreError::Parse(e.to_string()))?;
    if ckpt.schema_version != SCHEMA_VERSION {
        return Err(StoreError::VersionMismatch {
            expected: SCHEMA_VERSION.to_string(),
            found: ckpt.schema_version.to_string(),
        });
    }
    if let Some(h) = expected_hash {
        if ckpt.config_hash != h {
            return Err(StoreError::VersionMismatch {
                expected: h.to_string(),
                found: ckpt.config_hash.clone(),
            });
        }
    }
    Ok(ckpt)
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

/// Append records as JSON lines in one write. An empty slice leaves the file untouched.
pub fn append_records<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, StoreError> {
    if records.is_empty() {
        return Ok(0);
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut buf,
            &Versioned {
                schema_version: SCHEMA_VERSION,
                record: r,
            },
        )
        .map_err(|e| StoreError::Parse(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(records.len())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Versioned<T> =
            serde_json::from_str(&line).map_err(|e| StoreError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(StoreError::VersionMismatch {
                expected: SCHEMA_VERSION.to_string(),
                found: v.schema_version.to_string(),
            });
        }
        out.push(v.record);
    }
    Ok(out)
}

pub fn write_trajectories(trajs: &[Trajectory], path: &Path) -> Result<usize, StoreError> {
    append_records(path, trajs)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, StoreError> {
    read_records(path)
}

pub fn write_scenarios(scenarios: &[Scenario], path: &Path) -> Result<usize, StoreError> {
    append_records(path, scenarios)
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>, StoreError> {
    read_records(path)
}

/// Per-turn learning signal for external trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub scenario_id: String,
    pub traj_index: usize,
    pub turn: usize,
    #[serde(rename = "R_O")]
    pub r_o: f64,
    #[serde(rename = "R_P")]
    pub r_p: f64,
    pub cost_indicator: u8,
    pub lambda: f64,
    pub raw: f64,
    pub advantage: f64,
}

pub fn advantage_records(groups: &[RolloutGroup], tables: &[HybridAdvantageTable]) -> Vec<AdvantageRecord> {
    let mut out = Vec::new();
    for (g, table) in groups.iter().zip(tables) {
        for (i, row) in table.entries.iter().enumerate() {
            for (t, e) in row.iter().enumerate() {
                out.push(AdvantageRecord {
                    scenario_id: g.scenario_id.clone(),
                    traj_index: i,
                    turn: t + 1,
                    r_o: g.breakdowns[i].outcome,
                    r_p: e.process,
                    cost_indicator: e.cost,
                    lambda: table.lambda_used,
                    raw: e.raw,
                    advantage: e.advantage,
                });
            }
        }
    }
    out
}

/// One line of the plain-text metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub e_k: f64,
    pub lambda: f64,
    pub j_c: f64,
    pub mean_sat: f64,
    pub v_rate: f64,
}

impl From<&crate::cmpo::StepRecord> for LogEntry {
    fn from(r: &crate::cmpo::StepRecord) -> Self {
        LogEntry {
            step: r.step,
            e_k: r.e_k,
            lambda: r.lambda,
            j_c: r.j_c,
            mean_sat: r.mean_sat,
            v_rate: r.v_rate,
        }
    }
}

pub fn append_log_lines(path: &Path, lines: &[String]) -> Result<(), StoreError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io_err(path))
}

/// Parse `step e_k lambda J_C mean_sat v_rate` lines.
pub fn read_metrics_log(path: &Path) -> Result<Vec<LogEntry>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || StoreError::Parse(format!("{}:{}: expected 6 fields", path.display(), i + 1));
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LogEntry {
                step: f[0].parse().map_err(|_| bad())?,
                e_k: num(f[1])?,
                lambda: num(f[2])?,
                j_c: num(f[3])?,
                mean_sat: num(f[4])?,
                v_rate: num(f[5])?,
            })
        })
        .collect()
}

/// Resolved configuration and provenance, written before a command does any work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub git_revision: Option<String>,
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub extra: BTreeMap<String, String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, config: &RunConfig) -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: None,
            command: command.to_string(),
            argv,
            config_hash: config.hash(),
            overrides: config.overrides(),
            extra: BTreeMap::new(),
            config: config.clone(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Parse(e.to_string()))?;
    write_atomic(path, &json)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Parse(e.to_string()))
}

/// Single JSON document tagged with the schema version.
pub fn write_document<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    write_json(
        path,
        &Versioned {
            schema_version: SCHEMA_VERSION,
            record: value,
        },
    )
}

pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let v: Versioned<T> = read_json(path)?;
    if v.schema_version != SCHEMA_VERSION {
        return Err(StoreError::VersionMismatch {
            expected: SCHEMA_VERSION.to_string(),
            found: v.schema_version.to_string(),
        });
    }
    Ok(v.record)
}
