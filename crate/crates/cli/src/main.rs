//! `cmpo`: sample scenarios, roll out, train, evaluate, export advantages and report λ dynamics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dialogue_cmdp::cmpo::{batch_advantages, collect_groups, RolloutContext, ScenarioSource, SoftmaxPolicy, TrainerState};
use dialogue_cmdp::metrics::{dynamics_report, evaluate, render_table, EvalSpec, ScriptedRubricJudge};
use dialogue_cmdp::pipeline::{self, initial_policy};
use dialogue_cmdp::store::{
    self, advantage_records, append_log_lines, append_records, load_checkpoint, read_metrics_log, save_checkpoint,
    write_document, write_json, write_scenarios, write_trajectories, Checkpoint, LambdaModeName, LogEntry, Manifest,
};
use dialogue_cmdp::{Error, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cmpo", version, about = "Constrained multi-turn dialogue training gym")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a scenario batch.
    Sample(Common),
    /// Roll out sessions under a policy checkpoint and write the trajectories.
    Rollout(Common),
    /// Train with CMPO, writing checkpoints and a metrics log.
    Train(Common),
    /// Evaluate a policy and write a report with per-run spreads.
    Eval(Common),
    /// Roll out one training batch and write per-turn advantages.
    ExportAdvantages(Common),
    /// Summarize λ dynamics from a metrics log and write curve data.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Training steps to run
    #[arg(long, default_value_t = 200)]
    steps: u64,
    /// Sessions per sample, rollout or evaluation run
    #[arg(long, default_value_t = 80)]
    sessions: usize,
    /// Independent evaluation runs
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// `easy`, `hard` or `mix=F` with F the Easy fraction.
    #[arg(long, value_parser = parse_difficulty)]
    difficulty: Option<f64>,
    /// Keep λ at its initial value.
    #[arg(long, conflicts_with_all = ["fixed_lambda", "no_pid"])]
    freeze_lambda: bool,
    /// Drop the process reward from the advantages.
    #[arg(long)]
    no_genrm: bool,
    /// Hold λ at this value.
    #[arg(long, value_name = "V", conflicts_with = "no_pid")]
    fixed_lambda: Option<f64>,
    /// Replace the PID update with a plain error step.
    #[arg(long)]
    no_pid: bool,
    /// Policy checkpoint for rollout, eval and export-advantages.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue training from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Metrics log for report (defaults to the one in the output directory).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_difficulty(s: &str) -> Result<f64, String> {
    match s {
        "easy" => Ok(1.0),
        "hard" => Ok(0.0),
        _ => {
            let f: f64 = s
                .strip_prefix("mix=")
                .ok_or_else(|| format!("expected easy, hard or mix=F, got `{s}`"))?
                .parse()
                .map_err(|_| format!("bad mix fraction in `{s}`"))?;
            if (0.0..=1.0).contains(&f) {
                Ok(f)
            } else {
                Err(format!("mix fraction {f} outside [0, 1]"))
            }
        }
    }
}

/// Config problems exit with 2, everything else with 1.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if e.is_config_error() => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_failure(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl Common {
    fn resolve_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = if self.config == "default" {
            RunConfig::default()
        } else {
            store::load_config(Path::new(&self.config))
                .map_err(|e| config_failure(anyhow!(e).context(format!("loading {}", self.config))))?
        };
        cfg.apply_env_overrides();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(f) = self.difficulty {
            cfg.easy_fraction = f;
        }
        if self.no_genrm {
            cfg.process_reward = false;
        }
        if self.freeze_lambda {
            cfg.lambda_mode = LambdaModeName::Frozen;
        }
        if let Some(v) = self.fixed_lambda {
            cfg.lambda_mode = LambdaModeName::Fixed;
            cfg.fixed_lambda = v;
        }
        if self.no_pid {
            cfg.lambda_mode = LambdaModeName::Plain;
        }
        cfg.validate().map_err(|e| config_failure(anyhow!(e)))?;
        Ok(cfg)
    }

    fn policy(&self, cfg: &RunConfig) -> anyhow::Result<(SoftmaxPolicy, f64)> {
        match &self.checkpoint {
            Some(p) => {
                let ckpt = load_checkpoint(p, None).with_context(|| format!("loading {}", p.display()))?;
                Ok((ckpt.state.policy, ckpt.state.lagrange.lambda))
            }
            None => Ok((initial_policy(cfg)?, cfg.lambda0)),
        }
    }
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn write_manifest(verb: &str, args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = Manifest::new(verb, std::env::args().collect(), cfg);
    manifest.git_revision = git_revision();
    for (k, v) in [
        ("steps", args.steps.to_string()),
        ("sessions", args.sessions.to_string()),
        ("runs", args.runs.to_string()),
    ] {
        manifest.extra.insert(k.into(), v);
    }
    write_json(&args.out.join(format!("manifest-{verb}.json")), &manifest)?;
    Ok(())
}

fn draw(cfg: &RunConfig, n: usize) -> anyhow::Result<Vec<dialogue_cmdp::Scenario>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(cfg.source(None)?.draw(n, &mut rng)?)
}

fn cmd_sample(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let scenarios = draw(cfg, args.sessions)?;
    let path = args.out.join("scenarios.jsonl");
    fresh(&path)?;
    let n = write_scenarios(&scenarios, &path)?;
    eprintln!("wrote {n} scenarios to {}", path.display());
    Ok(())
}

fn cmd_rollout(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let (policy, _) = args.policy(cfg)?;
    let scenarios = draw(cfg, args.sessions)?;
    let env = cfg.env();
    let simulator = cfg.simulator();
    let trajs = scenarios
        .par_iter()
        .map(|s| env.rollout(s, &policy, simulator.as_ref(), s.rng_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let path = args.out.join("trajectories.jsonl");
    fresh(&path)?;
    let n = write_trajectories(&trajs, &path)?;
    eprintln!("wrote {n} trajectories to {}", path.display());
    Ok(())
}

fn cmd_train(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt_path = args.out.join("checkpoint.json");
    let log_path = args.out.join("metrics.log");
    let steps_path = args.out.join("steps.jsonl");
    let resume = if args.resume {
        let ckpt = load_checkpoint(&ckpt_path, Some(&cfg.hash()))
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        log::info!("resuming at step {}", ckpt.state.step);
        Some(ckpt.state)
    } else {
        fresh(&log_path)?;
        fresh(&steps_path)?;
        let initial = TrainerState::initial(&cfg.train_settings(), initial_policy(cfg)?);
        save_checkpoint(&ckpt_path, &Checkpoint::new(cfg, initial))?;
        None
    };
    let outcome = pipeline::train(cfg, resume, args.steps, |rec, state| {
        append_log_lines(&log_path, &[rec.log_line()])?;
        append_records(&steps_path, std::slice::from_ref(rec))?;
        save_checkpoint(&ckpt_path, &Checkpoint::new(cfg, state.clone()))?;
        if rec.step % 10 == 0 {
            log::info!(
                "step {} lambda {:.3} v_rate {:.3} sat {:.3}",
                rec.step,
                rec.lambda,
                rec.v_rate,
                rec.mean_sat
            );
        }
        Ok(())
    })?;
    let w = cfg.final_window;
    eprintln!(
        "trained {} steps: final v_rate {:.4}, mean sat {:.4}, lambda {:.4}",
        outcome.records.len(),
        outcome.tail_mean(w, |r| r.v_rate),
        outcome.tail_mean(w, |r| r.mean_sat),
        outcome.state.lagrange.lambda
    );
    Ok(())
}

fn cmd_eval(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let (policy, _) = args.policy(cfg)?;
    let simulator = cfg.simulator();
    let spec = EvalSpec {
        n_sessions: args.sessions,
        runs: args.runs,
        seed: cfg.seed,
        fresh_seeds: true,
    };
    let report = evaluate(
        &policy,
        &cfg.source(None)?,
        cfg.env(),
        simulator.as_ref(),
        &ScriptedRubricJudge,
        &spec,
    )?;
    write_document(&args.out.join("report.json"), &report)?;
    let label = args
        .checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "initial".into());
    let table = render_table(&[(label.as_str(), &report)]);
    fs::write(args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_export_advantages(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let (policy, lambda) = args.policy(cfg)?;
    let lambda = match cfg.lambda_mode {
        LambdaModeName::Fixed => cfg.fixed_lambda,
        _ => lambda,
    };
    let scenarios = draw(cfg, cfg.update_batch / cfg.group_size)?;
    let simulator = cfg.simulator();
    let judge = cfg.judge();
    let principles = cfg.principle_set()?;
    let ctx = RolloutContext {
        env: cfg.env(),
        simulator: simulator.as_ref(),
        judge: judge.as_ref(),
        principles: cfg.process_reward.then_some(&principles),
        scale: cfg.scale(),
    };
    let groups = collect_groups(&ctx, &scenarios, &policy, cfg.group_size)?;
    let tables = batch_advantages(&groups, lambda, &cfg.cmpo())?;
    let path = args.out.join("advantages.jsonl");
    fresh(&path)?;
    let n = append_records(&path, &advantage_records(&groups, &tables))?;
    eprintln!("wrote {n} advantage records to {}", path.display());
    Ok(())
}

fn cmd_report(args: &Common, cfg: &RunConfig) -> anyhow::Result<()> {
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("metrics.log"));
    let entries: Vec<LogEntry> = read_metrics_log(&log_path)?;
    let lambdas: Vec<f64> = entries.iter().map(|e| e.lambda).collect();
    let rates: Vec<f64> = entries.iter().map(|e| e.v_rate).collect();
    let summary = dynamics_report(&lambdas, &rates, &cfg.dynamics()).map_err(Error::from)?;
    write_document(&args.out.join("dynamics.json"), &summary)?;
    let mut curves = String::from("step\tlambda\tv_rate\tj_c\tmean_sat\n");
    for e in &entries {
        curves.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.step, e.lambda, e.v_rate, e.j_c, e.mean_sat));
    }
    fs::write(args.out.join("curves.tsv"), curves)?;
    println!(
        "spikes {} settled_rate {:.4} settle_step {} peak_lambda {:.4}",
        summary.spike_count,
        summary.settled_rate,
        summary.settle_step.map_or("none".into(), |s| s.to_string()),
        summary.peak_lambda
    );
    Ok(())
}

/// Remove a previous output so reruns do not append to stale records.
fn fresh(path: &Path) -> anyhow::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            Err(anyhow!(e).context(format!("removing {}", path.display())))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (verb, args) = match &cli.command {
        Command::Sample(a) => ("sample", a),
        Command::Rollout(a) => ("rollout", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::ExportAdvantages(a) => ("export-advantages", a),
        Command::Report(a) => ("report", a),
    };
    let cfg = args.resolve_config()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(config_failure(anyhow!("--workers must be at least 1")));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::from(anyhow!(e)))?;
    write_manifest(verb, args, &cfg)?;
    pool.install(|| match &cli.command {
        Command::Sample(a) => cmd_sample(a, &cfg),
        Command::Rollout(a) => cmd_rollout(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::ExportAdvantages(a) => cmd_export_advantages(a, &cfg),
        Command::Report(a) => cmd_report(a, &cfg),
    })?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
