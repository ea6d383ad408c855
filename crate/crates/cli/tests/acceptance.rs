//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use dialogue_cmdp::cmpo::mini::{brute_force_constrained_optimum, exact_value, MiniMdp, MiniSource, ENUMERATION_BUDGET, MINI_SCALE};
use dialogue_cmdp::cmpo::{
    hybrid_advantages, normalize, raw_rewards, surrogate_from_samples, ActionTemplate, CmpoConfig, ScenarioSource,
    SoftmaxPolicy, StepRecord, Trainer, TurnSample,
};
use dialogue_cmdp::env::{parse_agent_output, AgentPolicy, EnvError, ScriptedSimulator};
use dialogue_cmdp::metrics::DynamicsSummary;
use dialogue_cmdp::pipeline::{self, late_mean_lambda};
use dialogue_cmdp::reward::ScriptedJudge;
use dialogue_cmdp::scenario::{sample_cooperativeness, Difficulty};
use dialogue_cmdp::store::{load_checkpoint, read_document, read_records, save_checkpoint, Checkpoint};
use dialogue_cmdp::{Env, PrincipleSet, RunConfig};

const STEPS: u64 = 200;

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, name, pass, detail }
}

fn config_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

/// Run the `cmpo` binary, panicking with its stderr on failure.
fn cmpo(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cmpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cmpo");
    assert!(
        out.status.success(),
        "cmpo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// `cmpo train` into `dir`, returning the step records and the spike count from `cmpo report`.
fn train_cli(dir: &Path, config: &str, flags: &[&str]) -> (Vec<StepRecord>, DynamicsSummary) {
    let out = dir.display().to_string();
    let steps = STEPS.to_string();
    let mut args = vec!["train", "--config", config, "--steps", &steps, "--out", &out];
    args.extend_from_slice(flags);
    cmpo(&args);
    cmpo(&["report", "--config", config, "--out", &out]);
    (
        read_records(&dir.join("steps.jsonl")).expect("step records"),
        read_document(&dir.join("dynamics.json")).expect("dynamics summary"),
    )
}

fn tail(records: &[StepRecord], f: impl Fn(&StepRecord) -> f64) -> f64 {
    pipeline::tail_mean(records, RunConfig::default().final_window, f)
}

/// Criteria 1–4 share the constrained default run and drive the command line.
fn dynamics_criteria() -> Vec<Verdict> {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| root.path().join(name);
    let delta = RunConfig::default().delta;

    let t0 = Instant::now();
    let (base, base_dyn) = train_cli(&dir("base"), "default", &[]);
    let elapsed = t0.elapsed();
    let late = late_mean_lambda(&base);
    let late_arg = late.to_string();
    let tight_cfg = config_path("delta20.toml");

    let ((frozen, fixed), (_, tight_dyn)) = std::thread::scope(|s| {
        let frozen = s.spawn(|| train_cli(&dir("frozen"), "default", &["--freeze-lambda"]).0);
        let fixed = s.spawn(|| train_cli(&dir("fixed"), "default", &["--fixed-lambda", &late_arg]).0);
        let tight = s.spawn(|| train_cli(&dir("tight"), &tight_cfg, &[]));
        (
            (frozen.join().unwrap(), fixed.join().unwrap()),
            tight.join().unwrap(),
        )
    });

    let v = tail(&base, |r| r.v_rate);
    let (lo, hi) = base
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.lambda), hi.max(r.lambda)));
    let c1 = base.len() == STEPS as usize
        && (0.25..=0.35).contains(&v)
        && lo >= 0.0
        && hi <= 5.0
        && elapsed < Duration::from_secs(300);

    let fv = tail(&frozen, |r| r.v_rate);
    let (fs, bs) = (tail(&frozen, |r| r.mean_sat), tail(&base, |r| r.mean_sat));
    let c2 = fv > 0.35 && fs >= bs;

    let xv = tail(&fixed, |r| r.v_rate);
    let fixed_held = fixed.iter().all(|r| r.lambda_used == late);
    let c3 = fixed_held && xv < delta - 0.03;

    let (spikes_30, spikes_20) = (base_dyn.spike_count, tight_dyn.spike_count);
    let c4 = spikes_30 == 1 && spikes_20 >= 2;

    vec![
        verdict(
            1,
            "constraint convergence",
            c1,
            format!("final-20 V-Rate {v:.4} (want [0.25, 0.35]), λ range [{lo:.3}, {hi:.3}], {:.1}s", elapsed.as_secs_f64()),
        ),
        verdict(
            2,
            "frozen-λ ablation direction",
            c2,
            format!("frozen V-Rate {fv:.4} (want > 0.35), Sat {fs:.4} vs constrained {bs:.4}"),
        ),
        verdict(
            3,
            "fixed-λ over-suppression",
            c3,
            format!("λ fixed at late mean {late:.4}: V-Rate {xv:.4} (want < {:.2})", delta - 0.03),
        ),
        verdict(
            4,
            "PID spike dynamics",
            c4,
            format!("spikes at δ=0.30: {spikes_30} (want 1), at δ=0.20: {spikes_20} (want ≥ 2)"),
        ),
    ]
}

/// CMPO on the enumerable mini MDP against the brute-force constrained optimum.
fn mini_oracle() -> Verdict {
    let mdp = MiniMdp::incentive_vs_rigid(0.5);
    let best = brute_force_constrained_optimum(&mdp, ENUMERATION_BUDGET).expect("oracle");
    let source = MiniSource { mdp: mdp.clone() };
    let sim = mdp.simulator();
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..5u64 {
        let mut s = RunConfig { seed, ..RunConfig::default() }.train_settings();
        s.env = mdp.env();
        s.scale = MINI_SCALE;
        s.use_process_reward = false;
        s.lagrange.delta = mdp.delta;
        let policy = SoftmaxPolicy::new(mdp.actions.clone(), 1.0).unwrap();
        let mut trainer = Trainer::new(s, &source, &sim, &ScriptedJudge, PrincipleSet::reference(), policy).unwrap();
        trainer.run(STEPS, |_, _| Ok(())).expect("mini training");
        let (jr, jc) = exact_value(&mdp, trainer.policy()).unwrap();
        let ok = jr >= 0.95 * best.best_jr && jc <= mdp.delta + 0.02;
        pass &= ok;
        rows.push(format!("{jr:.3}/{jc:.3}"));
    }
    verdict(
        5,
        "constrained-optimality oracle",
        pass,
        format!(
            "optimum J_R {:.3} at J_C {:.3}; per-seed J_R/J_C {}",
            best.best_jr,
            best.best_jc,
            rows.join(" ")
        ),
    )
}

fn random_policy(rng: &mut ChaCha8Rng, n_actions: usize, rows: usize, temperature: f64) -> SoftmaxPolicy {
    let templates: Vec<ActionTemplate> = ActionTemplate::standard_set().into_iter().take(n_actions).collect();
    let mut p = SoftmaxPolicy::new(templates, temperature).unwrap();
    for l in &mut p.logits_mut()[..rows * n_actions] {
        *l = rng.gen_range(-1.5..1.5);
    }
    p
}

/// Analytic surrogate gradient against central differences.
fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_actions = rng.gen_range(2..=5);
        let rows = rng.gen_range(1..=4);
        let temperature = rng.gen_range(0.5..2.0);
        let cfg = CmpoConfig {
            clip_eps: rng.gen_range(0.1..0.3),
            kl_beta: rng.gen_range(0.0..0.1),
            ..CmpoConfig::default()
        };
        let p = random_policy(&mut rng, n_actions, rows, temperature);
        let old = random_policy(&mut rng, n_actions, rows, temperature);
        let reference = random_policy(&mut rng, n_actions, rows, temperature);
        let samples: Vec<Vec<TurnSample>> = (0..rng.gen_range(1..=4))
            .map(|_| {
                (0..rng.gen_range(1..=5))
                    .map(|_| TurnSample {
                        feature: rng.gen_range(0..rows),
                        action: rng.gen_range(0..n_actions),
                        advantage: rng.gen_range(-2.0..2.0),
                    })
                    .collect()
            })
            .collect();
        let out = surrogate_from_samples(&samples, &p, &old, &reference, &cfg).unwrap();
        let loss_at = |k: usize, d: f64| {
            let mut q = p.clone();
            q.logits_mut()[k] += d;
            surrogate_from_samples(&samples, &q, &old, &reference, &cfg).unwrap().loss
        };
        let coords = rows * n_actions;
        let fd: Vec<f64> = (0..coords).map(|k| (loss_at(k, h) - loss_at(k, -h)) / (2.0 * h)).collect();
        let scale = fd
            .iter()
            .chain(&out.gradient[..coords])
            .fold(0.0f64, |m, g| m.max(g.abs()))
            .max(1e-12);
        let err = fd
            .iter()
            .zip(&out.gradient)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
        // Coordinates outside the visited rows must have exactly zero gradient.
        if out.gradient[coords..].iter().any(|&g| g != 0.0) {
            worst = f64::INFINITY;
        }
    }
    verdict(
        6,
        "surrogate gradient correctness",
        worst < 1e-6,
        format!("max relative error {worst:.2e} over 100 instances (want < 1e-6)"),
    )
}

fn dyadic(rng: &mut ChaCha8Rng, lo: i32, hi: i32, denom: f64) -> f64 {
    f64::from(rng.gen_range(lo..=hi)) / denom
}

/// Shift and scale invariance, constant groups and λ monotonicity, asserted exactly.
fn advantage_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scenario = RunConfig::default()
        .source(None)
        .unwrap()
        .draw(1, &mut rng)
        .unwrap()
        .remove(0);
    let cfg = CmpoConfig::default();
    let mut failures = Vec::new();
    for g in 0..1000 {
        let size = rng.gen_range(2..=6);
        let spec: Vec<(f64, Vec<(f64, u8)>)> = (0..size)
            .map(|_| {
                let len = rng.gen_range(1..=5);
                let voucher_at = rng.gen_bool(0.5).then(|| rng.gen_range(0..len));
                let turns = (0..len)
                    .map(|t| (dyadic(&mut rng, 0, 4, 4.0), u8::from(voucher_at == Some(t))))
                    .collect();
                (dyadic(&mut rng, 0, 8, 8.0), turns)
            })
            .collect();
        let lambda = dyadic(&mut rng, 0, 40, 8.0);
        let group = common::synthetic_group(&scenario, &spec);
        let base = hybrid_advantages(&group, lambda, &cfg).unwrap();
        let adv = |t: &dialogue_cmdp::cmpo::HybridAdvantageTable| -> Vec<f64> {
            t.entries.iter().flatten().map(|e| e.advantage).collect()
        };

        // Shift every reward by a constant.
        let c = dyadic(&mut rng, -16, 16, 4.0);
        let mut shifted = group.clone();
        shifted.breakdowns.iter_mut().for_each(|b| b.outcome += c);
        if adv(&hybrid_advantages(&shifted, lambda, &cfg).unwrap()) != adv(&base) {
            failures.push(format!("group {g}: shift by {c}"));
        }
        let raw: Vec<f64> = base.entries.iter().flatten().map(|e| e.raw).collect();
        let moved: Vec<f64> = raw.iter().map(|v| v + c).collect();
        if normalize(&moved, cfg.eps_norm).2 != normalize(&raw, cfg.eps_norm).2 {
            failures.push(format!("group {g}: normalize shift by {c}"));
        }

        // Scale every reward component, and λ, by a power of two.
        let k = [0.25, 0.5, 2.0, 4.0, 8.0][rng.gen_range(0..5)];
        let mut scaled = group.clone();
        for b in &mut scaled.breakdowns {
            b.outcome *= k;
            b.process.iter_mut().for_each(|p| *p *= k);
        }
        if adv(&hybrid_advantages(&scaled, lambda * k, &cfg).unwrap()) != adv(&base) {
            failures.push(format!("group {g}: scale by {k}"));
        }
        let stretched: Vec<f64> = raw.iter().map(|v| v * k).collect();
        if normalize(&stretched, cfg.eps_norm).2 != normalize(&raw, cfg.eps_norm).2 {
            failures.push(format!("group {g}: normalize scale by {k}"));
        }

        // A group whose every turn has the same raw reward.
        let r_o = dyadic(&mut rng, 0, 8, 8.0);
        let r_p = dyadic(&mut rng, 0, 4, 4.0);
        let flat: Vec<(f64, Vec<(f64, u8)>)> = (0..size)
            .map(|_| (r_o, vec![(r_p, 0); rng.gen_range(1..=5)]))
            .collect();
        let flat_table = hybrid_advantages(&common::synthetic_group(&scenario, &flat), lambda, &cfg).unwrap();
        if flat_table.entries.iter().flatten().any(|e| e.advantage != 0.0) {
            failures.push(format!("group {g}: constant group"));
        }

        // Raising λ lowers the raw reward of voucher turns by exactly the increase and nothing else.
        let bump = dyadic(&mut rng, 1, 16, 8.0);
        let lo = raw_rewards(&group, lambda, &cfg).unwrap();
        let hi = raw_rewards(&group, lambda + bump, &cfg).unwrap();
        for (a, b) in lo.iter().flatten().zip(hi.iter().flatten()) {
            let ok = if a.cost == 1 { b.raw < a.raw && a.raw - b.raw == bump } else { a.raw == b.raw };
            if !ok {
                failures.push(format!("group {g}: λ monotonicity"));
                break;
            }
        }
    }
    verdict(
        7,
        "advantage invariants",
        failures.is_empty(),
        if failures.is_empty() {
            "1000 groups, all exact".into()
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

/// Chi-square goodness of fit of sampled cooperativeness against the table weights.
fn sampler_fidelity() -> Verdict {
    let n = 100_000;
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(1.0 - 0.001);
    let mut parts = Vec::new();
    let mut pass = true;
    for (difficulty, expected) in [
        (Difficulty::Easy, [0.1, 0.2, 0.3, 0.3, 0.1]),
        (Difficulty::Hard, [0.1, 0.3, 0.25, 0.25, 0.1]),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0u64; 5];
        for _ in 0..n {
            counts[usize::from(sample_cooperativeness(difficulty, &mut rng)) - 1] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&o, p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        pass &= stat < critical;
        parts.push(format!("{difficulty:?} χ² {stat:.2}"));
    }
    verdict(
        8,
        "sampler fidelity",
        pass,
        format!("{} (critical {critical:.2}, n=100000 each)", parts.join(", ")),
    )
}

/// Drive one episode by hand and check that a finished episode absorbs further steps.
fn absorbs(env: &Env, scenario: &dialogue_cmdp::Scenario, policy: &dyn AgentPolicy, seed: u64) -> bool {
    let sim = ScriptedSimulator;
    let mut state = env.reset(scenario, &sim, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while !state.done {
        match parse_agent_output(&policy.act(&state, &mut rng).raw) {
            Ok(action) => {
                env.step(&mut state, action, &sim).unwrap();
            }
            Err(_) => return true,
        }
    }
    let before = state.clone();
    let again = parse_agent_output(&common::render(dialogue_cmdp::Decision::Voucher, "more")).unwrap();
    matches!(env.step(&mut state, again, &sim), Err(EnvError::EpisodeDone)) && state == before
}

/// Episode invariants over random scenarios, horizons and policies.
fn environment_invariants() -> Verdict {
    let source = RunConfig::default().source(None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scenarios = source.draw(10_000, &mut rng).unwrap();
    let failures: Vec<String> = scenarios
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let mut local = ChaCha8Rng::seed_from_u64(i as u64);
            let env = Env::new(local.gen_range(1..=15));
            let policy: Box<dyn AgentPolicy> = if i % 2 == 0 {
                Box::new(random_policy(&mut local, 5, dialogue_cmdp::cmpo::NUM_FEATURES, 1.0))
            } else {
                Box::new(common::RandomRaw)
            };
            let seed = local.gen();
            let a = env.rollout(s, policy.as_ref(), &ScriptedSimulator, seed).unwrap();
            let b = env.rollout(s, policy.as_ref(), &ScriptedSimulator, seed).unwrap();
            let terminated_once = a
                .turns
                .iter()
                .enumerate()
                .all(|(t, turn)| turn.reply.terminate == (t + 1 == a.turns.len()));
            let checks = [
                ("at most one voucher", a.total_cost() <= 1),
                ("length within t_max", a.turns.len() <= env.t_max),
                ("terminates exactly once", a.turns.is_empty() || terminated_once),
                ("deterministic", a == b),
                ("absorbing", absorbs(&env, s, policy.as_ref(), seed)),
            ];
            checks
                .iter()
                .find(|(_, ok)| !ok)
                .map(|(name, _)| format!("episode {i}: {name}"))
        })
        .collect();
    verdict(
        9,
        "environment invariants",
        failures.is_empty(),
        if failures.is_empty() {
            "10000 episodes clean".into()
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Checkpoint continuation equality, and identical command-line artifacts across reruns,
/// worker counts and a split-and-resumed run.
fn reproducibility() -> Verdict {
    let cfg = RunConfig::default();
    let straight = pipeline::train(&cfg, None, 60, |_, _| Ok(())).unwrap();
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("checkpoint.json");
    let first = pipeline::train(&cfg, None, 50, |_, _| Ok(())).unwrap();
    save_checkpoint(&path, &Checkpoint::new(&cfg, first.state)).unwrap();
    let restored = load_checkpoint(&path, Some(&cfg.hash())).unwrap();
    let resumed = pipeline::train(&cfg, Some(restored.state), 10, |_, _| Ok(())).unwrap();
    let lines = |r: &[StepRecord]| r.iter().map(|x| x.log_line()).collect::<Vec<_>>();
    let continuation = lines(&straight.records[50..]) == lines(&resumed.records);

    let dir = |name: &str| root.path().join(name).display().to_string();
    let (a, b, c, d) = (dir("a"), dir("b"), dir("c"), dir("d"));
    cmpo(&["train", "--steps", "10", "--workers", "1", "--out", &a]);
    cmpo(&["train", "--steps", "10", "--workers", "4", "--out", &b]);
    cmpo(&["train", "--steps", "10", "--workers", "1", "--out", &c]);
    cmpo(&["train", "--steps", "4", "--out", &d]);
    cmpo(&["train", "--steps", "6", "--resume", "--out", &d]);
    let artifacts = ["metrics.log", "steps.jsonl", "checkpoint.json"];
    let same = |x: &str, y: &str| {
        artifacts
            .iter()
            .all(|f| read(&Path::new(x).join(f)) == read(&Path::new(y).join(f)))
    };
    let rerun = same(&a, &c);
    let workers = same(&a, &b);
    let split = same(&a, &d);

    verdict(
        10,
        "reproducibility",
        continuation && rerun && workers && split,
        format!(
            "resume lines 51–60 identical: {continuation}; CLI artifacts identical on rerun: {rerun}, \
             across 1/4 workers: {workers}, after split+resume: {split}"
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut verdicts = dynamics_criteria();
    verdicts.push(mini_oracle());
    verdicts.push(gradient_check());
    verdicts.push(advantage_invariants());
    verdicts.push(sampler_fidelity());
    verdicts.push(environment_invariants());
    verdicts.push(reproducibility());
    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!(
            "criterion {:>2} {} {}: {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!(
        "\nacceptance: {passed}/{} criteria passed in {:.1}s",
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
