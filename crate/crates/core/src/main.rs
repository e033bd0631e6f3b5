use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use telldrive::config::{GlobalConfig, Preset};
use telldrive::policy::FusionPolicyNet;
use telldrive::sim::{ScenarioKind, ScenarioState, TraceRecord};
use telldrive::teacher::{ChatBackend, RecordingBackend, ReplayBackend, Teacher, TeacherStep};
use telldrive::tensor::Checkpoint;
use telldrive::train::{evaluate, run_ablation, AblationSpec, Trainer, Variant, EVAL_SEED_BASE, METRICS_HEADER};
use telldrive::Error;

#[derive(Parser)]
#[command(name = "telldrive", version, about = "Teacher-guided attention PPO for driving decisions")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// merge-lite | merge | highway | intersection
    #[arg(long)]
    preset: Option<Preset>,
    /// Replace the scenario block with this scenario's defaults.
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// v-ppo | a-ppo | la-ppo
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.total_steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> telldrive::Result<GlobalConfig> {
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("train.seed={s}"));
        }
        if let Some(v) = self.variant {
            sets.push(format!("train.variant=\"{v}\""));
        }
        if let Some(o) = &self.out {
            sets.push(format!("out_dir={}", toml_str(&o.display().to_string())));
        }
        GlobalConfig::resolve(self.config.as_deref(), self.preset, self.scenario, &sets)
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, losses, traces and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint greedily.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Query the teacher on recorded states or a live episode.
    Teacher {
        #[command(flatten)]
        common: Common,
        /// Episode JSONL file; every record is queried.
        #[arg(long, conflicts_with = "live")]
        state: Option<PathBuf>,
        /// Drive a fresh episode with teacher decisions for N steps.
        #[arg(long)]
        live: Option<usize>,
        /// Write the backend transcript to this JSONL file.
        #[arg(long, conflicts_with = "replay")]
        record: Option<PathBuf>,
        /// Answer from a recorded transcript instead of the configured backend.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Print the full prompt for each decision.
        #[arg(long)]
        verbose: bool,
    },
    /// Train every variant on shared seeds and summarise.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

/// Exit status: 0 ok, 1 runtime failure, 2 configuration or input, 3
/// artifact mismatch.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::Usage(_) => 2,
        Error::Checkpoint(_) | Error::Architecture { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => cmd_eval(&common, &checkpoint, episodes),
        Command::Teacher {
            common,
            state,
            live,
            record,
            replay,
            verbose,
        } => cmd_teacher(&common, state.as_deref(), live, record.as_deref(), replay.as_deref(), verbose),
        Command::Ablate { common, seeds } => cmd_ablate(&common, seeds),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> telldrive::Result<u8> {
    let cfg = common.resolve()?;
    cfg.dump()?;
    let spec = cfg.run_spec();
    let trainer = match resume {
        Some(p) => Trainer::resume(spec, p)?,
        None => Trainer::new(spec)?,
    };
    let summary = trainer.run()?;
    if let Some(r) = summary.final_eval() {
        println!(
            "{} {} seed {}: step {} success {:.2} return {:.3} speed {:.2} m/s dTTCP {:.3} s decision {:.2e} s",
            summary.variant,
            cfg.scenario.kind,
            summary.seed,
            r.step,
            r.success_rate,
            r.eval_reward,
            r.avg_speed,
            r.delta_ttcp,
            r.decision_time
        );
    }
    if summary.teacher_queries > 0 {
        println!(
            "teacher queries {} over {} window decisions, {} reflections",
            summary.teacher_queries, summary.state.window_decisions, summary.reflections
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(0)
}

fn cmd_eval(common: &Common, checkpoint: &Path, episodes: usize) -> telldrive::Result<u8> {
    let cfg = common.resolve()?;
    let spec = cfg.run_spec();
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut net = FusionPolicyNet::new(spec.net_config(), 0)?;
    net.load_checkpoint(&ckpt)?;
    let seed_base = EVAL_SEED_BASE + common.seed.unwrap_or(0).wrapping_mul(10_000);
    let r = evaluate(&net, &cfg.scenario, &cfg.risk, episodes, seed_base, 0, None)?;
    println!(
        "success {:.4} return {:.6} speed {:.4} m/s dTTCP {:.4} s over {} episodes",
        r.success_rate, r.eval_reward, r.avg_speed, r.delta_ttcp, episodes
    );
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("eval.csv");
    let timing = if cfg.train.log_timing {
        r.decision_time.to_string()
    } else {
        String::new()
    };
    let row = format!(
        "{METRICS_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
        r.step,
        cfg.train.variant,
        cfg.scenario.kind,
        r.success_rate,
        r.eval_reward,
        r.avg_speed,
        r.delta_ttcp,
        timing,
        cfg.train.seed
    );
    std::fs::write(&path, row).map_err(|e| Error::io(&path, e))?;
    Ok(0)
}

fn print_step(label: &str, s: &TeacherStep, verbose: bool) {
    println!(
        "{label}: action={} source={:?} tau_min={:.2} rationale={}",
        s.decision.action,
        s.decision.source,
        s.tau_min,
        s.decision.rationale.replace('\n', " ")
    );
    if verbose {
        println!("--- system ---\n{}\n--- user ---\n{}\n", s.prompt.system, s.prompt.user);
    }
}

fn cmd_teacher(
    common: &Common,
    state: Option<&Path>,
    live: Option<usize>,
    record: Option<&Path>,
    replay: Option<&Path>,
    verbose: bool,
) -> telldrive::Result<u8> {
    let cfg = common.resolve()?;
    let mut teacher = Teacher::from_config(&cfg.teacher, cfg.risk)?;
    if let Some(p) = replay {
        teacher = teacher.with_backend(Box::new(ReplayBackend::load(p)?));
    } else if let Some(p) = record {
        let inner: Box<dyn ChatBackend> = cfg.teacher.build_backend()?;
        teacher = teacher.with_backend(Box::new(RecordingBackend::new(inner, p)?));
    }
    match (state, live) {
        (Some(path), _) => {
            let records = TraceRecord::read_jsonl(path)?;
            if records.is_empty() {
                return Err(Error::Usage(format!("{}: no records", path.display())));
            }
            for (i, rec) in records.iter().enumerate() {
                let mut sc = cfg.scenario.clone();
                sc.kind = rec.scenario;
                let env = ScenarioState::from_record(&sc, rec)
                    .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))?;
                let step = teacher.query(&env);
                print_step(&format!("record {} t={}", i + 1, rec.t), &step, verbose);
            }
        }
        (None, Some(n)) => {
            let (mut env, _) = ScenarioState::reset(&cfg.scenario, cfg.train.seed)?;
            env.set_risk_params(cfg.risk);
            for _ in 0..n {
                let step = teacher.query(&env);
                print_step(&format!("t={}", env.decision_step()), &step, verbose);
                let out = env.step(step.decision.action)?;
                if out.done {
                    println!("episode ended: {:?}", out.events);
                    break;
                }
            }
        }
        (None, None) => return Err(Error::Usage("teacher needs --state FILE or --live N".into())),
    }
    Ok(0)
}

fn cmd_ablate(common: &Common, seeds: Vec<u64>) -> telldrive::Result<u8> {
    let cfg = common.resolve()?;
    cfg.dump()?;
    let variants = match common.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let result = run_ablation(&AblationSpec {
        base: cfg.run_spec(),
        variants,
        seeds,
    })?;
    let md = std::fs::read_to_string(&result.summary_md).map_err(|e| Error::io(&result.summary_md, e))?;
    println!("{md}");
    println!("combined metrics: {}", result.combined_csv.display());
    Ok(if result.failures.is_empty() { 0 } else { 1 })
}
