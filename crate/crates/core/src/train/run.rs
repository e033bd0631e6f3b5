use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{gae, RolloutBuffer, Transition};
use super::config::{TrainConfig, Variant};
use super::eval::{evaluate, EvalReport, EVAL_SEED_BASE};
use super::schedule::{clip_range, kl_budget};
use super::mix_seed;
use crate::error::{Error, Result};
use crate::policy::{features, loss_and_grads, smoothed_one_hot, FusionPolicyNet, LossReport, LossWeights, NetConfig};
use crate::risk::{self, RiskParams};
use crate::sim::{Event, Maneuver, Observation, ScenarioConfig, ScenarioState, TraceWriter};
use crate::teacher::{EpisodeStep, MemoryEntry, MemoryRepository, Outcome, Teacher, TeacherConfig, TeacherSnapshot};
use crate::tensor::{AdamConfig, Checkpoint};

pub const METRICS_HEADER: &str =
    "step,variant,scenario,success_rate,eval_reward,avg_speed,delta_ttcp,decision_time_s,seed";
pub const LOSS_HEADER: &str =
    "update,step,clip,sigma,labelled,policy_loss,value_loss,distill_loss,kl_value,kl_penalty,entropy,total";

const STATE_ENTRY: &str = "trainer/state";

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub risk: RiskParams,
    pub teacher: TeacherConfig,
    pub out_dir: PathBuf,
}

impl RunSpec {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            fusion: self.train.variant.fusion(),
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.risk.validate()?;
        if self.train.variant.uses_teacher() {
            self.teacher.validate()?;
        }
        Ok(())
    }
}

/// Counters carried across checkpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    pub global_step: u64,
    pub cycle: u64,
    pub evals: u64,
    pub updates: u64,
    pub episodes: u64,
    /// Decision steps taken inside the guidance window.
    pub window_decisions: u64,
    pub evals_at_checkpoint: u64,
}

impl TrainerState {
    fn to_vec(self) -> Vec<f64> {
        [
            self.global_step,
            self.cycle,
            self.evals,
            self.updates,
            self.episodes,
            self.window_decisions,
            self.evals_at_checkpoint,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 7 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Checkpoint("malformed trainer state entry".into()));
        }
        let u = |i: usize| v[i] as u64;
        Ok(Self {
            global_step: u(0),
            cycle: u(1),
            evals: u(2),
            updates: u(3),
            episodes: u(4),
            window_decisions: u(5),
            evals_at_checkpoint: u(6),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub state: TrainerState,
    /// Evaluations performed by this process (after the resume point, if any).
    pub evals: Vec<EvalReport>,
    pub teacher_queries: u64,
    pub reflections: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_csv: PathBuf,
}

impl RunSummary {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last()
    }
}

/// Appends lines to a CSV file, flushing each write.
struct CsvLog {
    file: File,
}

impl CsvLog {
    /// Creates `path` with `header`, or, when `keep` is given, keeps the
    /// existing rows it accepts and appends after them.
    fn open(path: &Path, header: &str, keep: Option<&dyn Fn(&str) -> bool>) -> Result<Self> {
        let mut lines = vec![header.to_string()];
        if let (Some(keep), true) = (keep, path.exists()) {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                if keep(&line) {
                    lines.push(line);
                }
            }
        }
        let mut body = lines.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io("csv log", e))
    }
}

fn leading_u64(line: &str) -> Option<u64> {
    line.split(',').next()?.parse().ok()
}

/// Per-episode bookkeeping during collection.
#[derive(Default)]
struct EpisodeLog {
    ret: f64,
    steps: Vec<EpisodeStep>,
    /// Every step so far was taken inside the guidance window.
    in_window: bool,
}

pub struct Trainer {
    spec: RunSpec,
    net: FusionPolicyNet,
    teacher: Option<Teacher>,
    adam: AdamConfig,
    state: TrainerState,
    buffer: RolloutBuffer,
    evals: Vec<EvalReport>,
    checkpoints: Vec<PathBuf>,
    metrics: CsvLog,
    losses: CsvLog,
}

impl Trainer {
    pub fn new(spec: RunSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    /// Continues a run from a checkpoint written by [`Trainer::run`]. Rows in
    /// the output CSVs past the checkpoint are discarded.
    pub fn resume(spec: RunSpec, checkpoint: &Path) -> Result<Self> {
        Self::build(spec, Some(checkpoint))
    }

    fn build(spec: RunSpec, resume: Option<&Path>) -> Result<Self> {
        spec.validate()?;
        fs::create_dir_all(spec.out_dir.join("checkpoints")).map_err(|e| Error::io(&spec.out_dir, e))?;
        let tc = &spec.train;
        let mut net = FusionPolicyNet::new(spec.net_config(), mix_seed(tc.seed, u64::MAX, 0))?;
        let mut teacher = if tc.variant.uses_teacher() {
            Some(Teacher::from_config(&spec.teacher, spec.risk)?)
        } else {
            None
        };
        let mut state = TrainerState::default();
        if let Some(path) = resume {
            let ckpt = Checkpoint::load(path)?;
            net.load_checkpoint(&ckpt)?;
            let entry = ckpt
                .get(STATE_ENTRY)
                .ok_or_else(|| Error::Checkpoint(format!("{}: no trainer state", path.display())))?;
            state = TrainerState::from_slice(&entry.data)?;
            if let Some(t) = teacher.as_mut() {
                let mem = sidecar(path, "memory.json");
                *t.memory_mut() = MemoryRepository::load(&mem)?;
                let snap = sidecar(path, "teacher.json");
                let text = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
                let snap: TeacherSnapshot =
                    serde_json::from_str(&text).map_err(|e| Error::parse(snap.display().to_string(), e))?;
                t.restore(snap);
            }
        }
        let step = state.global_step;
        let updates = state.updates;
        let keep_metrics = move |l: &str| leading_u64(l).is_some_and(|s| s <= step);
        let keep_losses = move |l: &str| leading_u64(l).is_some_and(|u| u < updates);
        let resuming = resume.is_some();
        let metrics = CsvLog::open(
            &spec.out_dir.join("metrics.csv"),
            METRICS_HEADER,
            resuming.then_some(&keep_metrics as &dyn Fn(&str) -> bool),
        )?;
        let losses = CsvLog::open(
            &spec.out_dir.join("losses.csv"),
            LOSS_HEADER,
            resuming.then_some(&keep_losses as &dyn Fn(&str) -> bool),
        )?;
        Ok(Self {
            adam: AdamConfig {
                lr: tc.lr,
                ..AdamConfig::default()
            },
            buffer: RolloutBuffer::new(tc.rollout_size),
            spec,
            net,
            teacher,
            state,
            evals: Vec::new(),
            checkpoints: Vec::new(),
            metrics,
            losses,
        })
    }

    pub fn net(&self) -> &FusionPolicyNet {
        &self.net
    }

    pub fn state(&self) -> TrainerState {
        self.state
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    /// Runs until `total_steps` decision steps have been collected.
    pub fn run(mut self) -> Result<RunSummary> {
        let total = self.spec.train.total_steps;
        while self.state.global_step < total {
            self.cycle()?;
        }
        self.finish()
    }

    /// Runs at most `cycles` collect/update cycles, then stops without the
    /// final checkpoint (simulates an interrupted run).
    pub fn run_cycles(mut self, cycles: u64) -> Result<TrainerState> {
        for _ in 0..cycles {
            if self.state.global_step >= self.spec.train.total_steps {
                break;
            }
            self.cycle()?;
        }
        Ok(self.state)
    }

    /// One collect/update cycle.
    fn cycle(&mut self) -> Result<()> {
        let tc = &self.spec.train;
        let n = (tc.rollout_size as u64).min(tc.total_steps - self.state.global_step) as usize;
        let start = self.state.global_step;
        self.collect(n)?;
        self.update(start)?;
        self.state.cycle += 1;
        if self.state.evals >= self.state.evals_at_checkpoint + self.spec.train.checkpoint_every_evals {
            self.state.evals_at_checkpoint = self.state.evals;
            let name = format!("step_{:08}.ckpt", self.state.global_step);
            self.save_checkpoint(&name)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunSummary> {
        self.save_checkpoint("final.ckpt")?;
        if self.spec.train.trace_final_eval {
            let path = self.spec.out_dir.join("episodes.jsonl");
            let mut w = TraceWriter::create(&path)?;
            evaluate(
                &self.net,
                &self.spec.scenario,
                &self.spec.risk,
                self.spec.train.eval_episodes,
                EVAL_SEED_BASE,
                self.state.global_step,
                Some(&mut w),
            )?;
            w.finish()?;
        }
        if let Some(t) = &self.teacher {
            if let Some(p) = &self.spec.teacher.memory_file {
                t.save_memory(p)?;
            }
        }
        Ok(RunSummary {
            variant: self.spec.train.variant,
            seed: self.spec.train.seed,
            state: self.state,
            evals: self.evals,
            teacher_queries: self.teacher.as_ref().map_or(0, Teacher::queries),
            reflections: self.teacher.as_ref().map_or(0, Teacher::reflections),
            checkpoints: self.checkpoints,
            metrics_csv: self.spec.out_dir.join("metrics.csv"),
        })
    }

    fn save_checkpoint(&mut self, name: &str) -> Result<()> {
        let path = self.spec.out_dir.join("checkpoints").join(name);
        let mut ckpt = self.net.checkpoint(true);
        let sv = self.state.to_vec();
        ckpt.push(STATE_ENTRY, vec![sv.len()], sv);
        ckpt.save(&path)?;
        if let Some(t) = &self.teacher {
            t.save_memory(&sidecar(&path, "memory.json"))?;
            let snap = sidecar(&path, "teacher.json");
            let text = serde_json::to_string_pretty(&t.snapshot()).expect("snapshot serialises");
            fs::write(&snap, text).map_err(|e| Error::io(&snap, e))?;
        }
        log::info!("checkpoint {}", path.display());
        self.checkpoints.push(path);
        Ok(())
    }

    fn reset_env(&self, episode: u64) -> Result<(ScenarioState, Observation)> {
        let seed = mix_seed(self.spec.train.seed, self.state.cycle, 2 + episode);
        let (mut env, obs) = ScenarioState::reset(&self.spec.scenario, seed)?;
        env.set_risk_params(self.spec.risk);
        Ok((env, obs))
    }

    fn collect(&mut self, n: usize) -> Result<()> {
        let tc = self.spec.train.clone();
        let window = tc.window_steps();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, self.state.cycle, 0));
        let mut episode = 0u64;
        let (mut env, mut obs) = self.reset_env(episode)?;
        let mut log = EpisodeLog {
            in_window: true,
            ..Default::default()
        };
        for _ in 0..n {
            let input = features(&obs);
            let out = self.net.forward(&input)?;
            let action = sample(&out.pi, &mut rng);
            let maneuver = Maneuver::from_index(action).expect("sampled index < ACTIONS");
            let in_window = self.state.global_step < window;
            log.in_window &= in_window;
            if in_window {
                self.state.window_decisions += 1;
            }
            let guidance = match self.teacher.as_mut() {
                Some(t) if in_window => Some(t.query(&env)),
                _ => None,
            };
            let speed_before = env.ego().speed;
            let o = env
                .step(maneuver)
                .map_err(|e| Error::Environment(format!("rollout step {}: {e}", self.state.global_step)))?;
            log.ret += o.reward;
            if let Some(g) = &guidance {
                log.steps.push(EpisodeStep {
                    z: g.z.clone(),
                    action: maneuver,
                    tau_min_before: g.tau_min,
                    ego_speed: speed_before,
                    omega: risk::omega_of_outcome(&o, &self.spec.risk),
                    events: o.events.clone(),
                });
            }
            let teacher_action = guidance.as_ref().map(|g| g.decision.action.index());
            self.buffer.push(Transition {
                input,
                next_input: features(&o.observation),
                action,
                log_prob: out.pi[action].max(f64::MIN_POSITIVE).ln(),
                value: out.v,
                reward: o.reward,
                done: o.done,
                episode_end: o.done,
                teacher_pi: teacher_action.map(|a| smoothed_one_hot(a, tc.teacher_smoothing)),
                teacher_action,
            });
            self.state.global_step += 1;
            if self.state.global_step % tc.eval_interval == 0 {
                self.evaluate_now()?;
            }
            if o.done {
                self.state.episodes += 1;
                self.end_episode(std::mem::take(&mut log), &o.events)?;
                log.in_window = true;
                episode += 1;
                (env, obs) = self.reset_env(episode)?;
            } else {
                obs = o.observation;
            }
        }
        self.buffer.close_episode();
        Ok(())
    }

    /// Stores the episode in teacher memory and reflects on it when risky.
    /// Only episodes that ran entirely inside the window are used, so the
    /// backend is never contacted after the window closes.
    fn end_episode(&mut self, log: EpisodeLog, events: &[Event]) -> Result<()> {
        let Some(t) = self.teacher.as_mut() else {
            return Ok(());
        };
        if !log.in_window || log.steps.is_empty() {
            return Ok(());
        }
        let outcome = if events.contains(&Event::Success) {
            Outcome::Success
        } else if events.contains(&Event::Collision) {
            Outcome::Collision
        } else {
            Outcome::Other
        };
        let critical = log
            .steps
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if s.tau_min_before < log.steps[b].tau_min_before { i } else { b });
        t.remember(MemoryEntry {
            z: log.steps[critical].z.clone(),
            scenario_kind: self.spec.scenario.kind,
            action: log.steps[critical].action,
            outcome,
            ret: log.ret,
            lesson: String::new(),
            constraints: Vec::new(),
        });
        if self.spec.teacher.reflection {
            t.reflect_on_episode(self.spec.scenario.kind, &log.steps, outcome, log.ret);
        }
        Ok(())
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let tc = &self.spec.train;
        let r = evaluate(
            &self.net,
            &self.spec.scenario,
            &self.spec.risk,
            tc.eval_episodes,
            EVAL_SEED_BASE,
            self.state.global_step,
            None,
        )?;
        let timing = if tc.log_timing {
            r.decision_time.to_string()
        } else {
            String::new()
        };
        self.metrics.row(&format!(
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            tc.variant,
            self.spec.scenario.kind,
            r.success_rate,
            r.eval_reward,
            r.avg_speed,
            r.delta_ttcp,
            timing,
            tc.seed
        ))?;
        log::info!(
            "step {} success {:.2} return {:.3} speed {:.2}",
            r.step,
            r.success_rate,
            r.eval_reward,
            r.avg_speed
        );
        self.state.evals += 1;
        self.evals.push(r);
        Ok(())
    }

    fn update(&mut self, rollout_start: u64) -> Result<()> {
        let tc = self.spec.train.clone();
        let items = self.buffer.items();
        let n = items.len();
        let next_inputs: Vec<f64> = items.iter().flat_map(|t| t.next_input.iter().copied()).collect();
        // Frozen copy of the critic for this update: V_g(s').
        let next_values = self.net.values(&next_inputs)?;
        let values: Vec<f64> = items.iter().map(|t| t.value).collect();
        let rewards: Vec<f64> = items.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = items.iter().map(|t| t.done).collect();
        let ends: Vec<bool> = items.iter().map(|t| t.episode_end).collect();
        let (adv, ret) = gae(&rewards, &values, &next_values, &dones, &ends, tc.gamma, tc.gae_lambda);

        let progress = rollout_start as f64 / tc.total_steps as f64;
        let clip = clip_range(progress, tc.clip_initial, tc.clip_floor);
        let sigma = kl_budget(rollout_start, tc.window_steps(), tc.sigma_initial, tc.sigma_final);
        let labelled = self.buffer.labelled();
        let weights = LossWeights {
            c_v: tc.value_coef,
            c_d: if labelled > 0 { tc.distill_coef } else { 0.0 },
            c_e: tc.entropy_coef,
            lambda: if sigma.is_some() { tc.kl_lambda } else { 0.0 },
            sigma: sigma.unwrap_or(0.0),
            clip,
            gamma: tc.gamma,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, self.state.cycle, 1));
        let mut idx: Vec<usize> = (0..n).collect();
        let mut sum = LossReport::default();
        let mut count = 0usize;
        for _ in 0..tc.epochs {
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(tc.batch_size) {
                let batch = self.buffer.batch(chunk, &adv, &ret, &next_values);
                let (rep, grads) = loss_and_grads(&self.net, &batch, &weights)?;
                let store = self.net.store_mut();
                store.zero_grad();
                store.accumulate(&grads);
                if tc.max_grad_norm > 0.0 {
                    store.clip_grad_norm(tc.max_grad_norm);
                }
                store.adam_step(&self.adam);
                add_report(&mut sum, &rep);
                count += 1;
            }
        }
        let k = count.max(1) as f64;
        self.losses.row(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.state.updates,
            self.state.global_step,
            clip,
            sigma.map_or(String::new(), |s| s.to_string()),
            labelled,
            sum.policy_loss / k,
            sum.value_loss / k,
            sum.distill_loss / k,
            sum.kl_value / k,
            sum.kl_penalty / k,
            sum.entropy / k,
            sum.total / k
        ))?;
        self.state.updates += 1;
        self.buffer.clear();
        Ok(())
    }
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.policy_loss += r.policy_loss;
    acc.value_loss += r.value_loss;
    acc.distill_loss += r.distill_loss;
    acc.kl_value += r.kl_value;
    acc.kl_penalty += r.kl_penalty;
    acc.entropy += r.entropy;
    acc.total += r.total;
}

fn sample(pi: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut c = 0.0;
    for (i, p) in pi.iter().enumerate() {
        c += p;
        if u < c {
            return i;
        }
    }
    pi.len() - 1
}

/// `<ckpt path>.<suffix>`, e.g. `final.ckpt.memory.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
