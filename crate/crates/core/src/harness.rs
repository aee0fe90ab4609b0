//! Experiment plumbing: collect play, fit dynamics, train the prior, evaluate
//! agents across budgets.
//!
//! Every episode `i` of a run with master seed `s` is seeded with `s + i`, so a
//! single episode can be replayed on its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dynamics::{estimate_dynamics, EstimatedDynamics, FitOptions};
use crate::env::{
    read_frames, read_log, run_episode, write_frames, write_log, Action, Env, EnvConfig,
    FrameHistory, SimRng, TrajectoryLog,
};
use crate::error::{Error, Result};
use crate::planner::{get_action, Budget, DirichletParams, ForwardModel, PlannerConfig};
use crate::prior::{build_dataset, sgd_fit, CnnParams, TrainConfig, TrainOutcome};

const PLANNER_STREAM: u64 = 1;
const POLICY_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "pb-cnn")]
    PbCnn,
    #[serde(rename = "pb-uniform")]
    PbUniform,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::PbCnn => "pb-cnn",
            AgentKind::PbUniform => "pb-uniform",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pb-cnn" => Ok(AgentKind::PbCnn),
            "pb-uniform" => Ok(AgentKind::PbUniform),
            _ => Err(Error::Config(format!(
                "unknown agent `{s}` (expected pb-cnn or pb-uniform)"
            ))),
        }
    }
}

/// How `collect` chooses actions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CollectPolicy {
    /// Flap with probability `p_flap` each tick, independently.
    Random { p_flap: f64 },
    /// The planner under a uniform prior with the configured budget.
    Planner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub agent_kind: AgentKind,
    pub episodes_per_eval: usize,
    pub max_ticks_per_episode: u64,
    /// Plan with the environment's true physics instead of the fitted model.
    pub ground_truth_dynamics: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub logs_path: Option<PathBuf>,
    pub dynamics_path: Option<PathBuf>,
    pub weights_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvConfig::default(),
            planner: PlannerConfig::default(),
            train: TrainConfig::default(),
            agent_kind: AgentKind::PbUniform,
            episodes_per_eval: 10,
            max_ticks_per_episode: 2000,
            ground_truth_dynamics: false,
            seed: 0,
            out_dir: PathBuf::from("out"),
            logs_path: None,
            dynamics_path: None,
            weights_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "experiment config".into(),
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.planner.validate()?;
        self.train.validate()?;
        if self.episodes_per_eval == 0 {
            return Err(Error::Config("episodes_per_eval must be at least 1".into()));
        }
        if self.max_ticks_per_episode == 0 {
            return Err(Error::Config("max_ticks_per_episode must be positive".into()));
        }
        Ok(())
    }
}

fn episode_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run `f(0..n)` on up to `threads` workers; results come back in index order.
fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect()
}

/// Worker count from `IPP_THREADS`, defaulting to the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("IPP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Play `episodes` logged games. `dynamics` is only used by the planner policy.
pub fn collect(
    cfg: &ExperimentConfig,
    episodes: usize,
    policy: CollectPolicy,
    dynamics: &EstimatedDynamics,
    threads: usize,
) -> Result<Vec<TrajectoryLog>> {
    if episodes == 0 {
        return Err(Error::Config("collect needs at least one episode".into()));
    }
    if let CollectPolicy::Random { p_flap } = policy {
        if !(0.0..=1.0).contains(&p_flap) {
            return Err(Error::Config(format!("flap probability {p_flap} outside [0, 1]")));
        }
    }
    cfg.validate()?;
    let uniform = DirichletParams::uniform();
    par_map(episodes, threads, |i| {
        let seed = cfg.seed.wrapping_add(i as u64);
        let env = EnvConfig {
            rng_seed: seed,
            ..cfg.env.clone()
        };
        let model = ForwardModel {
            env: &cfg.env,
            dynamics,
        };
        let mut err = None;
        let log = match policy {
            CollectPolicy::Random { p_flap } => {
                let mut rng = episode_rng(seed, POLICY_STREAM);
                run_episode(
                    &env,
                    |_, _| {
                        if rng.gen::<f64>() < p_flap {
                            Action::Flap
                        } else {
                            Action::Noop
                        }
                    },
                    cfg.max_ticks_per_episode,
                )?
            }
            CollectPolicy::Planner => {
                let mut rng = planner_rng(cfg, seed);
                run_episode(
                    &env,
                    |s, _| match get_action(s, &uniform, &cfg.planner, model, &mut rng) {
                        Ok((a, _)) => a,
                        Err(e) => {
                            err.get_or_insert(e);
                            Action::Noop
                        }
                    },
                    cfg.max_ticks_per_episode,
                )?
            }
        };
        match err {
            Some(e) => Err(e),
            None => Ok(log),
        }
    })
    .into_iter()
    .collect()
}

fn planner_rng(cfg: &ExperimentConfig, episode_seed: u64) -> SimRng {
    episode_rng(
        episode_seed ^ cfg.planner.rng_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        PLANNER_STREAM,
    )
}

/// Episodes per directory are `episode_NNNN.jsonl` with an `episode_NNNN.frames` sidecar.
pub fn write_logs(dir: &Path, logs: &[TrajectoryLog]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, log) in logs.iter().enumerate() {
        write_log(&dir.join(format!("episode_{i:04}.jsonl")), &log.records)?;
        write_frames(&dir.join(format!("episode_{i:04}.frames")), &log.frames)?;
    }
    Ok(())
}

/// Read one log file (plus sidecar, if present) or every `*.jsonl` in a
/// directory, in file-name order.
pub fn read_logs(path: &Path) -> Result<Vec<TrajectoryLog>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "trajectory logs".into(),
            path: path.to_path_buf(),
        });
    }
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
        files.sort();
        if files.is_empty() {
            return Err(Error::MissingArtifact {
                what: "trajectory logs (*.jsonl)".into(),
                path: path.to_path_buf(),
            });
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let records = read_log(f)?;
            let sidecar = f.with_extension("frames");
            let frames = if sidecar.exists() {
                read_frames(&sidecar)?
            } else {
                Vec::new()
            };
            let final_score = records.iter().filter(|r| r.reward > 0).map(|r| r.reward as u64).sum();
            let log = TrajectoryLog {
                records,
                frames,
                final_score,
            };
            log.validate()?;
            Ok(log)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollectSummary {
    pub episodes: usize,
    pub ticks: usize,
    pub mean_score: f64,
}

pub fn summarize(logs: &[TrajectoryLog]) -> CollectSummary {
    let scores: Vec<f64> = logs.iter().map(|l| l.final_score as f64).collect();
    CollectSummary {
        episodes: logs.len(),
        ticks: logs.iter().map(|l| l.len()).sum(),
        mean_score: mean(&scores),
    }
}

/// Fit dynamics from logs, ignoring transitions clamped at terminal velocity.
pub fn estimate(logs: &[TrajectoryLog], env: &EnvConfig) -> Result<EstimatedDynamics> {
    let records: Vec<_> = logs.iter().map(|l| l.records.clone()).collect();
    estimate_dynamics(
        &records,
        &FitOptions {
            terminal_velocity: Some(env.terminal_velocity),
            ..Default::default()
        },
    )
}

/// Build the Δ-window dataset and fit a freshly initialised network.
pub fn train_prior(logs: &[TrajectoryLog], train: &TrainConfig) -> Result<TrainOutcome<f32>> {
    train.validate()?;
    let ticks: usize = logs.iter().map(|l| l.len()).sum();
    if ticks < train.delta_window + 1 {
        return Err(Error::InsufficientObservations(format!(
            "{ticks} logged ticks, need at least {}",
            train.delta_window + 1
        )));
    }
    let data = build_dataset(logs, train.delta_window)?;
    if data.is_empty() {
        return Err(Error::InsufficientObservations(
            "no training windows left after dropping negative-reward windows".into(),
        ));
    }
    let init = CnnParams::<f32>::init(Action::COUNT, train.alpha_floor, train.rng_seed);
    sgd_fit(&init, &data, train)
}

pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in history.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The dynamics an agent plans with: fitted from disk, or the true physics.
pub fn planning_dynamics(cfg: &ExperimentConfig) -> Result<EstimatedDynamics> {
    if cfg.ground_truth_dynamics {
        return Ok(EstimatedDynamics::ground_truth(&cfg.env));
    }
    let path = cfg.dynamics_path.as_ref().ok_or_else(|| Error::MissingArtifact {
        what: "dynamics JSON (set dynamics_path or --dynamics)".into(),
        path: PathBuf::new(),
    })?;
    EstimatedDynamics::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub agent: AgentKind,
    pub budget_kind: String,
    pub budget: f64,
    pub seed: u64,
    pub scores: Vec<u64>,
    pub mean_score: f64,
    /// Sample standard deviation of `scores` (0 for a single episode).
    pub std: f64,
    pub decisions: u64,
    /// Planner wall-clock per decision, prior evaluation excluded.
    pub latency_mean_ms: f64,
    pub latency_p95_ms: f64,
    /// CNN forward time per decision (0 for the uniform prior).
    pub prior_latency_mean_ms: f64,
}

impl EvalResult {
    pub fn row(&self) -> ResultRow {
        ResultRow {
            agent: self.agent,
            budget_kind: self.budget_kind.clone(),
            budget: self.budget,
            mean_score: self.mean_score,
            std: self.std,
            seed: self.seed,
        }
    }
}

/// One line of an eval or sweep CSV. Timing is left out so rows are
/// reproducible under a sample budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub agent: AgentKind,
    pub budget_kind: String,
    pub budget: f64,
    pub mean_score: f64,
    pub std: f64,
    pub seed: u64,
}

pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["agent", "budget_kind", "budget", "mean_score", "std", "seed"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

struct EpisodeOutcome {
    score: u64,
    latencies_ms: Vec<f64>,
    prior_ms: f64,
}

fn play_episode(
    cfg: &ExperimentConfig,
    planner: &PlannerConfig,
    dynamics: &EstimatedDynamics,
    prior: Option<&CnnParams<f32>>,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let mut env = Env::new(EnvConfig {
        rng_seed: seed,
        ..cfg.env.clone()
    })?;
    let model = ForwardModel {
        env: &cfg.env,
        dynamics,
    };
    let mut rng = planner_rng(cfg, seed);
    let mut history = FrameHistory::new();
    let uniform = DirichletParams::uniform();
    let mut latencies_ms = Vec::new();
    let mut prior_ms = 0.0;
    while env.state().alive && (latencies_ms.len() as u64) < cfg.max_ticks_per_episode {
        let s = env.state();
        let alpha = match prior {
            Some(kappa) => {
                let t0 = Instant::now();
                history.observe(s, &cfg.env);
                let alpha = kappa.forward(&history.stack()?)?;
                prior_ms += t0.elapsed().as_secs_f64() * 1e3;
                alpha
            }
            None => uniform.clone(),
        };
        let t0 = Instant::now();
        let (action, _) = get_action(s, &alpha, planner, model, &mut rng)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        env.step(action)?;
    }
    Ok(EpisodeOutcome {
        score: env.state().score,
        latencies_ms,
        prior_ms,
    })
}

/// Play `episodes_per_eval` games with one agent at one budget.
pub fn evaluate(
    cfg: &ExperimentConfig,
    agent: AgentKind,
    budget: Budget,
    dynamics: &EstimatedDynamics,
    prior: Option<&CnnParams<f32>>,
    threads: usize,
) -> Result<EvalResult> {
    cfg.validate()?;
    budget.validate()?;
    let prior = match (agent, prior) {
        (AgentKind::PbCnn, None) => {
            return Err(Error::MissingArtifact {
                what: "prior weights required by pb-cnn (set weights_path or --weights)".into(),
                path: cfg.weights_path.clone().unwrap_or_default(),
            })
        }
        (AgentKind::PbCnn, Some(p)) => Some(p),
        (AgentKind::PbUniform, _) => None,
    };
    let planner = PlannerConfig {
        budget,
        ..cfg.planner.clone()
    };
    let outcomes = par_map(cfg.episodes_per_eval, threads, |i| {
        play_episode(cfg, &planner, dynamics, prior, cfg.seed.wrapping_add(i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let scores: Vec<u64> = outcomes.iter().map(|o| o.score).collect();
    let as_f64: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    let mut lat: Vec<f64> = outcomes.iter().flat_map(|o| o.latencies_ms.iter().copied()).collect();
    let decisions = lat.len() as u64;
    let prior_total: f64 = outcomes.iter().map(|o| o.prior_ms).sum();
    lat.sort_by(f64::total_cmp);
    Ok(EvalResult {
        agent,
        budget_kind: budget.kind().to_string(),
        budget: budget.value(),
        seed: cfg.seed,
        mean_score: mean(&as_f64),
        std: sample_std(&as_f64),
        scores,
        decisions,
        latency_mean_ms: mean(&lat),
        latency_p95_ms: percentile(&lat, 0.95),
        prior_latency_mean_ms: if decisions == 0 { 0.0 } else { prior_total / decisions as f64 },
    })
}

/// Evaluate every agent at every budget. A failing cell does not stop the
/// others; its error is returned in place of its result.
pub fn sweep(
    cfg: &ExperimentConfig,
    agents: &[AgentKind],
    budgets: &[Budget],
    dynamics: &EstimatedDynamics,
    prior: Option<&CnnParams<f32>>,
    threads: usize,
) -> Result<Vec<(AgentKind, Budget, Result<EvalResult>)>> {
    if budgets.is_empty() || agents.is_empty() {
        return Err(Error::Config("sweep needs at least one agent and one budget".into()));
    }
    let mut cells = Vec::with_capacity(agents.len() * budgets.len());
    for &agent in agents {
        for &budget in budgets {
            let r = evaluate(cfg, agent, budget, dynamics, prior, threads);
            cells.push((agent, budget, r));
        }
    }
    Ok(cells)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
