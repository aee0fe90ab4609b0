use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipp_core::harness::{
    self, AgentKind, CollectPolicy, EvalResult, ExperimentConfig, ResultRow,
};
use ipp_core::planner::Budget;
use ipp_core::prior::{load_params, save_params, CnnParams};
use ipp_core::env::Action;
use ipp_core::{Error, Result};

/// Planning agent experiments: collect play, fit dynamics, train the prior,
/// evaluate.
#[derive(Parser)]
#[command(name = "ipp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Play logged episodes with a random or planning policy.
    Collect {
        #[command(flatten)]
        common: Common,
        /// `random` (flap probability 0.072), `random:P`, or `planner`.
        #[arg(long, default_value = "random")]
        policy: String,
    },
    /// Fit gravity and per-action impacts from logs.
    Estimate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the CNN prior on logged play.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Δ, the target window in ticks.
        #[arg(long)]
        delta: Option<usize>,
    },
    /// Evaluate one agent at one budget.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every agent at every budget.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Sample budget(s); a comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',', conflicts_with = "budget_ms")]
    budget_samples: Vec<u64>,
    /// Wall-clock budget(s) in milliseconds.
    #[arg(long, value_delimiter = ',')]
    budget_ms: Vec<f64>,
    /// `pb-cnn` or `pb-uniform`; a comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    agent: Vec<AgentKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trajectory log file or directory.
    #[arg(long)]
    logs: Option<PathBuf>,
    /// Dynamics JSON used for planning.
    #[arg(long)]
    dynamics: Option<PathBuf>,
    /// Prior weight file for pb-cnn.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Plan with the true physics instead of fitted dynamics.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long)]
    max_ticks: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.rng_seed = s;
        }
        if let Some(n) = self.episodes {
            cfg.episodes_per_eval = n;
        }
        if let Some(&a) = self.agent.first() {
            cfg.agent_kind = a;
        }
        if let Some(b) = self.budgets()?.first() {
            cfg.planner.budget = *b;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(p) = &self.logs {
            cfg.logs_path = Some(p.clone());
        }
        if let Some(p) = &self.dynamics {
            cfg.dynamics_path = Some(p.clone());
        }
        if let Some(p) = &self.weights {
            cfg.weights_path = Some(p.clone());
        }
        if self.ground_truth {
            cfg.ground_truth_dynamics = true;
        }
        if let Some(t) = self.max_ticks {
            cfg.max_ticks_per_episode = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn budgets(&self) -> Result<Vec<Budget>> {
        let budgets: Vec<Budget> = if self.budget_ms.is_empty() {
            self.budget_samples.iter().map(|&n| Budget::Samples(n)).collect()
        } else {
            self.budget_ms.iter().map(|&ms| Budget::Ms(ms)).collect()
        };
        budgets.iter().try_for_each(Budget::validate)?;
        Ok(budgets)
    }
}

fn logs_path(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.logs_path
        .as_deref()
        .ok_or_else(|| Error::Config("no trajectory logs given (--logs or logs_path)".into()))
}

fn parse_policy(s: &str, hover: f64) -> Result<CollectPolicy> {
    match s.split_once(':') {
        None if s == "planner" => Ok(CollectPolicy::Planner),
        None if s == "random" => Ok(CollectPolicy::Random { p_flap: hover }),
        Some(("random", p)) => p
            .parse()
            .map(|p_flap| CollectPolicy::Random { p_flap })
            .map_err(|_| Error::Config(format!("bad flap probability `{p}`"))),
        _ => Err(Error::Config(format!(
            "unknown policy `{s}` (expected random, random:P or planner)"
        ))),
    }
}

fn load_prior(cfg: &ExperimentConfig, needed: bool) -> Result<Option<CnnParams<f32>>> {
    match &cfg.weights_path {
        Some(p) if needed => Ok(Some(load_params(p, Some(Action::COUNT))?)),
        None if needed => Err(Error::MissingArtifact {
            what: "prior weights required by pb-cnn (--weights)".into(),
            path: PathBuf::new(),
        }),
        _ => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn report(r: &EvalResult) {
    println!(
        "{} {}={} episodes={} mean={} std={:.3} latency_mean_ms={:.3} latency_p95_ms={:.3}",
        r.agent,
        r.budget_kind,
        r.budget,
        r.scores.len(),
        r.mean_score,
        r.std,
        r.latency_mean_ms,
        r.latency_p95_ms
    );
}

fn run(cli: Cli) -> Result<()> {
    let threads = harness::thread_budget();
    match cli.command {
        Command::Collect { common, policy } => {
            let cfg = common.config()?;
            let policy = parse_policy(&policy, cfg.env.hover_flap_probability())?;
            let dynamics = match policy {
                CollectPolicy::Planner if cfg.dynamics_path.is_some() => {
                    harness::planning_dynamics(&cfg)?
                }
                _ => ipp_core::dynamics::EstimatedDynamics::ground_truth(&cfg.env),
            };
            let episodes = common.episodes.unwrap_or(cfg.episodes_per_eval);
            let logs = harness::collect(&cfg, episodes, policy, &dynamics, threads)?;
            harness::write_logs(&cfg.out_dir, &logs)?;
            let s = harness::summarize(&logs);
            println!(
                "collected episodes={} ticks={} mean_score={} -> {}",
                s.episodes,
                s.ticks,
                s.mean_score,
                cfg.out_dir.display()
            );
        }
        Command::Estimate { common } => {
            let cfg = common.config()?;
            let logs = harness::read_logs(logs_path(&cfg)?)?;
            let d = harness::estimate(&logs, &cfg.env)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("dynamics.json");
            d.save(&path)?;
            println!(
                "g={} flap=({}, {}) noop=({}, {}) -> {}",
                d.g_hat,
                d.impacts[0].mu,
                d.impacts[0].sigma,
                d.impacts[1].mu,
                d.impacts[1].sigma,
                path.display()
            );
        }
        Command::TrainPrior {
            common,
            epochs,
            learning_rate,
            delta,
        } => {
            let mut cfg = common.config()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(d) = delta {
                cfg.train.delta_window = d;
            }
            let logs = harness::read_logs(logs_path(&cfg)?)?;
            let out = harness::train_prior(&logs, &cfg.train)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let weights = cfg.out_dir.join("prior.ippw");
            save_params(&out.params, &weights)?;
            harness::write_loss_csv(&cfg.out_dir.join("loss.csv"), &out.loss_history)?;
            println!(
                "trained epochs={} final_loss={} -> {}",
                out.loss_history.len(),
                out.loss_history.last().copied().unwrap_or(f64::NAN),
                weights.display()
            );
        }
        Command::Eval { common } => {
            let cfg = common.config()?;
            if common.agent.len() > 1 || common.budgets()?.len() > 1 {
                return Err(Error::Config(
                    "eval takes one agent and one budget; use sweep for several".into(),
                ));
            }
            let prior = load_prior(&cfg, cfg.agent_kind == AgentKind::PbCnn)?;
            let dynamics = harness::planning_dynamics(&cfg)?;
            let r = harness::evaluate(
                &cfg,
                cfg.agent_kind,
                cfg.planner.budget,
                &dynamics,
                prior.as_ref(),
                threads,
            )?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_json(&cfg.out_dir.join("eval.json"), &r)?;
            harness::write_rows_csv(&cfg.out_dir.join("eval.csv"), &[r.row()])?;
            report(&r);
        }
        Command::Sweep { common } => {
            let cfg = common.config()?;
            let agents = if common.agent.is_empty() {
                vec![AgentKind::PbUniform, AgentKind::PbCnn]
            } else {
                common.agent.clone()
            };
            let budgets = common.budgets()?;
            let prior = load_prior(&cfg, agents.contains(&AgentKind::PbCnn))?;
            let dynamics = harness::planning_dynamics(&cfg)?;
            let cells = harness::sweep(&cfg, &agents, &budgets, &dynamics, prior.as_ref(), threads)?;
            let mut rows: Vec<ResultRow> = Vec::new();
            let mut results = Vec::new();
            let mut failed = None;
            for (agent, budget, r) in cells {
                match r {
                    Ok(r) => {
                        report(&r);
                        rows.push(r.row());
                        results.push(r);
                    }
                    Err(e) => {
                        eprintln!("error: {agent} {}={}: {e}", budget.kind(), budget.value());
                        failed.get_or_insert(e);
                    }
                }
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            harness::write_rows_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
            write_json(&cfg.out_dir.join("sweep.json"), &results)?;
            if let Some(e) = failed {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
