use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmab_core::health::HealthParams;
use cmab_core::replay::ReplayParams;

#[derive(Debug, Parser)]
#[command(
    name = "banditd",
    version,
    about = "Contextual bandit service, trainer, simulator and reports",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error."
)]
pub struct Cli {
    /// Instance registry (JSON). Validated before any command runs.
    #[arg(long, global = true, env = "BANDITD_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for anything random; overrides the world's seed.
    #[arg(long, global = true, env = "BANDITD_SEED")]
    pub seed: Option<u64>,

    /// State or output directory; a file path for single-file reports.
    #[arg(long, global = true, env = "BANDITD_OUT", value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// error, warn, info, debug or trace. Logs go to stderr.
    #[arg(
        long,
        global = true,
        env = "BANDITD_LOG",
        default_value = "warn",
        value_name = "LEVEL"
    )]
    pub log_level: tracing::Level,

    /// Run reports and tuning on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Everything in one process: simulate a world through the full stack
    /// (with --world), or host serving, pipeline and trainer for --duration.
    Run(RunArgs),
    /// Host the HTTP serving API with the aggregation pipeline.
    Serve(ServeArgs),
    /// Train every keyspace on its closed windows and publish snapshots.
    Train(TrainArgs),
    /// Close the open aggregation window of every configured keyspace.
    ///
    /// Only safe while no `serve` process owns the state directory.
    CloseWindow(CloseArgs),
    /// Continuity, stability and exploitation reports for a state directory.
    Health(HealthArgs),
    /// Evaluate a policy offline on a uniformly logged replay log.
    Replay(ReplayArgs),
    /// Choose the regularizer by replaying LinUCB over a grid.
    TuneLambda(TuneArgs),
    /// Run a synthetic world end to end into --out.
    Simulate(SimulateArgs),
    /// Write one plot-ready report (CSV or JSON) to --out or stdout.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ListenArgs {
    /// Address for the HTTP API; port 0 picks a free one.
    #[arg(long, env = "BANDITD_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,

    /// Seconds between snapshot reloads when training runs elsewhere.
    #[arg(long, default_value_t = 5)]
    pub reload_secs: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// World to simulate. Its schema must equal the instance schema.
    #[arg(long, value_name = "FILE")]
    pub world: Option<PathBuf>,

    /// Instance to run; required when the registry has several.
    #[arg(long)]
    pub instance: Option<String>,

    /// Seconds to run: simulated time with --world, wall-clock otherwise.
    #[arg(long)]
    pub duration: u64,

    /// Simulated milliseconds between requests.
    #[arg(long, default_value_t = 1000)]
    pub ms_per_round: i64,

    /// Share of simulated requests logged uniformly at random for replay.
    #[arg(long, default_value_t = 0.0)]
    pub explore_fraction: f64,

    #[command(flatten)]
    pub listen: ListenArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub listen: ListenArgs,

    /// Leave training to a separate `banditd train` process.
    #[arg(long)]
    pub no_trainer: bool,

    /// Stop after this many seconds instead of waiting for Ctrl-C.
    #[arg(long)]
    pub duration: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Repeat every SECS seconds instead of running once.
    #[arg(long, value_name = "SECS")]
    pub every: Option<u64>,

    /// With --every, stop after this many cycles.
    #[arg(long)]
    pub cycles: Option<u64>,

    /// Enqueue time in epoch ms (default: now). Fixing it makes runs
    /// reproducible.
    #[arg(long)]
    pub now_ms: Option<i64>,
}

#[derive(Debug, Args)]
pub struct CloseArgs {
    /// Only this instance's keyspaces.
    #[arg(long)]
    pub instance: Option<String>,

    /// Clock for orphan expiry, epoch ms (default: now).
    #[arg(long)]
    pub now_ms: Option<i64>,
}

#[derive(Debug, Clone, Args)]
pub struct HealthFlags {
    /// Distribution window length.
    #[arg(long, default_value_t = HealthParams::default().epsilon_ms)]
    pub epsilon_ms: i64,

    /// Offset between the two compared windows.
    #[arg(long, default_value_t = HealthParams::default().delta_ms)]
    pub delta_ms: i64,

    /// Minimum pulls before a context's distribution is used.
    #[arg(long, default_value_t = HealthParams::default().min_support)]
    pub min_support: u64,

    /// Additive pseudo-count per arm.
    #[arg(long, default_value_t = HealthParams::default().smoothing)]
    pub smoothing: f64,

    /// Stability grid spacing (default: epsilon).
    #[arg(long)]
    pub grid_step_ms: Option<i64>,

    /// Exploitation bucket width (default: epsilon).
    #[arg(long)]
    pub bucket_ms: Option<i64>,
}

impl HealthFlags {
    pub fn params(&self) -> HealthParams {
        HealthParams {
            epsilon_ms: self.epsilon_ms,
            delta_ms: self.delta_ms,
            min_support: self.min_support,
            smoothing: self.smoothing,
            grid_step_ms: self.grid_step_ms,
            bucket_ms: self.bucket_ms,
        }
    }
}

#[derive(Debug, Args)]
pub struct HealthArgs {
    /// State or run directory holding logs/ and models/.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,

    #[command(flatten)]
    pub flags: HealthFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Classic,
    Windowed,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayModeFlags {
    #[arg(long, value_enum, default_value = "classic")]
    pub mode: ModeArg,

    /// Windowed look-back in ms; `inf` for unbounded.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub t1_ms: f64,

    /// Windowed look-ahead in ms; `inf` for unbounded.
    #[arg(long, default_value_t = f64::INFINITY)]
    pub t2_ms: f64,

    /// Windowed replay: never reuse a logged event.
    #[arg(long)]
    pub no_repetitions: bool,
}

impl ReplayModeFlags {
    pub fn params(&self, seed: u64) -> ReplayParams {
        let p = match self.mode {
            ModeArg::Classic => ReplayParams::classic(),
            ModeArg::Windowed => ReplayParams::windowed(self.t1_ms, self.t2_ms),
        };
        let p = p.with_seed(seed);
        if self.no_repetitions {
            p.without_repetitions()
        } else {
            p
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyArg {
    Fixed(String),
    LinUcb,
}

fn parse_policy(s: &str) -> Result<PolicyArg, String> {
    match s.split_once(':') {
        Some(("fixed", arm)) if !arm.is_empty() => Ok(PolicyArg::Fixed(arm.to_string())),
        None if s == "linucb" => Ok(PolicyArg::LinUcb),
        _ => Err(format!("`{s}` is not `fixed:ARM` or `linucb`")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Replay log: a header line, then one event per line.
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,

    /// `fixed:ARM` or `linucb`.
    #[arg(long, default_value = "linucb", value_parser = parse_policy)]
    pub policy: PolicyArg,

    #[command(flatten)]
    pub mode: ReplayModeFlags,

    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,

    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, value_name = "FILE")]
    pub log: PathBuf,

    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,

    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,

    #[command(flatten)]
    pub mode: ReplayModeFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// World definition (JSON).
    #[arg(long, value_name = "FILE")]
    pub world: PathBuf,

    /// Simulation settings (JSON); missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    pub sim: Option<PathBuf>,

    #[arg(long)]
    pub rounds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub kind: ReportKind,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Mean KL between serving distributions by context Hamming distance.
    ///
    /// CSV after one `#` comment line naming the smoothing:
    ///   distance,mean_kl,pair_count
    Continuity {
        /// Decision log (JSONL).
        #[arg(long, value_name = "FILE")]
        decisions: PathBuf,
        #[command(flatten)]
        flags: HealthFlags,
    },
    /// Mean KL between each context's distribution at age t and t+delta.
    ///
    /// CSV after one `#` comment line naming the smoothing:
    ///   t,mean_kl
    /// where t is the instance age in ms.
    Stability {
        #[arg(long, value_name = "FILE")]
        decisions: PathBuf,
        #[command(flatten)]
        flags: HealthFlags,
    },
    /// Share of decisions that matched the serving snapshot's greedy pick.
    ///
    /// CSV columns:
    ///   t,ratio
    /// where t is the bucket start as instance age in ms.
    Exploitation {
        #[arg(long, value_name = "FILE")]
        decisions: PathBuf,
        /// Model directory (a state directory's models/).
        #[arg(long, value_name = "DIR")]
        models: PathBuf,
        /// instance/test/variant; needed when the log has several.
        #[arg(long)]
        keyspace: Option<String>,
        #[command(flatten)]
        flags: HealthFlags,
    },
    /// Replay evaluation as JSON: params, matched, total, reward_sum,
    /// mean_reward, exhausted_steps.
    Replay(ReplayArgs),
    /// Cumulative reward curves of a simulation run.
    ///
    /// CSV columns:
    ///   round,served,cumulative_reward,cumulative_expected,cumulative_oracle,cumulative_uniform
    /// Recomputed from the run's logs and snapshots, so it doubles as an
    /// audit of regret.csv.
    Regret {
        /// Run directory from `simulate` or `run --world`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// World file (default: the copy saved in the run directory).
        #[arg(long, value_name = "FILE")]
        world: Option<PathBuf>,
    },
}
