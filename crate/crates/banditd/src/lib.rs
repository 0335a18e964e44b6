//! Commands behind the `banditd` binary. Exposed as a library so the HTTP
//! router and the commands can be driven in-process by tests.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data errors
//! (unreadable or invalid inputs, failed training, empty reports).

pub mod arms;
pub mod cli;
mod commands;
pub mod manifest;
pub mod service;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use cmab_core::config::{Instance, Registry};
use cmab_core::Execution;

use crate::cli::{Cli, Command};

/// A bad invocation rather than bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        1
    } else {
        2
    }
}

/// Global options shared by every command.
pub(crate) struct Ctx {
    registry: Option<Registry>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub exec: Execution,
}

impl Ctx {
    pub fn registry(&self) -> anyhow::Result<&Registry> {
        self.registry
            .as_ref()
            .ok_or_else(|| usage("this command needs --config (or BANDITD_CONFIG)"))
    }

    pub fn out(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| usage("this command needs --out (or BANDITD_OUT)"))
    }

    /// The named instance, or the only one when no name is given.
    pub fn instance(&self, name: Option<&str>) -> anyhow::Result<&Instance> {
        let registry = self.registry()?;
        match name {
            Some(id) => registry
                .instance(id)
                .ok_or_else(|| usage(format!("no instance `{id}` in the registry"))),
            None if registry.instances.len() == 1 => Ok(&registry.instances[0]),
            None => Err(usage("the registry has several instances; pass --instance")),
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    // an invalid config fails every command, even ones that do not use it
    let registry = match &cli.config {
        Some(path) => Some(Registry::load(path).context("invalid config")?),
        None => None,
    };
    let ctx = Ctx {
        registry,
        seed: cli.seed,
        out: cli.out,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::Run(args) => commands::sim::run(&ctx, &args),
        Command::Serve(args) => commands::serve::serve(&ctx, &args),
        Command::Train(args) => commands::offline::train(&ctx, &args),
        Command::CloseWindow(args) => commands::offline::close_window(&ctx, &args),
        Command::Health(args) => commands::reports::health(&ctx, &args),
        Command::Replay(args) => commands::reports::replay(&ctx, &args),
        Command::TuneLambda(args) => commands::reports::tune_lambda(&ctx, &args),
        Command::Simulate(args) => commands::sim::simulate(&ctx, &args),
        Command::Report(args) => commands::reports::report(&ctx, &args.kind),
    }
}

pub(crate) fn read_file(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Writes to `--out` atomically, or to stdout when no path was given.
pub(crate) fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => cmab_core::io::write_atomic(path, text.as_bytes())
            .with_context(|| format!("cannot write {}", path.display())),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub(crate) fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}
