use std::path::Path;

use anyhow::{bail, Context as _};
use cmab_core::config::Instance;
use cmab_core::io::{sha256_hex, write_atomic};
use cmab_core::sim::{run_simulation, SimConfig, SimSummary, VariantSpec, WorldSpec};
use cmab_core::Keyspace;

use crate::cli::{RunArgs, SimulateArgs};
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::{usage, Ctx};

/// Copies of the inputs, kept next to the outputs.
pub const WORLD_COPY: &str = "inputs/world.json";
pub const SIM_COPY: &str = "inputs/sim.json";

fn load_world(path: &Path) -> anyhow::Result<(WorldSpec, String)> {
    let text = crate::read_file(path)?;
    let spec =
        WorldSpec::from_json(&text).with_context(|| format!("invalid world {}", path.display()))?;
    Ok((spec, text))
}

pub fn simulate(ctx: &Ctx, args: &SimulateArgs) -> anyhow::Result<()> {
    let out = ctx.out()?;
    let (spec, world_text) = load_world(&args.world)?;
    let mut config: SimConfig = match &args.sim {
        Some(path) => serde_json::from_str(&crate::read_file(path)?)
            .with_context(|| format!("invalid simulation settings {}", path.display()))?,
        None => SimConfig::default(),
    };
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if ctx.seed.is_some() {
        config.seed = ctx.seed;
    }
    let config_text = serde_json::to_string_pretty(&config)?;
    finish(
        "simulate",
        &spec,
        &world_text,
        &config,
        sha256_hex(config_text.as_bytes()),
        out,
    )
}

/// `run --world`: the registry instance, driven by simulated traffic.
pub fn run(ctx: &Ctx, args: &RunArgs) -> anyhow::Result<()> {
    let Some(world) = &args.world else {
        return super::serve::host(ctx, &args.listen, true, Some(args.duration));
    };
    let registry = ctx.registry()?;
    let instance = ctx.instance(args.instance.as_deref())?;
    let out = ctx.out()?;
    let (spec, world_text) = load_world(world)?;
    if serde_json::to_value(&*instance.schema)? != serde_json::to_value(&spec.schema)? {
        bail!(
            "instance `{}` and world {} declare different feature schemas",
            instance.config.instance_id,
            world.display()
        );
    }
    if args.ms_per_round <= 0 {
        return Err(usage("--ms-per-round must be positive"));
    }
    let rounds = args.duration.saturating_mul(1000) / args.ms_per_round as u64;
    if rounds == 0 {
        return Err(usage("--duration is shorter than one round"));
    }
    let config = sim_config(instance, rounds, args, ctx.seed);
    finish(
        "run",
        &spec,
        &world_text,
        &config,
        sha256_hex(&registry.source_bytes),
        out,
    )
}

fn sim_config(instance: &Instance, rounds: u64, args: &RunArgs, seed: Option<u64>) -> SimConfig {
    let c = &instance.config;
    SimConfig {
        instance_id: c.instance_id.clone(),
        rounds,
        ms_per_round: args.ms_per_round,
        window_ms: (c.cycle_period_secs * 1000) as i64,
        lambda: c.model.lambda,
        alpha: c.model.alpha,
        variants: c
            .keyspaces
            .iter()
            .map(|k| VariantSpec::new(&k.test_id, &k.variant_id))
            .collect(),
        explore_fraction: args.explore_fraction,
        rules: c.rules.clone(),
        fallback_unconstrained: c.fallback_on_empty_eligible,
        regret_every: (rounds / 100).max(1),
        seed,
        ..SimConfig::default()
    }
}

fn finish(
    command: &str,
    spec: &WorldSpec,
    world_text: &str,
    config: &SimConfig,
    config_sha256: String,
    out: &Path,
) -> anyhow::Result<()> {
    let summary: SimSummary = run_simulation(spec, config, out)?;
    write_atomic(&out.join(WORLD_COPY), world_text.as_bytes())?;
    let mut sim_text = serde_json::to_string_pretty(config)?;
    sim_text.push('\n');
    write_atomic(&out.join(SIM_COPY), sim_text.as_bytes())?;
    let keyspaces: Vec<Keyspace> = config.keyspaces();
    let manifest = Manifest::collect(
        command,
        &config.instance_id,
        &keyspaces,
        config_sha256,
        sha256_hex(world_text.as_bytes()),
        out,
        &summary,
    )?;
    let text = manifest.to_json();
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
