use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, Context as _};
use cmab_core::health::{
    continuity_report, exploitation_ratio, spearman, stability_report, HealthParams,
};
use cmab_core::io::{read_jsonl, write_atomic};
use cmab_core::replay::{
    replay as run_replay, FixedArmPolicy, LinUcbPolicy, ReplayLog, ReplayPolicy,
};
use cmab_core::sim::{recount_regret, RunLayout, WorldSpec};
use cmab_core::training::ModelHolder;
use cmab_core::{ArmId, DecisionRecord, Keyspace, ModelConfig};
use serde_json::{json, Value};

use super::sim::WORLD_COPY;
use crate::cli::{HealthArgs, PolicyArg, ReplayArgs, ReportKind, TuneArgs};
use crate::{emit, usage, Ctx};

fn read_decisions(path: &Path) -> anyhow::Result<Vec<DecisionRecord>> {
    read_jsonl(path).with_context(|| format!("cannot read decision log {}", path.display()))
}

fn read_replay_log(path: &Path) -> anyhow::Result<ReplayLog> {
    ReplayLog::read(path).with_context(|| format!("cannot read replay log {}", path.display()))
}

fn parse_keyspace(s: &str) -> anyhow::Result<Keyspace> {
    let parts: Vec<&str> = s.split('/').collect();
    match parts.as_slice() {
        [i, t, v] => Ok(Keyspace::new(*i, *t, *v)),
        _ => Err(usage(format!("`{s}` is not instance/test/variant"))),
    }
}

fn keyspaces_of(decisions: &[DecisionRecord]) -> BTreeSet<Keyspace> {
    decisions.iter().map(|d| d.keyspace()).collect()
}

fn exploitation_csv(
    ctx: &Ctx,
    decisions: &[DecisionRecord],
    models: &Path,
    keyspace: &Keyspace,
    params: &HealthParams,
) -> anyhow::Result<(String, Value)> {
    let subset: Vec<DecisionRecord> = decisions
        .iter()
        .filter(|d| &d.keyspace() == keyspace)
        .cloned()
        .collect();
    let history = ModelHolder::new(models)
        .history(keyspace)
        .with_context(|| format!("cannot load snapshots of {keyspace}"))?;
    let report = exploitation_ratio(&subset, &history, params, ctx.exec)?;
    let summary = json!({
        "buckets": report.rows.len(),
        "first_ratio": report.rows.first().map(|r| r.ratio),
        "last_ratio": report.rows.last().map(|r| r.ratio),
        "excluded": report.excluded,
    });
    Ok((report.to_csv(), summary))
}

pub fn report(ctx: &Ctx, kind: &ReportKind) -> anyhow::Result<()> {
    let out = ctx.out.as_deref();
    match kind {
        ReportKind::Continuity { decisions, flags } => {
            let log = read_decisions(decisions)?;
            let report = continuity_report(&log, &flags.params(), ctx.exec)?;
            emit(out, &report.to_csv())
        }
        ReportKind::Stability { decisions, flags } => {
            let log = read_decisions(decisions)?;
            let report = stability_report(&log, &flags.params(), ctx.exec)?;
            emit(out, &report.to_csv())
        }
        ReportKind::Exploitation {
            decisions,
            models,
            keyspace,
            flags,
        } => {
            let log = read_decisions(decisions)?;
            let keyspace = match keyspace {
                Some(k) => parse_keyspace(k)?,
                None => {
                    let all = keyspaces_of(&log);
                    if all.len() > 1 {
                        let names: Vec<String> = all.iter().map(|k| k.to_string()).collect();
                        return Err(usage(format!(
                            "the log has several keyspaces ({}); pass --keyspace",
                            names.join(", ")
                        )));
                    }
                    all.into_iter()
                        .next()
                        .ok_or_else(|| anyhow!("decision log {} is empty", decisions.display()))?
                }
            };
            let (csv, _) = exploitation_csv(ctx, &log, models, &keyspace, &flags.params())?;
            emit(out, &csv)
        }
        ReportKind::Replay(args) => replay(ctx, args),
        ReportKind::Regret { run, world } => {
            let world = world.clone().unwrap_or_else(|| run.join(WORLD_COPY));
            let spec = WorldSpec::from_json(&crate::read_file(&world)?)
                .with_context(|| format!("invalid world {}", world.display()))?;
            let csv = recount_regret(&spec, run)
                .with_context(|| format!("cannot recount regret for {}", run.display()))?;
            emit(out, &csv)
        }
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

pub fn replay(ctx: &Ctx, args: &ReplayArgs) -> anyhow::Result<()> {
    let log = read_replay_log(&args.log)?;
    let params = args.mode.params(ctx.seed.unwrap_or(0));
    let mut policy: Box<dyn ReplayPolicy> = match &args.policy {
        PolicyArg::Fixed(arm) => {
            let arm = ArmId::new(arm.clone());
            if !log.header.arm_set.contains(&arm) {
                return Err(usage(format!("arm `{arm}` is not in the log's arm set")));
            }
            Box::new(FixedArmPolicy(arm))
        }
        PolicyArg::LinUcb => {
            let dimension = log
                .dimension()
                .ok_or_else(|| anyhow!("replay log {} has no events", args.log.display()))?;
            let config = ModelConfig::new(dimension)
                .with_lambda(args.lambda)
                .with_alpha(args.alpha);
            Box::new(LinUcbPolicy::new(config, &log.header.arm_set)?)
        }
    };
    let report = run_replay(&log, policy.as_mut(), &params)?;
    emit(ctx.out.as_deref(), &pretty(&report))
}

pub fn tune_lambda(ctx: &Ctx, args: &TuneArgs) -> anyhow::Result<()> {
    let log = read_replay_log(&args.log)?;
    let params = args.mode.params(ctx.seed.unwrap_or(0));
    let report = cmab_core::replay::tune_lambda(&log, &args.grid, args.alpha, &params, ctx.exec)?;
    emit(ctx.out.as_deref(), &pretty(&report))
}

fn section<T>(
    result: Result<T, cmab_core::health::HealthError>,
    f: impl FnOnce(T) -> anyhow::Result<Value>,
) -> anyhow::Result<Value> {
    match result {
        Ok(r) => f(r),
        Err(e) => Ok(json!({ "skipped": e.to_string() })),
    }
}

fn write_csv(path: &Path, csv: &str) -> anyhow::Result<()> {
    write_atomic(path, csv.as_bytes()).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes continuity.csv, stability.csv, one exploitation CSV per keyspace
/// and health.json into --out. Reports that cannot be computed (too short a
/// log, too little support) are listed in health.json with the reason.
pub fn health(ctx: &Ctx, args: &HealthArgs) -> anyhow::Result<()> {
    let out = ctx.out()?;
    let layout = RunLayout::new(&args.run);
    let log = read_decisions(&layout.decisions())?;
    if log.is_empty() {
        return Err(anyhow!(
            "decision log {} is empty",
            layout.decisions().display()
        ));
    }
    let params = args.flags.params();
    params.validate()?;

    let continuity = section(continuity_report(&log, &params, ctx.exec), |r| {
        let (d, kl): (Vec<f64>, Vec<f64>) = r
            .rows
            .iter()
            .map(|row| (row.hamming_distance as f64, row.mean_kl))
            .unzip();
        write_csv(&out.join("continuity.csv"), &r.to_csv())?;
        Ok(json!({ "contexts": r.contexts, "rows": r.rows.len(), "spearman": spearman(&d, &kl) }))
    })?;
    let stability = section(stability_report(&log, &params, ctx.exec), |r| {
        write_csv(&out.join("stability.csv"), &r.to_csv())?;
        Ok(json!({
            "rows": r.rows.len(),
            "first_mean_kl": r.rows.first().map(|x| x.mean_kl),
            "last_mean_kl": r.rows.last().map(|x| x.mean_kl),
        }))
    })?;
    let mut exploitation = serde_json::Map::new();
    for k in keyspaces_of(&log) {
        let (csv, summary) = exploitation_csv(ctx, &log, &layout.models(), &k, &params)?;
        let path = out
            .join("exploitation")
            .join(&k.instance_id)
            .join(&k.test_id)
            .join(format!("{}.csv", k.variant_id));
        write_csv(&path, &csv)?;
        exploitation.insert(k.to_string(), summary);
    }
    let summary = json!({
        "decisions": log.len(),
        "params": params,
        "continuity": continuity,
        "stability": stability,
        "exploitation": exploitation,
    });
    let text = pretty(&summary);
    write_atomic(&out.join("health.json"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
